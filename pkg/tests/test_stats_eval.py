import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from conftest import wilcoxon_enumeration_p
from nfseg.anatomy import BodyRegionPartition
from nfseg.evaluation import (
    ScanMetrics,
    detection_f1,
    evaluate_scan,
    f1_score,
    match_instances,
    overlap_metrics,
    per_tumor_dsc,
    study_report,
)
from nfseg.stats import pearson_r, wilcoxon_signed_rank
from nfseg.volume import VolumeError, VolumeGeometry, binary_label_volume


class TestPearson:
    def test_identity_and_negation(self):
        x = [1.0, 2.0, 4.0, 7.0]
        assert pearson_r(x, x)[0] == 1.0
        assert pearson_r(x, [-v for v in x])[0] == -1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_against_scipy(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=50)
        y = 0.3 * x + rng.normal(size=50)
        r, p = pearson_r(x, y)
        ref = sps.pearsonr(x, y)
        assert r == pytest.approx(ref.statistic, rel=1e-9)
        assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            pearson_r([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson_r([1, 2, 3], [1, 2])
        with pytest.raises(ValueError):
            pearson_r([1, 2], [1, 2])


class TestWilcoxon:
    def test_equal_samples(self):
        assert wilcoxon_signed_rank([1, 2, 3], [1, 2, 3]) == (1.0, 1.0)

    def test_constant_shift_n10(self):
        a = np.random.default_rng(0).normal(size=10)
        b = a + 0.5
        assert wilcoxon_signed_rank(a, b)[0] == wilcoxon_enumeration_p(a, b) == 2 / 1024

    def test_bonferroni_clamp(self):
        # T+ = 3 of 10 for n = 4 gives p = 0.625; x5 clamps at 1
        p, adj = wilcoxon_signed_rank([1, 2, -3, -4], [0, 0, 0, 0], 5)
        assert p == 0.625 and adj == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_exact_matches_enumeration_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        a = rng.integers(-3, 4, n).astype(float)  # ties and zeros on purpose
        b = np.zeros(n)
        assert wilcoxon_signed_rank(a, b, mode="exact")[0] == wilcoxon_enumeration_p(a, b)

    @pytest.mark.parametrize("seed", range(3))
    def test_normal_mode_against_scipy(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=40)
        b = a + rng.normal(0.2, 1.0, 40)
        ref = sps.wilcoxon(a, b, zero_method="wilcox", correction=True, method="approx")
        assert wilcoxon_signed_rank(a, b, mode="normal")[0] == pytest.approx(ref.pvalue, rel=1e-9)

    def test_auto_switches_to_normal_above_25(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=30), rng.normal(size=30)
        assert wilcoxon_signed_rank(a, b)[0] == wilcoxon_signed_rank(a, b, mode="normal")[0]

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2], [1])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1], [2], n_comparisons=0)
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1], [2], mode="bogus")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30))
    def test_p_in_unit_interval_and_sign_symmetric(self, d):
        a = np.asarray(d, float)
        p = wilcoxon_signed_rank(a, np.zeros_like(a))[0]
        assert 0 < p <= 1
        assert p == wilcoxon_signed_rank(np.zeros_like(a), a)[0]


def mask(shape, *boxes):
    m = np.zeros(shape, np.uint8)
    for b in boxes:
        m[b] = 1
    return m


class TestOverlap:
    def test_identity(self):
        m = mask((2, 2, 2), np.s_[:, :, :])
        assert overlap_metrics(m, m) == (1.0, 0.0, 0.0)

    def test_half_overlap(self):
        p = mask((1, 1, 6), np.s_[0, 0, 0:4])
        g = mask((1, 1, 6), np.s_[0, 0, 2:6])
        dsc, voe, arvd = overlap_metrics(p, g)
        assert dsc == 0.5 and voe == pytest.approx(1 - 2 / 6) and arvd == 0

    def test_disjoint(self):
        p = mask((1, 1, 4), np.s_[0, 0, 0])
        g = mask((1, 1, 4), np.s_[0, 0, 3])
        assert overlap_metrics(p, g)[:2] == (0.0, 1.0)

    def test_empty_conventions(self):
        z = np.zeros((2, 2, 2), np.uint8)
        assert overlap_metrics(z, z) == (1.0, 0.0, 0.0)
        assert overlap_metrics(mask((2, 2, 2), np.s_[0, 0, 0]), z)[2] == math.inf

    def test_geometry_mismatch(self):
        a = binary_label_volume(VolumeGeometry((2, 2, 2), (1, 1, 1)), np.zeros((2, 2, 2)))
        b = binary_label_volume(VolumeGeometry((2, 2, 2), (1, 1, 2)), np.zeros((2, 2, 2)))
        with pytest.raises(VolumeError):
            overlap_metrics(a, b)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.9), st.floats(0.01, 0.9))
    def test_voe_identity_and_symmetry(self, seed, pa, pb):
        rng = np.random.default_rng(seed)
        a = rng.random((8, 8, 8)) < pa
        b = rng.random((8, 8, 8)) < pb
        dsc, voe, _ = overlap_metrics(a, b)
        assert abs(voe - (1 - dsc / (2 - dsc))) < 1e-12
        assert overlap_metrics(b, a)[0] == dsc


class TestMatching:
    shape = (1, 30, 3)

    def test_one_voxel_overlap_is_tp(self):
        g = mask(self.shape, np.s_[0, 0:3, 0])
        p = mask(self.shape, np.s_[0, 2:5, 1], np.s_[0, 2, 0])
        m = match_instances(g, p)
        assert (m.tp, m.fp, m.fn) == (1, 0, 0)

    def test_disjoint_pred_is_fp(self):
        g = mask(self.shape, np.s_[0, 0:3, 0])
        p = mask(self.shape, np.s_[0, 20:22, 0])
        m = match_instances(g, p)
        assert (m.tp, m.fp, m.fn) == (0, 1, 1)

    def test_empty(self):
        z = np.zeros(self.shape, np.uint8)
        m = match_instances(z, z)
        assert (m.tp, m.fp, m.fn) == (0, 0, 0)

    def test_per_tumor_dsc(self):
        g = mask(self.shape, np.s_[0, 0:4, 0], np.s_[0, 10:12, 0], np.s_[0, 25, 0])
        p = mask(self.shape, np.s_[0, 2:6, 0], np.s_[0, 10:12, 0])
        m = match_instances(g, p)
        # the first gt is half covered by a 4-voxel blob, the second exactly, the third missed
        assert per_tumor_dsc(m, g, p) == [0.5, 1.0] and m.fn == 1

    def test_union_of_overlapping_predictions(self):
        g = mask(self.shape, np.s_[0, 0:6, 1])
        p = mask(self.shape, np.s_[0, 0:2, 1], np.s_[0, 4:6, 1])
        m = match_instances(g, p)
        assert m.tp_pairs == [(1, [1, 2])]
        assert per_tumor_dsc(m, g, p) == [pytest.approx(2 * 4 / 10)]

    def test_labelled_input_used_as_is(self):
        g = np.zeros(self.shape, np.int64)
        g[0, 0:2, 0] = 3
        g[0, 2:4, 0] = 7  # touching, but distinct instances
        m = match_instances(g, mask(self.shape, np.s_[0, 0, 0]))
        assert m.tp_pairs == [(3, [1])] and m.fn_gt_ids == [7]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 10, 6)) < 0.08
        b = rng.random((6, 10, 6)) < 0.08
        ab, ba = match_instances(a, b), match_instances(b, a)
        assert (ab.fp, ab.fn) == (ba.fn, ba.fp)
        assert {(g, p) for g, ps in ab.tp_pairs for p in ps} == {(g, p) for p, gs in ba.tp_pairs for g in gs}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_f1_invariant_to_relabelling(self, seed):
        from nfseg.candidates import label_array

        rng = np.random.default_rng(seed)
        part = BodyRegionPartition(7, 5, 2)
        g, ng = label_array(rng.random((5, 10, 5)) < 0.08)
        p, npred = label_array(rng.random((5, 10, 5)) < 0.08)
        perm_g = np.concatenate([[0], rng.permutation(ng) + 1])[g]
        perm_p = np.concatenate([[0], rng.permutation(npred) + 1])[p]
        a = detection_f1(match_instances(g, p), part, g, p)
        b = detection_f1(match_instances(perm_g, perm_p), part, perm_g, perm_p)
        assert a == b


class TestF1:
    @pytest.mark.parametrize("counts,want", [((2, 1, 1), 4 / 6), ((3, 0, 0), 1.0), ((0, 0, 3), 0.0), ((0, 0, 0), 1.0)])
    def test_formula(self, counts, want):
        assert f1_score(*counts) == pytest.approx(want)

    def test_per_region_by_centroid(self):
        part = BodyRegionPartition(25, 15, 5)
        g = mask((1, 30, 2), np.s_[0, 2:4, 0], np.s_[0, 20:22, 0])  # legs, chest
        p = mask((1, 30, 2), np.s_[0, 2:4, 0], np.s_[0, 10, 1])  # legs TP, abdomen FP
        f1, per = detection_f1(match_instances(g, p), part, g, p)
        assert f1 == pytest.approx(2 / 4)
        assert per == {"legs": 1.0, "abdomen": 0.0, "chest": 0.0}  # head_neck empty, so absent


class TestScanAndStudy:
    geom = VolumeGeometry((2, 30, 3), (2.0, 1.0, 1.0))
    part = BodyRegionPartition(25, 15, 5)

    def vol(self, m):
        return binary_label_volume(self.geom, m)

    def test_perfect_prediction(self):
        g = self.vol(mask(self.geom.dims, np.s_[0, 2:5, 0], np.s_[1, 20, 2]))
        s = evaluate_scan(g, g, self.part, "x")
        assert (s.dsc, s.f1, s.per_tumor_dsc) == (1.0, 1.0, [1.0, 1.0])
        assert s.tumor_burden_mm3 == 8.0 and s.tumor_volumes_mm3 == [6.0, 2.0]

    def test_study_report(self):
        rng = np.random.default_rng(0)
        rows = {"base": [], "better": []}
        for i in range(6):
            g = mask(self.geom.dims, np.s_[0, 2 + i:8 + i, 0], np.s_[1, 18:20 + i % 3, 2])
            noisy = np.clip(g + (rng.random(g.shape) < 0.15), 0, 1)
            rows["base"].append(evaluate_scan(self.vol(noisy), self.vol(g), self.part, f"s{i}"))
            rows["better"].append(evaluate_scan(self.vol(g), self.vol(g), self.part, f"s{i}"))
        rep = study_report(rows)
        mean_dsc = np.mean([s.dsc for s in rows["base"]])
        assert rep.aggregates["base"]["dsc"][0] == pytest.approx(mean_dsc)
        assert rep.aggregates["better"]["dsc"] == (1.0, 0.0)
        cmp = rep.comparisons[0]
        a = [s.dsc for s in rows["better"]]
        b = [s.dsc for s in rows["base"]]
        assert cmp["p_raw"] == wilcoxon_enumeration_p(a, b)
        assert "constant" in rep.correlations["better"]["per_scan_dsc_vs_burden"]["note"]
        doc = json.loads(rep.to_json())
        assert set(doc) == {"methods", "aggregates", "comparisons", "correlations"}
        assert rep.table().splitlines()[0].startswith("method")

    def test_scan_metrics_inf_serialises(self):
        s = ScanMetrics("x", 0.0, 1.0, math.inf, 0, 1, 0, 0.0)
        assert s.to_dict()["arvd"] == "inf"
