import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import separable_dataset
from nfseg.anatomy import AnatomicalRegion, BodyRegionPartition
from nfseg.candidates import make_candidate
from nfseg.forest import (
    ForestError,
    ForestParams,
    RandomForestModel,
    RegionClassifierBundle,
    Tree,
    bundle_from_json,
    bundle_to_json,
    classify_candidates,
    importances,
    load_model,
    oob_accuracy,
    predict_proba,
    save_model,
    train_forest,
    train_forest_arrays,
)
from nfseg.selection import FeatureMatrix
from nfseg.volume import VolumeGeometry

P50 = ForestParams(n_trees=50)


def leaf(c0, c1):
    return Tree(*(np.array([v], dtype=dt) for v, dt in
                  ((-1, np.int64), (0.0, float), (-1, np.int64), (-1, np.int64), (c0, float), (c1, float))))


def stump(feature, thr, left=(3, 0), right=(0, 3)):
    return Tree(
        np.array([feature, -1, -1]), np.array([thr, 0.0, 0.0]),
        np.array([1, -1, -1]), np.array([2, -1, -1]),
        np.array([left[0] + right[0], left[0], right[0]], float),
        np.array([left[1] + right[1], left[1], right[1]], float),
    )


def fixed_model(trees, names, region=None):
    return RandomForestModel(trees, names, ForestParams(n_trees=len(trees)), region)


@pytest.fixture(scope="module")
def separable():
    X, y, names = separable_dataset(0)
    return X, y, names, train_forest_arrays(X, y, names, ForestParams(seed=3))


class TestTraining:
    def test_training_accuracy(self, separable):
        X, y, _, model = separable
        assert np.array_equal((model.predict_matrix(X) >= 0.5).astype(int), y)

    def test_two_seeds_same_decisions(self, separable):
        X, y, names, model = separable
        other = train_forest_arrays(X, y, names, ForestParams(seed=99))
        assert np.array_equal(model.predict_matrix(X) >= 0.5, other.predict_matrix(X) >= 0.5)

    def test_oob_accuracy(self, separable):
        X, y, _, model = separable
        assert oob_accuracy(model, X, y) >= 0.95

    def test_single_class_is_error(self):
        with pytest.raises(ForestError, match="single class"):
            train_forest_arrays(np.zeros((5, 2)), np.ones(5, int), ["a", "b"])

    def test_empty_is_error(self):
        with pytest.raises(ForestError):
            train_forest_arrays(np.zeros((0, 2)), np.zeros(0, int), ["a", "b"])

    def test_unlabelled_matrix_is_error(self):
        m = FeatureMatrix(np.zeros((2, 1)), ["a"], ["s", "s"], [1, 2], ["chest", "chest"])
        with pytest.raises(ForestError):
            train_forest(m)

    @pytest.mark.parametrize("kw", [{"n_trees": 0}, {"min_samples_leaf": 0}, {"mtry": 0}, {"max_depth": -1}])
    def test_bad_params(self, kw):
        with pytest.raises(ForestError):
            ForestParams(**kw)

    def test_mtry_above_p(self):
        with pytest.raises(ForestError):
            train_forest_arrays(np.eye(4), np.array([0, 1, 0, 1]), list("abcd"), ForestParams(mtry=5))

    def test_backends_grow_identical_trees(self, separable):
        X, y, names, _ = separable
        a = train_forest_arrays(X, y, names, P50, use_numba=True)
        b = train_forest_arrays(X, y, names, P50, use_numba=False)
        for ta, tb in zip(a.trees, b.trees):
            for fa, fb in zip(ta, tb):
                assert np.array_equal(fa, fb)

    def test_reproducible_for_fixed_seed(self, separable):
        X, y, names, _ = separable
        a = train_forest_arrays(X, y, names, P50)
        b = train_forest_arrays(X, y, names, P50)
        assert bundle_to_json(RegionClassifierBundle({AnatomicalRegion.chest: a})) == \
            bundle_to_json(RegionClassifierBundle({AnatomicalRegion.chest: b}))

    def test_leaf_counts_respect_min_leaf(self, separable):
        X, y, names, _ = separable
        m = train_forest_arrays(X, y, names, ForestParams(n_trees=10, min_samples_leaf=7))
        for t in m.trees:
            leaves = t.feature < 0
            assert np.all(t.count0[leaves] + t.count1[leaves] >= 7)


class TestPrediction:
    def test_pure_leaf(self):
        m = fixed_model([leaf(0, 4)], ["a"])
        assert predict_proba(m, {"a": 0.3}) == 1.0

    def test_feature_mismatch(self, separable):
        _, _, names, model = separable
        feats = {n: 0.0 for n in names}
        del feats["feature_1"]
        with pytest.raises(ForestError):
            predict_proba(model, feats)
        with pytest.raises(ForestError):
            predict_proba(model, {**{n: 0.0 for n in names}, "extra": 1.0})

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=5, max_size=5))
    def test_bounded(self, separable, x):
        p = separable[3].predict_matrix(np.array([x]))[0]
        assert 0.0 <= p <= 1.0

    def test_backends_predict_identically(self, separable):
        X, _, _, model = separable
        Z = np.random.default_rng(1).normal(size=(300, X.shape[1]))
        assert np.array_equal(model.predict_matrix(Z, use_numba=True), model.predict_matrix(Z, use_numba=False))

    def test_tree_order_invariance(self, separable):
        X, _, names, model = separable
        perm = np.random.default_rng(2).permutation(len(model.trees))
        shuffled = RandomForestModel([model.trees[i] for i in perm], names, model.params)
        assert np.allclose(shuffled.predict_matrix(X), model.predict_matrix(X), rtol=0, atol=1e-12)

    def test_label_flip(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(120, 4))
        y = (X[:, 0] + 0.8 * rng.normal(size=120) > 0).astype(int)  # overlapping classes
        p = train_forest_arrays(X, y, list("abcd"), P50).predict_matrix(X)
        q = train_forest_arrays(X, 1 - y, list("abcd"), P50).predict_matrix(X)
        assert np.allclose(p + q, 1.0, rtol=0, atol=1e-12)


class TestImportances:
    def test_argmax_is_feature_0(self, separable):
        imp = importances(separable[3])
        assert max(imp, key=imp.get) == "feature_0"
        assert sum(imp.values()) == pytest.approx(1.0, abs=1e-9)

    def test_stumps_on_one_feature(self):
        m = fixed_model([stump(2, 0.5), stump(2, 0.1, (2, 1), (1, 4))], list("abcd"))
        imp = importances(m)
        assert imp["c"] == 1.0 and imp["a"] == imp["b"] == imp["d"] == 0.0

    def test_all_leaves_give_zeros(self):
        assert set(importances(fixed_model([leaf(1, 1)], ["a", "b"])).values()) == {0.0}


class TestSerialisation:
    def bundle(self, separable):
        return RegionClassifierBundle({AnatomicalRegion.abdomen: separable[3]}, metadata={"k": 1})

    def test_round_trip_bit_exact(self, separable, tmp_path):
        b = self.bundle(separable)
        save_model(b, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        Z = np.random.default_rng(5).normal(size=(100, 5))
        assert np.array_equal(back.models[AnatomicalRegion.abdomen].predict_matrix(Z),
                              b.models[AnatomicalRegion.abdomen].predict_matrix(Z))
        assert bundle_to_json(back) == bundle_to_json(b)

    def test_unknown_schema_version(self, separable):
        doc = json.loads(bundle_to_json(self.bundle(separable)))
        doc["schema_version"] = 99
        with pytest.raises(ForestError, match="schema"):
            bundle_from_json(json.dumps(doc))

    def test_truncated_file(self, separable, tmp_path):
        text = bundle_to_json(self.bundle(separable))
        (tmp_path / "m.json").write_text(text[: len(text) // 2])
        with pytest.raises(ForestError):
            load_model(tmp_path / "m.json")

    def test_bad_child_index(self):
        doc = json.loads(bundle_to_json(RegionClassifierBundle({AnatomicalRegion.legs: fixed_model([stump(0, 0.5)], ["a"])})))
        doc["models"]["legs"]["trees"][0]["left"][0] = 17
        with pytest.raises(ForestError):
            bundle_from_json(json.dumps(doc))

    def test_bundle_needs_a_model(self):
        with pytest.raises(ForestError):
            RegionClassifierBundle({})


class TestClassifyCandidates:
    part = BodyRegionPartition(30, 20, 10)
    geom = VolumeGeometry((3, 40, 3), (1, 1, 1))

    def setup_candidates(self):
        conf = np.full(self.geom.dims, 0.9)
        rows = {"legs": 5, "abdomen": 15, "chest": 25}
        cands = []
        for i, (name, z) in enumerate([("abdomen", 15), ("abdomen", 17), ("chest", 25), ("legs", 5)], 1):
            vox = np.array([[1, z, 0], [1, z, 1]])
            cands.append(make_candidate(i, vox, conf, self.geom, self.part))
        assert {c.region.value for c in cands} == set(rows)
        X = np.array([[0.2], [0.8], [0.3], [0.9]])
        m = FeatureMatrix(X, ["a"], ["s"] * 4, [1, 2, 3, 4], [c.region.value for c in cands])
        return cands, m

    def test_always_zero_abdomen_model(self):
        cands, m = self.setup_candidates()
        zero = fixed_model([leaf(5, 0)], ["a"], AnatomicalRegion.abdomen)
        kept, mask, probs = classify_candidates(cands, m, RegionClassifierBundle({AnatomicalRegion.abdomen: zero}), self.geom)
        assert kept == [3, 4] and probs == {1: 0.0, 2: 0.0}
        assert mask[1, 15].sum() == 0 and mask[1, 25].sum() == 2

    def test_threshold_zero_is_identity(self):
        cands, m = self.setup_candidates()
        models = {r: fixed_model([stump(0, 0.5, (4, 0), (0, 4))], ["a"], r) for r in AnatomicalRegion}
        kept, mask, _ = classify_candidates(cands, m, RegionClassifierBundle(models), self.geom, decision_threshold=0.0)
        union = np.zeros(self.geom.dims, np.uint8)
        for c in cands:
            union[tuple(c.voxel_indices.T)] = 1
        assert kept == [1, 2, 3, 4] and np.array_equal(mask, union)

    def test_threshold_and_fallback(self):
        cands, m = self.setup_candidates()
        model = fixed_model([stump(0, 0.5, (4, 0), (0, 4))], ["a"])
        keep = RegionClassifierBundle({AnatomicalRegion.abdomen: model})
        assert classify_candidates(cands, m, keep, self.geom)[0] == [2, 3, 4]
        drop = RegionClassifierBundle({AnatomicalRegion.abdomen: model}, fallback="drop")
        assert classify_candidates(cands, m, drop, self.geom)[0] == [2]

    def test_missing_feature_row(self):
        cands, m = self.setup_candidates()
        bundle = RegionClassifierBundle({AnatomicalRegion.legs: fixed_model([leaf(1, 1)], ["a"])})
        with pytest.raises(ForestError):
            classify_candidates(cands, m.rows([True, True, True, False]), bundle, self.geom)
