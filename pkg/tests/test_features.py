import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from haft.data import make_multiplicative_dataset
from haft.features import (BINARY_IDS, N_OPERATIONS, OP_INDEX, OPERATIONS,
                           UNARY_IDS, Feature, FeaturePool, apply_binary,
                           apply_unary, canonical_key, evaluate_tree, hygiene,
                           init_pool, leaf, parse_name, valid_mask)

finite_vectors = hnp.arrays(np.float64, st.integers(3, 30),
                            elements=st.floats(-100, 100))


def make_feature(values, name="a", index=0):
    return Feature(values=np.asarray(values, dtype=np.float64), name=name,
                   provenance=leaf(index, name))


class TestOperationSet:
    def test_sixteen_fixed_order(self):
        assert N_OPERATIONS == 16
        assert len(UNARY_IDS) == 12
        assert len(BINARY_IDS) == 4
        assert [op.name for op in OPERATIONS[:3]] == ["sqrt", "square", "cos"]
        assert [op.name for op in OPERATIONS[12:]] == ["add", "sub", "mul", "div"]


class TestHygiene:
    def test_nan_and_inf(self):
        out, report = hygiene(np.array([1.0, np.nan, np.inf]))
        assert np.array_equal(out, [1.0, 0.0, 1e12])
        assert report["nan"] == 1 and report["inf"] == 1

    def test_clean_identity(self):
        v = np.array([1.0, -2.0, 3.5])
        out, report = hygiene(v)
        assert np.array_equal(out, v)
        assert report == {"nan": 0, "inf": 0, "clamped": 0}

    def test_negative_inf(self):
        out, _ = hygiene(np.array([-np.inf]))
        assert out[0] == -1e12

    @given(finite_vectors)
    def test_finite_inputs_pass_through(self, v):
        out, report = hygiene(v)
        assert np.array_equal(out, v)
        assert report["nan"] == report["inf"] == report["clamped"] == 0


class TestValidMask:
    def test_negative_blocks_sqrt(self):
        mask = valid_mask(make_feature([-1.0, 4.0]))
        assert mask[OP_INDEX["sqrt"]] == 0
        assert mask[OP_INDEX["log"]] == 0

    def test_positive_feature_fully_valid(self):
        mask = valid_mask(make_feature([1.0, 2.0, 3.0]))
        assert np.all(mask == 1)

    def test_constant_blocks_quantile(self):
        mask = valid_mask(make_feature([2.0, 2.0, 2.0]))
        assert mask[OP_INDEX["quantile_transform"]] == 0

    def test_zero_blocks_log_and_reciprocal(self):
        mask = valid_mask(make_feature([0.0, 1.0]))
        assert mask[OP_INDEX["log"]] == 0
        assert mask[OP_INDEX["reciprocal"]] == 0
        assert mask[OP_INDEX["sqrt"]] == 1

    def test_tan_pole_guard(self):
        mask = valid_mask(make_feature([np.pi / 2 + 1e-8, 1.0]))
        assert mask[OP_INDEX["tan"]] == 0
        mask = valid_mask(make_feature([np.pi / 2 + np.pi, 1.0]))
        assert mask[OP_INDEX["tan"]] == 0

    def test_exp_overflow_guard(self):
        mask = valid_mask(make_feature([51.0, 1.0]))
        assert mask[OP_INDEX["exp"]] == 0

    def test_power_guard(self):
        mask = valid_mask(make_feature([1e11, 1.0]))
        assert mask[OP_INDEX["square"]] == 0
        assert mask[OP_INDEX["cube"]] == 0

    def test_binary_always_valid(self):
        mask = valid_mask(make_feature([-1e11, 0.0, np.pi / 2]))
        assert np.all(mask[list(BINARY_IDS)] == 1)

    @given(finite_vectors)
    def test_guarded_unaries_stay_finite(self, v):
        f = make_feature(v)
        mask = valid_mask(f)
        for name in ("sqrt", "log", "exp", "tan"):
            op_id = OP_INDEX[name]
            if mask[op_id]:
                out = apply_unary(op_id, f)
                assert np.all(np.isfinite(out.values))
                assert out.hygiene_report["nan"] == 0
                assert out.hygiene_report["inf"] == 0


class TestApply:
    def test_square(self):
        out = apply_unary(OP_INDEX["square"], make_feature([1, 2, 3]))
        assert np.array_equal(out.values, [1, 4, 9])
        assert out.name == "square(a)"

    def test_minmax(self):
        out = apply_unary(OP_INDEX["minmax_scale"], make_feature([2, 4, 6]))
        assert np.allclose(out.values, [0, 0.5, 1])

    def test_sigmoid_at_zero(self):
        out = apply_unary(OP_INDEX["sigmoid"], make_feature([0.0, 1.0, -1.0]))
        assert out.values[0] == 0.5

    def test_quantile_transform_ranks(self):
        out = apply_unary(OP_INDEX["quantile_transform"], make_feature([5, 1, 3]))
        assert np.allclose(out.values, [1.0, 0.0, 0.5])

    def test_mask_violation_raises(self):
        with pytest.raises(RuntimeError, match="mask violation"):
            apply_unary(OP_INDEX["sqrt"], make_feature([-1.0, 1.0]))

    def test_mul_name_and_values(self):
        f1 = make_feature([1, 2], "a", 0)
        f2 = make_feature([3, 4], "b", 1)
        out = apply_binary(OP_INDEX["mul"], f1, f2)
        assert np.array_equal(out.values, [3, 8])
        assert out.name == "[a]*[b]"

    def test_self_subtraction_is_zero(self):
        f = make_feature([1.5, -2.0, 7.0])
        out = apply_binary(OP_INDEX["sub"], f, f)
        assert np.all(out.values == 0)

    def test_div_guard(self):
        f1 = make_feature([1, 2], "a", 0)
        f2 = make_feature([0, 2], "b", 1)
        out = apply_binary(OP_INDEX["div"], f1, f2)
        assert np.array_equal(out.values, [0, 1])
        assert out.hygiene_report["div_guard"] == 1


class TestPool:
    def _dataset(self):
        return make_multiplicative_dataset(n=60, n_features=3, seed=5)

    def test_init_pool_identity(self):
        ds = self._dataset()
        pool = init_pool(ds)
        assert pool.size == ds.n_features
        assert pool.names == list(ds.feature_names)
        assert all("var" in f.provenance for f in pool.features)
        assert np.array_equal(pool.matrix(), ds.features)

    def test_duplicate_rejected(self):
        pool = init_pool(self._dataset())
        f = apply_binary(OP_INDEX["mul"], pool.features[0], pool.features[1])
        assert pool.add(f)
        again = apply_binary(OP_INDEX["mul"], pool.features[0], pool.features[1])
        assert not pool.add(again)

    def test_commutative_swap_is_duplicate(self):
        pool = init_pool(self._dataset())
        ab = apply_binary(OP_INDEX["mul"], pool.features[0], pool.features[1])
        ba = apply_binary(OP_INDEX["mul"], pool.features[1], pool.features[0])
        assert np.array_equal(ab.values, ba.values)
        assert canonical_key(ab.provenance) == canonical_key(ba.provenance)
        assert pool.add(ab)
        assert not pool.add(ba)

    def test_constant_rejected(self):
        pool = init_pool(self._dataset())
        f = apply_binary(OP_INDEX["sub"], pool.features[0], pool.features[0])
        assert not pool.add(f)
        assert pool.size == 3

    def test_near_collinear_rejected(self):
        pool = init_pool(self._dataset())
        shifted = Feature(values=pool.features[0].values * 2.0 + 1.0,
                          name="copyish", provenance=leaf(9, "copyish"))
        assert not pool.add(shifted)

    def test_append_grows_by_one(self):
        pool = init_pool(self._dataset())
        size = pool.size
        f = apply_unary(OP_INDEX["square"], pool.features[0])
        assert pool.add(f)
        assert pool.size == size + 1

    def test_keys_stay_unique(self):
        pool = init_pool(self._dataset())
        rng = np.random.default_rng(0)
        for _ in range(25):
            i, j = rng.integers(pool.size, size=2)
            op = int(rng.choice(BINARY_IDS))
            pool.add(apply_binary(op, pool.features[i], pool.features[j]))
        keys = [f.key for f in pool.features]
        assert len(keys) == len(set(keys))

    def test_cap_evicts_generated_not_original(self):
        ds = self._dataset()
        pool = init_pool(ds, max_size=5)
        rng = np.random.default_rng(1)
        added = 0
        for _ in range(40):
            i, j = rng.integers(3, size=2)
            op = int(rng.choice([OP_INDEX["add"], OP_INDEX["mul"]]))
            if pool.add(apply_binary(op, pool.features[i], pool.features[j])):
                added += 1
        assert pool.size <= 5
        assert pool.names[:3] == list(ds.feature_names)
        assert added >= 3


class TestProvenance:
    def test_parse_round_trip(self):
        originals = ("a", "b", "c")
        f_a = make_feature([1, 2, 3], "a", 0)
        f_b = make_feature([4, 5, 6], "b", 1)
        nested = apply_binary(OP_INDEX["div"],
                              apply_unary(OP_INDEX["sin"], f_a),
                              apply_binary(OP_INDEX["add"], f_b, f_a))
        tree = parse_name(nested.name, originals)
        assert canonical_key(tree) == canonical_key(nested.provenance)

    def test_parse_leaf_first(self):
        # an original column whose name looks like an expression stays a leaf
        originals = ("sin(a)", "b")
        tree = parse_name("sin(a)", originals)
        assert tree == leaf(0, "sin(a)")

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError, match="cannot parse"):
            parse_name("nonsense!!", ("a", "b"))

    def test_evaluate_tree_matches_incremental(self):
        ds = make_multiplicative_dataset(n=50, n_features=4, seed=8)
        pool = init_pool(ds)
        f = apply_binary(OP_INDEX["mul"], pool.features[0], pool.features[1])
        g = apply_unary(OP_INDEX["sigmoid"], f)
        assert np.array_equal(evaluate_tree(g.provenance, ds.features), g.values)

    def test_pool_export(self, tmp_path):
        ds = make_multiplicative_dataset(n=50, n_features=3, seed=8)
        pool = init_pool(ds)
        pool.add(apply_binary(OP_INDEX["mul"], pool.features[0], pool.features[1]))
        from haft.features import pool_to_csv, provenance_to_json
        import json
        import pandas as pd

        pool_to_csv(pool, tmp_path / "pool.csv")
        provenance_to_json(pool, tmp_path / "prov.json")
        frame = pd.read_csv(tmp_path / "pool.csv")
        assert list(frame.columns) == pool.names
        trees = json.loads((tmp_path / "prov.json").read_text())
        assert set(trees) == set(pool.names)
