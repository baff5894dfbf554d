import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpall.errors import DimensionError, DomainError
from fedpall.neural import MlpSpec, forward_mlp, init_mlp, make_rng
from fedpall.prototypes import (MixConfig, MixedFeatureRecord, PrototypeSet, aggregate_global_prototypes,
                                bernoulli_mask, build_upload_sets, compute_local_prototypes, decode_records,
                                encode_records, mix_with_prototype, sample_mix_coefficient)


def grouped_means(features, labels, k):
    """Brute-force oracle: python-level grouping."""
    groups = {c: [] for c in range(k)}
    for f, y in zip(features, labels):
        groups[int(y)].append(f)
    means = np.zeros((k, features.shape[1]))
    for c, rows in groups.items():
        if rows:
            means[c] = np.sum(rows, axis=0) / len(rows)
    return means, np.array([len(groups[c]) for c in range(k)])


class TestLocalPrototypes:
    def test_one_sample_per_class(self, rng):
        f = rng.normal(size=(3, 4))
        ps = compute_local_prototypes(f, [2, 0, 1], 3)
        np.testing.assert_array_equal(ps.prototypes, f[[1, 2, 0]])
        np.testing.assert_array_equal(ps.counts, [1, 1, 1])

    def test_mean(self):
        ps = compute_local_prototypes(np.array([[0.0, 0.0], [2.0, 2.0]]), [0, 0], 2)
        np.testing.assert_array_equal(ps.prototypes[0], [1.0, 1.0])
        assert ps.counts[0] == 2
        np.testing.assert_array_equal(ps.prototypes[1], [0.0, 0.0])
        assert ps.counts[1] == 0

    def test_against_grouping_oracle(self, rng):
        f = rng.normal(size=(50, 8))
        y = rng.integers(0, 5, size=50)
        ps = compute_local_prototypes(f, y, 5)
        means, counts = grouped_means(f, y, 5)
        np.testing.assert_allclose(ps.prototypes, means, atol=1e-12)
        np.testing.assert_array_equal(ps.counts, counts)

    def test_empty(self):
        ps = compute_local_prototypes(np.zeros((0, 3)), np.zeros(0, dtype=int), 4)
        assert ps.prototypes.shape == (4, 3) and np.all(ps.prototypes == 0) and np.all(ps.counts == 0)

    def test_duplication(self, rng):
        f = rng.normal(size=(20, 3))
        y = rng.integers(0, 4, size=20)
        a = compute_local_prototypes(f, y, 4)
        b = compute_local_prototypes(np.vstack([f, f]), np.concatenate([y, y]), 4)
        np.testing.assert_allclose(b.prototypes, a.prototypes, atol=1e-12)
        np.testing.assert_array_equal(b.counts, 2 * a.counts)


class TestAggregation:
    def test_single_client(self, rng):
        ps = PrototypeSet(rng.normal(size=(3, 2)), [4, 5, 6])
        g = aggregate_global_prototypes([ps])
        np.testing.assert_allclose(g.prototypes, ps.prototypes, atol=1e-15)
        np.testing.assert_array_equal(g.counts, ps.counts)

    def test_count_weighting(self):
        a = PrototypeSet(np.array([[0.0]]), [1])
        b = PrototypeSet(np.array([[4.0]]), [3])
        g = aggregate_global_prototypes([a, b])
        assert g.prototypes[0, 0] == pytest.approx(3.0, abs=1e-15)
        assert g.counts[0] == 4

    def test_absent_class_is_zero(self):
        a = PrototypeSet(np.array([[1.0], [0.0]]), [2, 0])
        b = PrototypeSet(np.array([[3.0], [0.0]]), [2, 0])
        g = aggregate_global_prototypes([a, b])
        assert g.prototypes[1, 0] == 0.0 and g.counts[1] == 0

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            aggregate_global_prototypes([PrototypeSet(np.zeros((2, 3)), [1, 1]),
                                         PrototypeSet(np.zeros((2, 4)), [1, 1])])

    @pytest.mark.parametrize("seed", range(5))
    def test_pooled_oracle(self, seed):
        r = np.random.default_rng(seed)
        g_net = init_mlp(MlpSpec((6, 10, 4)), make_rng(seed))
        x = r.normal(size=(120, 6))
        y = r.integers(0, 3, size=120)
        parts = np.array_split(r.permutation(120), 4)
        local = [compute_local_prototypes(forward_mlp(g_net, x[p])[0], y[p], 3) for p in parts]
        pooled = compute_local_prototypes(forward_mlp(g_net, x)[0], y, 3)
        g = aggregate_global_prototypes(local)
        np.testing.assert_allclose(g.prototypes, pooled.prototypes, atol=1e-12)
        np.testing.assert_array_equal(g.counts, pooled.counts)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        sets = [PrototypeSet(r.normal(size=(3, 2)), r.integers(0, 5, size=3)) for _ in range(4)]
        a = aggregate_global_prototypes(sets)
        b = aggregate_global_prototypes([sets[i] for i in r.permutation(4)])
        np.testing.assert_allclose(a.prototypes, b.prototypes, atol=1e-12)
        np.testing.assert_array_equal(a.counts, b.counts)


class TestMixing:
    def test_degenerate_interval(self, rng):
        cfg = MixConfig(0.7, 0.7)
        assert all(sample_mix_coefficient(rng, cfg) == 0.7 for _ in range(10))

    def test_monte_carlo_mean(self):
        a = sample_mix_coefficient(make_rng(0), MixConfig(0.5, 1.0), size=100_000)
        assert a.mean() == pytest.approx(0.75, abs=0.01)
        assert a.min() >= 0.5 and a.max() <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0, 1), st.floats(0, 1))
    def test_bounds(self, seed, lo, hi):
        lo, hi = min(lo, hi), max(lo, hi)
        a = sample_mix_coefficient(make_rng(seed), MixConfig(lo, hi), size=50)
        assert np.all((a >= lo) & (a <= hi))

    def test_alpha_extremes(self):
        z, g = np.array([2.0, -1.0]), np.array([0.5, 3.0])
        np.testing.assert_array_equal(mix_with_prototype(z, g, 1.0), z)
        np.testing.assert_array_equal(mix_with_prototype(z, g, 0.0), g)

    def test_arithmetic(self):
        np.testing.assert_array_equal(mix_with_prototype(np.array([2.0, 0.0]), np.array([0.0, 2.0]), 0.5), [1.0, 1.0])

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            mix_with_prototype(np.ones(2), np.ones(3), 0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_convexity(self, seed, alpha):
        r = np.random.default_rng(seed)
        z, g = r.normal(size=6), r.normal(size=6)
        m = mix_with_prototype(z, g, alpha)
        lo, hi = np.minimum(z, g), np.maximum(z, g)
        assert np.all(m >= lo - 1e-12) and np.all(m <= hi + 1e-12)


class TestMask:
    def test_beta_one(self, rng):
        r = rng.normal(size=10)
        np.testing.assert_array_equal(bernoulli_mask(r, 1.0, rng), r)

    def test_beta_zero(self, rng):
        assert np.all(bernoulli_mask(rng.normal(size=10), 0.0, rng) == 0)

    def test_retained_fraction(self):
        r = make_rng(3)
        counts = [np.count_nonzero(bernoulli_mask(np.ones(1000), 0.8, r)) for _ in range(100)]
        assert all(740 <= c <= 860 for c in counts)
        assert np.mean(counts) == pytest.approx(800, abs=15)

    def test_fresh_mask_per_row(self):
        m = bernoulli_mask(np.ones((2, 200)), 0.5, make_rng(0))
        assert not np.array_equal(m[0], m[1])

    def test_mask_then_mix_beta_one_equals_mix(self, rng):
        z, g = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_array_equal(bernoulli_mask(mix_with_prototype(z, g, 0.3), 1.0, rng),
                                      mix_with_prototype(z, g, 0.3))

    def test_idempotent_for_fixed_mask(self, rng):
        r = rng.normal(size=30)
        keep = rng.random(30) < 0.6
        once = np.where(keep, r, 0.0)
        np.testing.assert_array_equal(np.where(keep, once, 0.0), once)


class TestUploads:
    def _protos(self, k=3, d=4):
        return PrototypeSet(np.arange(k * d, dtype=float).reshape(k, d) + 1, np.full(k, 5))

    def test_privacy_off_mode(self, rng):
        f = rng.normal(size=(6, 4))
        y = np.array([0, 1, 2, 0, 1, 2])
        recs = build_upload_sets(f, y, self._protos(), 2, MixConfig(1.0, 1.0, 1.0), rng)
        np.testing.assert_array_equal(np.array([r.feature for r in recs]), f)
        assert all(r.client_id == 2 for r in recs)

    def test_pure_prototype_mode(self, rng):
        f = rng.normal(size=(6, 4))
        y = np.array([0, 1, 2, 0, 1, 2])
        protos = self._protos()
        recs = build_upload_sets(f, y, protos, 0, MixConfig(0.0, 0.0, 1.0), rng)
        for rec in recs:
            np.testing.assert_array_equal(rec.feature, protos.prototypes[rec.label])

    def test_cardinality_and_labels(self, rng):
        f = rng.normal(size=(100, 4))
        y = rng.integers(0, 3, size=100)
        recs = build_upload_sets(f, y, self._protos(), 1, MixConfig(), rng)
        assert len(recs) == 100
        assert sorted(r.label for r in recs) == sorted(y.tolist())

    def test_raw_features_never_uploaded(self, rng):
        f = rng.normal(size=(50, 4))
        y = rng.integers(0, 3, size=50)
        recs = build_upload_sets(f, y, self._protos(), 1, MixConfig(0.2, 0.9, 0.8), rng)
        assert not any(np.array_equal(r.feature, row) for r, row in zip(recs, f))

    def test_zero_count_prototype_rejected(self, rng):
        protos = PrototypeSet(np.ones((2, 4)), [3, 0])
        with pytest.raises(DomainError):
            build_upload_sets(rng.normal(size=(2, 4)), [0, 1], protos, 0, MixConfig(), rng)


class TestWireFormat:
    def test_round_trip(self, rng):
        recs = [MixedFeatureRecord(rng.normal(size=5), int(rng.integers(0, 4)), int(rng.integers(0, 3)))
                for _ in range(7)]
        back = decode_records(encode_records(recs))
        assert len(back) == 7
        for a, b in zip(recs, back):
            assert a.label == b.label and a.client_id == b.client_id
            assert a.feature.tobytes() == b.feature.tobytes()

    def test_layout(self):
        blob = encode_records([MixedFeatureRecord(np.array([1.5, -2.0]), 3, 1)])
        assert len(blob) == 4 + 2 + 2 + 4 + 16
        assert int.from_bytes(blob[:4], "little") == 24
        assert int.from_bytes(blob[4:6], "little") == 1
        assert int.from_bytes(blob[6:8], "little") == 3
        assert int.from_bytes(blob[8:12], "little") == 2
        np.testing.assert_array_equal(np.frombuffer(blob[12:], "<f8"), [1.5, -2.0])

    def test_truncated(self):
        blob = encode_records([MixedFeatureRecord(np.ones(3), 0, 0)])
        with pytest.raises(ValueError):
            decode_records(blob[:-1])
