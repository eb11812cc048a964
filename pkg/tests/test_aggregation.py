import numpy as np
import pytest

from cadis.aggregation import aggregate, cadis_weights, fedavg_weights
from cadis.nn import ModelParams, NetworkShape, init_params
from cadis.similarity import ClusterAssignment


def assignment(labels):
    return ClusterAssignment(round=0, labels=np.asarray(labels))


class TestFedavgWeights:
    def test_equal_counts_uniform(self):
        w = fedavg_weights({0: 5, 1: 5, 2: 5, 3: 5})
        assert all(v == pytest.approx(0.25) for v in w.values())

    def test_proportional(self):
        w = fedavg_weights({0: 1, 1: 3})
        assert w[0] == pytest.approx(0.25)
        assert w[1] == pytest.approx(0.75)

    def test_single_participant(self):
        assert fedavg_weights({7: 123}) == {7: 1.0}

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fedavg_weights({})


class TestCadisWeights:
    def test_pair_cluster_plus_singleton(self):
        # {A,B} share a cluster, C is alone, equal counts: (1/4, 1/4, 1/2).
        a = assignment([0, 0, 1])
        w = cadis_weights(a, {0: 10, 1: 10, 2: 10})
        assert w[0] == pytest.approx(0.25)
        assert w[1] == pytest.approx(0.25)
        assert w[2] == pytest.approx(0.5)

    def test_single_cluster_cancels_to_uniform(self):
        a = assignment([0, 0, 0, 0])
        w = cadis_weights(a, {i: 9 for i in range(4)})
        assert all(v == pytest.approx(0.25) for v in w.values())

    def test_singletons_reduce_to_fedavg_exactly(self):
        a = assignment([0, 1])
        counts = {0: 100, 1: 300}
        assert cadis_weights(a, counts) == fedavg_weights(counts)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            labels = rng.integers(0, 4, size=n)
            counts = {i: int(rng.integers(1, 500)) for i in range(n)}
            w = cadis_weights(assignment(labels), counts)
            assert sum(w.values()) == pytest.approx(1.0, abs=1e-12)
            assert all(v >= 0 for v in w.values())

    def test_scale_invariance(self):
        a = assignment([0, 0, 1, 2])
        counts = {0: 3, 1: 5, 2: 11, 3: 2}
        scaled = {k: v * 37 for k, v in counts.items()}
        w1 = cadis_weights(a, counts)
        w2 = cadis_weights(a, scaled)
        for k in counts:
            assert w1[k] == pytest.approx(w2[k], abs=1e-12)

    def test_cluster_balance_property(self):
        # Equal sample counts: every cluster's total weight is equal.
        labels = [0] * 5 + [1] * 2 + [2] * 1
        a = assignment(labels)
        w = cadis_weights(a, {i: 7 for i in range(8)})
        totals = {}
        for i, c in enumerate(labels):
            totals[c] = totals.get(c, 0.0) + w[i]
        vals = list(totals.values())
        assert all(v == pytest.approx(vals[0], abs=1e-12) for v in vals)

    def test_participant_counting_vs_all_members(self):
        # Cluster 0 has 3 members overall but only 1 participating.
        a = assignment([0, 0, 0, 1])
        counts = {0: 10, 3: 10}
        by_participants = cadis_weights(a, counts)
        assert by_participants[0] == pytest.approx(0.5)
        by_members = cadis_weights(a, counts, count_all_members=True)
        assert by_members[0] == pytest.approx((10 / 3) / (10 / 3 + 10))

    def test_normalization_makes_total_count_immaterial(self):
        # Dividing by any fixed total N before normalizing gives the same
        # weights; the implementation skips that division.
        a = assignment([0, 0, 1])
        counts = {0: 8, 1: 24, 2: 10}
        w = cadis_weights(a, counts)
        for total in (42.0, 1000.0):
            raw = {p: (counts[p] / total) / m for p, m in ((0, 2), (1, 2), (2, 1))}
            norm = sum(raw.values())
            for p in counts:
                assert w[p] == pytest.approx(raw[p] / norm, rel=1e-12)


class TestAggregate:
    def test_identical_models_fixed_point(self, rng):
        shape = NetworkShape(3, (4,), 2, 3)
        m = init_params(shape, rng)
        out = aggregate([m, m.copy(), m.copy()], [0.2, 0.3, 0.5])
        assert np.allclose(out.vector, m.vector, atol=1e-15)

    def test_two_scalarish_models(self):
        shape = NetworkShape(1, (), 1, 2)
        a = ModelParams(shape, np.array([0.0, 0.0, 0.0, 0.0]))
        b = ModelParams(shape, np.array([1.0, 1.0, 1.0, 1.0]))
        out = aggregate([a, b], [0.25, 0.75])
        assert np.allclose(out.vector, 0.75)

    def test_one_hot_weights_select_model(self, rng):
        shape = NetworkShape(2, (), 2, 2)
        models = [init_params(shape, rng) for _ in range(3)]
        out = aggregate(models, [0.0, 1.0, 0.0])
        assert np.array_equal(out.vector, models[1].vector)

    def test_convex_envelope(self, rng):
        shape = NetworkShape(3, (3,), 2, 2)
        models = [init_params(shape, rng) for _ in range(4)]
        raw = rng.uniform(0, 1, 4)
        weights = (raw / raw.sum()).tolist()
        out = aggregate(models, weights)
        stack = np.stack([m.vector for m in models])
        assert (out.vector >= stack.min(axis=0) - 1e-12).all()
        assert (out.vector <= stack.max(axis=0) + 1e-12).all()

    def test_mismatched_shapes_rejected(self, rng):
        a = init_params(NetworkShape(2, (), 2, 2), rng)
        b = init_params(NetworkShape(3, (), 2, 2), rng)
        with pytest.raises(ValueError):
            aggregate([a, b], [0.5, 0.5])

    def test_weight_count_mismatch_rejected(self, rng):
        a = init_params(NetworkShape(2, (), 2, 2), rng)
        with pytest.raises(ValueError):
            aggregate([a], [0.5, 0.5])
