import math

import numpy as np
import pytest

from fedpoison import aggregation as agg
from fedpoison.aggregation import AggregatorSpec
from fedpoison.errors import ConfigError, ContractError

V = lambda *xs: np.array(xs, dtype=float)


# ---------------------------------------------------------------- oracles


def oracle_median(updates):
    """Per-coordinate sort-based median, written independently of numpy.median."""
    stack = np.stack(updates)
    out = np.empty(stack.shape[1])
    for j in range(stack.shape[1]):
        col = sorted(stack[:, j].tolist())
        n = len(col)
        if n % 2 == 1:
            out[j] = col[n // 2]
        else:
            out[j] = 0.5 * (col[n // 2 - 1] + col[n // 2])
    return out


def oracle_trimmed_mean(updates, beta):
    stack = np.stack(updates)
    out = np.empty(stack.shape[1])
    for j in range(stack.shape[1]):
        col = sorted(stack[:, j].tolist())
        keep = col[beta : len(col) - beta] if beta else col
        out[j] = sum(keep) / len(keep)
    return out


def oracle_krum_scores(updates, members, n_neighbors):
    scores = []
    for i in members:
        dists = sorted(
            sum((a - b) ** 2 for a, b in zip(updates[i], updates[j]))
            for j in members
            if j != i
        )
        scores.append(sum(dists[:n_neighbors]))
    return scores


def oracle_krum_winner(updates, m):
    members = list(range(len(updates)))
    scores = oracle_krum_scores(updates, members, len(updates) - m - 2)
    return members[scores.index(min(scores))]


def oracle_iterative_selection(updates, m, count):
    """From-scratch mirror of the shrinking-pool Krum selection."""
    remaining = list(range(len(updates)))
    chosen = []
    for _ in range(count):
        n_neighbors = max(0, min(len(remaining) - m - 2, len(remaining) - 1))
        scores = oracle_krum_scores(updates, remaining, n_neighbors)
        winner = remaining[scores.index(min(scores))]
        chosen.append(winner)
        remaining.remove(winner)
    return chosen


def oracle_faba_survivors(updates, m):
    remaining = list(range(len(updates)))
    for _ in range(m):
        center = np.mean([updates[i] for i in remaining], axis=0)
        dists = [float(np.linalg.norm(updates[i] - center)) for i in remaining]
        remaining.pop(dists.index(max(dists)))
    return remaining


def random_updates(rng, n=None, d=None):
    n = n or int(rng.integers(3, 13))
    d = d or int(rng.integers(2, 8))
    return [rng.normal(size=d) for _ in range(n)]


# ---------------------------------------------------------------- fedavg


class TestFedavg:
    def test_mean(self):
        out = agg.fedavg([V(0), V(2)])
        np.testing.assert_allclose(out.update, V(1))
        assert out.kept == (0, 1)

    def test_single_identity(self):
        out = agg.fedavg([V(3, -1)])
        np.testing.assert_allclose(out.update, V(3, -1))

    def test_idempotence(self):
        v = V(1.5, 2.5)
        out = agg.fedavg([v.copy() for _ in range(7)])
        np.testing.assert_allclose(out.update, v)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            agg.fedavg([])


# ---------------------------------------------------------------- krum family


class TestKrum:
    def test_tie_broken_by_index(self):
        updates = [V(0, 0), V(0.1, 0), V(0, 0.1), V(10, 10)]
        out = agg.krum(updates, m=1)
        assert out.kept == (0,)
        assert out.kept[0] == oracle_krum_winner(updates, 1)

    def test_identical_updates(self):
        out = agg.krum([V(1, 1)] * 5, m=1)
        assert out.kept == (0,)

    def test_outlier_never_selected(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            updates = [rng.normal(size=4) * 0.1 for _ in range(4)]
            updates.insert(int(rng.integers(0, 5)), rng.normal(size=4) + 50.0)
            out = agg.krum(updates, m=1)
            outlier = max(range(5), key=lambda i: np.linalg.norm(updates[i]))
            assert out.kept[0] != outlier
            assert out.kept[0] == oracle_krum_winner(updates, 1)

    def test_precondition(self):
        with pytest.raises(ConfigError):
            agg.krum([V(1), V(2), V(3)], m=1)


class TestMkrum:
    def test_size_one_equals_krum(self):
        rng = np.random.default_rng(1)
        updates = random_updates(rng, n=6)
        out = agg.mkrum(updates, m=1, selection_size=1)
        assert out.kept == agg.krum(updates, m=1).kept

    def test_full_selection_equals_fedavg(self):
        rng = np.random.default_rng(2)
        updates = random_updates(rng, n=5)
        out = agg.mkrum(updates, m=0, selection_size=5)
        np.testing.assert_allclose(out.update, agg.fedavg(updates).update)

    def test_outlier_excluded(self):
        rng = np.random.default_rng(3)
        updates = [rng.normal(size=3) * 0.2 for _ in range(5)] + [np.full(3, 40.0)]
        out = agg.mkrum(updates, m=1, selection_size=4)
        assert 5 not in out.kept
        assert sorted(out.kept) == sorted(oracle_iterative_selection(updates, 1, 4))

    def test_selection_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            updates = random_updates(rng, n=int(rng.integers(4, 10)))
            m = int(rng.integers(0, max(1, len(updates) - 3)))
            size = int(rng.integers(1, len(updates) + 1))
            out = agg.mkrum(updates, m=m, selection_size=size)
            assert sorted(out.kept) == sorted(oracle_iterative_selection(updates, m, size))

    def test_oversized_selection_rejected(self):
        with pytest.raises(ConfigError):
            agg.mkrum([V(1), V(2), V(3), V(4)], m=0, selection_size=5)


class TestBulyan:
    def test_degenerate_is_fedavg(self):
        rng = np.random.default_rng(5)
        updates = random_updates(rng, n=5)
        out = agg.bulyan(updates, m=0, gamma=5)
        np.testing.assert_allclose(out.update, agg.fedavg(updates).update)

    def test_outlier_excluded(self):
        rng = np.random.default_rng(6)
        updates = [rng.normal(size=4) * 0.3 for _ in range(6)] + [np.full(4, 1e3)]
        out = agg.bulyan(updates, m=1)
        assert 6 not in out.kept
        assert sorted(out.kept) == sorted(oracle_iterative_selection(updates, 1, 5))

    def test_coordinate_containment(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            updates = random_updates(rng, n=8)
            out = agg.bulyan(updates, m=1)
            sel = np.stack([updates[i] for i in out.kept])
            assert (out.update >= sel.min(axis=0) - 1e-12).all()
            assert (out.update <= sel.max(axis=0) + 1e-12).all()

    def test_feasibility(self):
        with pytest.raises(ConfigError):
            agg.bulyan([V(1)] * 6, m=1)


# ---------------------------------------------------------------- coordinatewise


class TestMedian:
    def test_odd(self):
        out = agg.coordinate_median([V(1, 5), V(2, 3), V(9, 1)])
        np.testing.assert_allclose(out.update, V(2, 3))

    def test_even_count_rule(self):
        out = agg.coordinate_median([V(0), V(10)])
        np.testing.assert_allclose(out.update, V(5))

    def test_matches_sorting_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            updates = random_updates(rng)
            out = agg.coordinate_median(updates)
            np.testing.assert_allclose(out.update, oracle_median(updates), atol=1e-12)


class TestTrimmedMean:
    def test_basic(self):
        out = agg.trimmed_mean([V(1), V(2), V(9)], beta=1)
        np.testing.assert_allclose(out.update, V(2))

    def test_beta_zero_is_fedavg(self):
        updates = [V(1, 2), V(3, 4), V(5, 0)]
        np.testing.assert_allclose(
            agg.trimmed_mean(updates, 0).update, agg.fedavg(updates).update
        )

    def test_matches_sorting_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            updates = random_updates(rng, n=int(rng.integers(3, 15)))
            beta = int(rng.integers(0, (len(updates) - 1) // 2 + 1))
            out = agg.trimmed_mean(updates, beta)
            np.testing.assert_allclose(
                out.update, oracle_trimmed_mean(updates, beta), atol=1e-12
            )

    def test_infeasible(self):
        with pytest.raises(ConfigError):
            agg.trimmed_mean([V(1), V(2)], beta=1)


# ---------------------------------------------------------------- clipping rules


class TestNormBounding:
    def test_rule_arithmetic(self):
        updates = [V(1, 0), V(0, 1), V(4, 0)]
        out = agg.norm_bounding(updates)
        # M = 2; third scaled to norm 2, first two untouched
        expected = (V(1, 0) + V(0, 1) + V(2, 0)) / 3
        np.testing.assert_allclose(out.update, expected)

    def test_equal_norms_is_fedavg(self):
        updates = [V(3, 0), V(0, 3), V(-3, 0)]
        np.testing.assert_allclose(
            agg.norm_bounding(updates).update, agg.fedavg(updates).update
        )

    def test_clip_postcondition_fuzzed(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            updates = random_updates(rng)
            norms = [np.linalg.norm(u) for u in updates]
            bound = np.mean(norms)
            stack = np.stack(updates)
            scale = np.where(
                np.array(norms) > bound, bound / np.maximum(norms, 1e-300), 1.0
            )
            clipped = stack * scale[:, None]
            assert (np.linalg.norm(clipped, axis=1) <= bound * (1 + 1e-12)).all()
            np.testing.assert_allclose(
                agg.norm_bounding(updates).update, clipped.mean(axis=0)
            )


class TestCenteredClip:
    def test_half_scaling(self):
        out = agg.centered_clip([V(2, 0)], iters=1, radius=1.0)
        np.testing.assert_allclose(out.update, V(1, 0))

    def test_inside_radius_is_fedavg(self):
        updates = [V(0.5, 0), V(0, 0.5), V(-0.5, 0)]
        out = agg.centered_clip(updates, iters=1, radius=100.0)
        np.testing.assert_allclose(out.update, agg.fedavg(updates).update)

    def test_displacement_bounded_fuzzed(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            updates = random_updates(rng)
            radius = float(rng.uniform(0.1, 2.0))
            v = np.zeros_like(updates[0])
            for _ in range(3):
                resid = np.stack(updates) - v
                dists = np.linalg.norm(resid, axis=1)
                factor = np.minimum(1.0, radius / np.maximum(dists, 1e-300))
                step = (factor[:, None] * resid).mean(axis=0)
                assert np.linalg.norm(step) <= radius * (1 + 1e-12)
                v = v + step
            out = agg.centered_clip(updates, iters=3, radius=radius)
            np.testing.assert_allclose(out.update, v)


# ---------------------------------------------------------------- filtering rules


class TestFaba:
    def test_m_zero_is_fedavg(self):
        updates = [V(1, 2), V(3, 4)]
        np.testing.assert_allclose(agg.faba(updates, 0).update, agg.fedavg(updates).update)

    def test_removes_outlier(self):
        out = agg.faba([V(0), V(0), V(100)], m=1)
        np.testing.assert_allclose(out.update, V(0))
        assert out.kept == (0, 1)

    def test_exact_tie_removes_lowest_index(self):
        # symmetric pair: distances to the mean tie exactly, index 0 goes
        out = agg.faba([V(0), V(2)], m=1)
        assert out.kept == (1,)

    def test_matches_stepwise_oracle(self):
        # m <= n-2 keeps the pool asymmetric, so random floats never tie
        rng = np.random.default_rng(12)
        for _ in range(50):
            updates = random_updates(rng)
            m = int(rng.integers(0, len(updates) - 1))
            out = agg.faba(updates, m)
            assert list(out.kept) == sorted(oracle_faba_survivors(updates, m))


class TestAfa:
    def test_all_equal_similarity(self):
        ref = V(1, 0)
        updates = [V(2, 0), V(3, 0), V(0.5, 0)]
        out = agg.afa(updates, ref)
        assert out.kept == (0, 1, 2)
        np.testing.assert_allclose(out.update, agg.fedavg(updates).update)

    def test_anti_aligned_removed(self):
        ref = V(1, 0)
        updates = [V(1, 0.01 * i) for i in range(9)] + [V(-1, 0)]
        out = agg.afa(updates, ref)
        assert 9 not in out.kept

    def test_zero_reference_is_noop(self):
        updates = [V(1, 2), V(-3, 4), V(0, -1)]
        out = agg.afa(updates, V(0, 0))
        assert out.kept == (0, 1, 2)

    def test_never_empties(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            updates = random_updates(rng)
            ref = rng.normal(size=updates[0].shape[0])
            out = agg.afa(updates, ref, threshold=float(rng.uniform(0.0, 1.0)))
            assert len(out.kept) >= 1


class TestDnc:
    def test_m_zero_is_fedavg(self):
        updates = [V(1, 2, 3), V(4, 5, 6)]
        np.testing.assert_allclose(agg.dnc(updates, 0).update, agg.fedavg(updates).update)

    def test_planted_direction_removed(self):
        rng = np.random.default_rng(14)
        spike = rng.normal(size=6)
        spike /= np.linalg.norm(spike)
        updates = [rng.normal(size=6) * 0.5 for _ in range(8)]
        updates += [20.0 * spike + rng.normal(size=6) * 0.1 for _ in range(2)]
        out = agg.dnc(updates, m=2, subsample_dim=6, seed=0)
        assert 8 not in out.kept and 9 not in out.kept
        assert len(out.kept) == 8

    def test_deterministic(self):
        rng = np.random.default_rng(15)
        updates = random_updates(rng, n=6, d=10)
        a = agg.dnc(updates, m=1, seed=42)
        b = agg.dnc(updates, m=1, seed=42)
        np.testing.assert_array_equal(a.update, b.update)
        assert a.kept == b.kept

    def test_removes_exactly_ceil(self):
        rng = np.random.default_rng(16)
        updates = random_updates(rng, n=10, d=8)
        out = agg.dnc(updates, m=2, filter_coeff=1.3, seed=1)
        assert len(out.kept) == 10 - math.ceil(1.3 * 2)

    def test_infeasible(self):
        with pytest.raises(ConfigError):
            agg.dnc([V(1, 2)] * 3, m=3)


# ---------------------------------------------------------------- cross-rule properties


ALL_SPECS = [
    AggregatorSpec("fedavg"),
    AggregatorSpec("krum", {"m": 1}),
    AggregatorSpec("mkrum", {"m": 1}),
    AggregatorSpec("median"),
    AggregatorSpec("trmean", {"beta": 1}),
    AggregatorSpec("norm_bounding"),
    AggregatorSpec("bulyan", {"m": 1}),
    AggregatorSpec("faba", {"m": 1}),
    AggregatorSpec("afa"),
    AggregatorSpec("cc", {"radius": 100.0}),
    AggregatorSpec("dnc", {"m": 1}),
]


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.rule)
def test_identical_inputs_fixed_point(spec):
    v = V(0.3, -1.2, 0.7)
    updates = [v.copy() for _ in range(8)]
    out = agg.aggregate(spec, updates, prev_global_update=V(1.0, 0, 0), seed=0)
    np.testing.assert_allclose(out.update, v, atol=1e-12)
    assert np.isfinite(out.update).all()


# mkrum/bulyan selection sizes keep the shrinking pool's neighbor count >= 2:
# at counts 0 and 1 scores tie structurally (mutual nearest neighbors share a
# distance), so order would legitimately matter there
PERMUTATION_SPECS = [
    s
    for s in ALL_SPECS
    if s.rule not in ("mkrum", "bulyan")
] + [
    AggregatorSpec("mkrum", {"m": 1, "selection_size": 4}),
    AggregatorSpec("bulyan", {"m": 1, "gamma": 4}),
]


@pytest.mark.parametrize("spec", PERMUTATION_SPECS, ids=lambda s: s.rule)
def test_permutation_invariance(spec):
    rng = np.random.default_rng(17)
    updates = [rng.normal(size=4) for _ in range(8)]
    ref = rng.normal(size=4)
    base = agg.aggregate(spec, updates, prev_global_update=ref, seed=3)
    for trial in range(5):
        perm = np.random.default_rng(trial).permutation(8)
        permuted = [updates[i] for i in perm]
        out = agg.aggregate(spec, permuted, prev_global_update=ref, seed=3)
        np.testing.assert_allclose(out.update, base.update, atol=1e-9)


def test_validate_spec_catches_infeasible():
    with pytest.raises(ConfigError):
        agg.validate_spec(AggregatorSpec("krum", {"m": 5}), n_clients=6)
    with pytest.raises(ConfigError):
        agg.validate_spec(AggregatorSpec("trmean", {"beta": 3}), n_clients=6)
    with pytest.raises(ConfigError):
        agg.validate_spec(AggregatorSpec("bulyan", {"m": 2}), n_clients=8)
    agg.validate_spec(AggregatorSpec("mkrum", {"m": 2}), n_clients=10)
