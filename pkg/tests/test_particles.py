import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcmeld.particles import (
    DegenerateWeightsError,
    IndexMultiset,
    ResampleScheme,
    WeightedParticleSystem,
    back_left_update,
    back_right_update,
    ess,
    forward_update,
    resample,
)


def system(values, log_weights=None, labels=None):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] == 1 and values.shape[1] > 1 and log_weights is not None:
        values = values.T
    if log_weights is None:
        log_weights = np.zeros(values.shape[0])
    if labels is None:
        labels = tuple(f"x{j}" for j in range(values.shape[1]))
    return WeightedParticleSystem(values, log_weights, labels)


class TestEss:
    def test_uniform_weights(self):
        assert ess(np.zeros(4)) == pytest.approx(4.0)

    def test_point_mass(self):
        assert ess(np.array([0.0, -np.inf, -np.inf, -np.inf])) == pytest.approx(1.0)

    def test_half_mass(self):
        assert ess(np.array([np.log(0.5), np.log(0.5), -np.inf, -np.inf])) == pytest.approx(2.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateWeightsError):
            ess(np.full(3, -np.inf))

    @given(
        st.lists(st.floats(-5, 5), min_size=2, max_size=30),
        st.floats(-100, 100),
    )
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, lw, const):
        lw = np.asarray(lw)
        assert ess(lw + const) == pytest.approx(ess(lw), rel=1e-10)


class TestResample:
    def test_point_mass_weights(self):
        sys3 = system([[1.0], [2.0], [3.0]], np.array([0.0, -np.inf, -np.inf]))
        out, anc = resample(sys3, ResampleScheme("systematic"), np.random.default_rng(0))
        assert np.all(out.values == 1.0)
        assert list(anc.one_based) == [1, 1, 1]

    def test_systematic_uniform_is_permutation(self):
        sys6 = system(np.arange(6.0)[:, None])
        for seed in range(5):
            out, anc = resample(sys6, ResampleScheme("systematic"), np.random.default_rng(seed))
            assert sorted(anc.indices.tolist()) == list(range(6))

    def test_multinomial_frequency(self):
        lw = np.log([0.7, 0.1, 0.1, 0.1])
        rng = np.random.default_rng(42)
        sys4 = system(np.arange(4.0)[:, None], lw)
        hits = total = 0
        for _ in range(100_000):
            _, anc = resample(sys4, ResampleScheme("multinomial"), rng)
            hits += int((anc.indices == 0).sum())
            total += 4
        freq = hits / total
        assert freq == pytest.approx(0.7, abs=0.01)

    def test_resampled_values_match_ancestry(self):
        rng = np.random.default_rng(3)
        sysr = system(rng.normal(size=(40, 3)), rng.normal(size=40))
        out, anc = resample(sysr, ResampleScheme("systematic"), rng)
        np.testing.assert_array_equal(out.values, sysr.values[anc.indices])

    def test_degenerate_error(self):
        with pytest.raises(DegenerateWeightsError):
            WeightedParticleSystem(np.zeros((2, 1)), [-np.inf, -np.inf], ("a",))

    @pytest.mark.slow
    def test_unbiasedness(self):
        # Mean of (1/N) sum f(resampled) over repeats equals sum w_bar f.
        rng = np.random.default_rng(7)
        values = rng.normal(size=(12, 1))
        lw = rng.normal(size=12)
        sys12 = system(values, lw)
        w = sys12.normalized_weights()
        f = lambda x: np.sin(3 * x) + x**2
        expected = float(w @ f(values[:, 0]))
        reps = 10_000
        draws = np.empty(reps)
        for r in range(reps):
            out, _ = resample(sys12, ResampleScheme("multinomial"), rng)
            draws[r] = f(out.values[:, 0]).mean()
        se = draws.std(ddof=1) / np.sqrt(reps)
        assert abs(draws.mean() - expected) < 4 * se


class TestIndexAlgebra:
    def test_forward_identity(self):
        a = IndexMultiset.from_one_based([1, 2, 3], 3)
        b = IndexMultiset.from_one_based([7, 8, 9], 9)
        assert list(forward_update(a, b).one_based) == [7, 8, 9]

    def test_forward_examples(self):
        a = IndexMultiset.from_one_based([2, 2, 3], 3)
        b = IndexMultiset.from_one_based([7, 8, 9], 9)
        assert list(forward_update(a, b).one_based) == [8, 8, 9]
        a = IndexMultiset.from_one_based([3, 1, 1], 3)
        b = IndexMultiset.from_one_based([4, 5, 6], 6)
        assert list(forward_update(a, b).one_based) == [6, 4, 4]

    def test_forward_errors(self):
        a = IndexMultiset.from_one_based([1, 2], 2)
        b = IndexMultiset.from_one_based([1, 2, 3], 3)
        with pytest.raises(ValueError):
            forward_update(a, b)
        with pytest.raises(ValueError):
            IndexMultiset.from_one_based([0, 1], 3)
        with pytest.raises(ValueError):
            IndexMultiset.from_one_based([4], 3)

    @given(st.integers(2, 12), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_forward_associativity(self, n, seed):
        rng = np.random.default_rng(seed)
        a = IndexMultiset(rng.integers(0, n, n), n)
        b = IndexMultiset(rng.integers(0, n, n), n)
        c = IndexMultiset(rng.integers(0, n, n), n)
        left = forward_update(forward_update(a, b), c)
        right = forward_update(a, forward_update(b, c))
        np.testing.assert_array_equal(left.indices, right.indices)


class TestBackUpdates:
    def test_identity_chain_unchanged(self):
        n = 4
        sys1 = system(np.arange(4.0)[:, None])
        ident = IndexMultiset.identity(n)
        a1 = IndexMultiset.from_one_based([2, 1, 4, 3], n)
        systems, chain = back_left_update([a1, ident], [sys1])
        np.testing.assert_array_equal(chain[0].indices, a1.indices)
        np.testing.assert_array_equal(systems[0].values, sys1.values[a1.indices])

    def test_hand_trace_two_collections(self):
        # A1 = (2,1), A2 = (2,2): composition gives (1,1) and both system
        # rows become the original first row.
        sys1 = system([[10.0], [20.0]])
        a1 = IndexMultiset.from_one_based([2, 1], 2)
        a2 = IndexMultiset.from_one_based([2, 2], 2)
        systems, chain = back_left_update([a1, a2], [sys1])
        assert list(chain[0].one_based) == [1, 1]
        np.testing.assert_array_equal(systems[0].values, [[10.0], [10.0]])

    def test_three_stage_chain_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        n = 5
        chain = [IndexMultiset(rng.permutation(n), n) for _ in range(3)]
        systems = [system(rng.normal(size=(n, 2))) for _ in range(2)]
        out_systems, out_chain = back_left_update(chain, systems)
        # Brute force: explicit sequential gather over stored trajectories.
        c1 = chain[1].indices[chain[2].indices]
        c0 = chain[0].indices[c1]
        np.testing.assert_array_equal(out_chain[1].indices, c1)
        np.testing.assert_array_equal(out_chain[0].indices, c0)
        np.testing.assert_array_equal(out_systems[1].values, systems[1].values[c1])
        np.testing.assert_array_equal(out_systems[0].values, systems[0].values[c0])

    def test_back_right_mirror_symmetry(self):
        # Relabelling the submodel axis maps a leftward problem onto a
        # rightward one with identical list positions, so the outputs of
        # the two updates coincide elementwise.
        rng = np.random.default_rng(11)
        n = 6
        chain = [IndexMultiset(rng.integers(0, n, n), n) for _ in range(4)]
        systems = [system(rng.normal(size=(n, 1))) for _ in range(3)]
        left_sys, left_chain = back_left_update(chain, systems)
        right_sys, right_chain = back_right_update(chain, systems)
        for ls, rs in zip(left_sys, right_sys):
            np.testing.assert_array_equal(ls.values, rs.values)
        for lc, rc in zip(left_chain, right_chain):
            np.testing.assert_array_equal(lc.indices, rc.indices)

    def test_misaligned_lengths_error(self):
        n = 3
        chain = [IndexMultiset.identity(n), IndexMultiset.identity(n)]
        with pytest.raises(ValueError):
            back_left_update(chain, [])
        with pytest.raises(ValueError):
            back_left_update([IndexMultiset.identity(3)], [system(np.zeros((3, 1)))])


class TestSystemInvariants:
    def test_labels_unique(self):
        with pytest.raises(ValueError):
            WeightedParticleSystem(np.zeros((2, 2)), np.zeros(2), ("a", "a"))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            WeightedParticleSystem(np.zeros((2, 1)), np.zeros(3), ("a",))

    def test_single_minus_inf_allowed(self):
        sys2 = system([[1.0], [2.0]], [0.0, -np.inf])
        assert sys2.ess() == pytest.approx(1.0)

    def test_immutable(self):
        sys2 = system([[1.0], [2.0]])
        with pytest.raises(ValueError):
            sys2.values[0, 0] = 9.0


class TestSerialization:
    def test_csv_roundtrip(self):
        rng = np.random.default_rng(0)
        orig = system(rng.normal(size=(7, 3)), rng.normal(size=7), ("a", "b", "c"))
        buf = io.StringIO()
        orig.to_csv(buf)
        buf.seek(0)
        header = buf.readline().strip()
        assert header == "a,b,c,log_weight"
        buf.seek(0)
        back = WeightedParticleSystem.from_csv(buf)
        np.testing.assert_array_equal(back.values, orig.values)
        np.testing.assert_array_equal(back.log_weights, orig.log_weights)
        assert back.labels == orig.labels

    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        orig = system(rng.normal(size=(9, 2)), rng.normal(size=9), ("u", "v"))
        path = tmp_path / "dump.bin"
        orig.to_binary(path)
        back = WeightedParticleSystem.from_binary(path)
        np.testing.assert_array_equal(back.values, orig.values)
        np.testing.assert_array_equal(back.log_weights, orig.log_weights)
        assert back.labels == orig.labels

    def test_malformed_csv(self):
        with pytest.raises(ValueError):
            WeightedParticleSystem.from_csv(io.StringIO("a,b\n1,2\n"))
