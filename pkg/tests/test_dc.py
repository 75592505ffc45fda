import itertools

import numpy as np
import pytest

from dcmeld.dc import (
    MergeConfig,
    RunLedger,
    TaskRecord,
    dc_melding_3,
    dc_melding_multi,
    extended_merge,
    extended_merge_weights,
    extract_joint_samples,
    naive_merge,
    plan_stages,
)
from dcmeld.melding import decompose_pooled_prior
from dcmeld.models.gaussian_chain import (
    GaussianChainSpec,
    default_gaussian_chain,
    gaussian_chain_build,
    gaussian_chain_exact_posterior,
    gaussian_chain_exact_subposterior,
)
from dcmeld.particles import IndexMultiset, WeightedParticleSystem
from dcmeld.smc import MoveKernelConfig, SmcDiagnostics, TemperingSchedule

from oracles import eager_joint_reconstruction

SCHED = TemperingSchedule.adaptive(0.9)
KERNEL = MoveKernelConfig(n_mcmc_iters=5)


class TestStagePlan:
    def test_m3(self):
        plan = plan_stages(3)
        assert plan.case == "odd_4divMplus1" and plan.S == 2
        assert plan.stage_one_set == (1, 3)
        assert plan.stages[1].tasks[0].submodels == (2,)

    def test_m5(self):
        plan = plan_stages(5)
        assert plan.S == 3
        assert plan.stage_one_set == (1, 3, 5)
        assert plan.stages[1].tasks[0].submodels == (2,)
        assert plan.stages[2].tasks[0].submodels == (4,)

    def test_m7_pair_stage(self):
        plan = plan_stages(7)
        assert plan.S == 3
        assert plan.stages[1].pair == (2, 6)
        assert {t.submodels[0] for t in plan.stages[1].tasks} == {2, 6}
        assert plan.stages[2].tasks[0].submodels == (4,)

    def test_m6_joint_center(self):
        plan = plan_stages(6)
        assert plan.S == 3
        assert plan.stage_one_set == (1, 3, 6)
        assert plan.stages[1].tasks[0].submodels == (2,)
        final = plan.stages[2].tasks[0]
        assert final.submodels == (4, 5)
        assert final.fresh_blocks == (4,)
        assert final.merge_blocks == (3, 5)

    @pytest.mark.parametrize("M", range(3, 21))
    def test_partition_and_stage_count(self, M):
        plan = plan_stages(M)
        activated = plan.activated()
        assert sorted(activated) == list(range(1, M + 1))
        closed = {
            "odd_4divMplus1": (M + 5) // 4,
            "odd_4divMminus1": (M + 7) // 4,
            "even_4divM": (M + 4) // 4,
            "even_not4divM": (M + 6) // 4,
        }[plan.case]
        assert plan.S == closed

    def test_m_below_three_rejected(self):
        with pytest.raises(ValueError):
            plan_stages(2)


class TestNaiveMerge:
    def test_definition_n2(self):
        left = WeightedParticleSystem.equal_weights([[1.0], [2.0]], ("a",))
        right = WeightedParticleSystem.equal_weights([[10.0], [20.0]], ("b",))
        merged = naive_merge(left, right)
        np.testing.assert_array_equal(merged.values, [[1.0, 10.0], [2.0, 20.0]])
        assert merged.labels == ("a", "b")

    def test_empty_dimension_right(self):
        left = WeightedParticleSystem.equal_weights([[1.0], [2.0]], ("a",))
        right = WeightedParticleSystem.equal_weights(np.empty((2, 0)), ())
        merged = naive_merge(left, right)
        np.testing.assert_array_equal(merged.values, left.values)

    def test_independent_streams_uncorrelated(self):
        rng = np.random.default_rng(0)
        n = 100_000
        left = WeightedParticleSystem.equal_weights(rng.standard_normal((n, 1)), ("a",))
        right = WeightedParticleSystem.equal_weights(rng.standard_normal((n, 1)), ("b",))
        merged = naive_merge(left, right)
        corr = np.corrcoef(merged.values.T)[0, 1]
        assert abs(corr) < 0.01

    def test_errors(self):
        left = WeightedParticleSystem.equal_weights([[1.0], [2.0]], ("a",))
        right = WeightedParticleSystem.equal_weights([[1.0]], ("b",))
        with pytest.raises(ValueError):
            naive_merge(left, right)
        weighted = WeightedParticleSystem([[1.0], [2.0]], [0.0, -1.0], ("b",))
        with pytest.raises(ValueError):
            naive_merge(left, weighted)


def merge_model(lam=(0.5, 0.5, 0.5)):
    spec = default_gaussian_chain(M=3, n_obs=4, seed=2)
    return spec, gaussian_chain_build(spec, lam=lam)


class TestExtendedMergeWeights:
    def test_alpha_zero_uniform(self):
        _, model = merge_model()
        tuples = np.random.default_rng(1).normal(size=(12, 2))
        logv = extended_merge_weights(
            tuples, model, 2, MergeConfig(mode="extended", alpha_star=0.0)
        )
        np.testing.assert_array_equal(logv, np.zeros(12))

    def test_alpha_one_is_pool_times_likelihood(self):
        spec, model = merge_model()
        factors = decompose_pooled_prior(model)
        tuples = np.random.default_rng(2).normal(size=(12, 2))
        config = MergeConfig(mode="extended", alpha_star=1.0, mu_strategy="prior_mean")
        logv = extended_merge_weights(tuples, model, 2, config)
        mu = np.full((12, 1), spec.psi_prior_mean[0])
        expected = factors[1](tuples) + model.submodel(2).log_likelihood(tuples, mu)
        np.testing.assert_allclose(logv, expected, atol=1e-12)

    def test_hand_computed_gaussian_tuples(self):
        spec, model = merge_model(lam=(1.0, 1.0, 1.0))
        config = MergeConfig(mode="extended", alpha_star=0.6, mu_strategy="fixed_value",
                             mu_fixed=np.array([0.3]))
        tuples = np.array([[0.0, 0.0], [1.0, -1.0], [0.5, 2.0]])
        logv = extended_merge_weights(tuples, model, 2, config)

        def normpdf(x, mean, sd):
            return -0.5 * ((x - mean) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi)

        y2, s2 = spec.data[1], spec.noise_sd[1]
        lam2 = 1.0
        expected = []
        for p12, p23 in tuples:
            pool2 = lam2 * (
                normpdf(p12, spec.phi_prior_mean[1][0], spec.phi_prior_sd[1][0])
                + normpdf(p23, spec.phi_prior_mean[1][1], spec.phi_prior_sd[1][1])
            )
            # Correction role subtracts the flank priors' deficits
            # (lam = 1 everywhere makes those vanish).
            lik = sum(normpdf(y, p12 + p23 + 0.3, s2) for y in y2)
            expected.append(0.6 * (pool2 + lik))
        np.testing.assert_allclose(logv, expected, atol=1e-10)


def enumerate_selection_distribution(v, kappa_n):
    """Exact per-slot tuple-selection probabilities of the extended merge.

    Candidates are kappa_n iid uniform draws over the tuple grid; one
    output slot is selected proportional to the candidate v-weights.
    Enumerates every multinomial composition exactly.
    """
    v = np.asarray(v, dtype=float).ravel()
    k = v.size
    prob = np.zeros(k)
    log_unif = -np.log(k)
    for comp in itertools.product(range(kappa_n + 1), repeat=k):
        if sum(comp) != kappa_n:
            continue
        counts = np.array(comp)
        log_mult = (
            np.sum(np.log(np.arange(1, kappa_n + 1)))
            - sum(np.sum(np.log(np.arange(1, c + 1))) for c in comp)
            + kappa_n * log_unif
        )
        weight_total = counts @ v
        if weight_total == 0:
            continue
        prob += np.exp(log_mult) * counts * v / weight_total
    return prob


class TestExtendedMerge:
    def test_point_mass_inputs(self):
        _, model = merge_model()
        left = WeightedParticleSystem.equal_weights(np.full((4, 1), 1.5), ("phi1_2",))
        right = WeightedParticleSystem.equal_weights(np.full((4, 1), -0.5), ("phi2_3",))
        merged, anc_l, anc_r = extended_merge(
            left, right, model, 2,
            MergeConfig(mode="extended", alpha_star=0.9), np.random.default_rng(3),
        )
        np.testing.assert_array_equal(merged.values, np.tile([1.5, -0.5], (4, 1)))

    def test_alpha_zero_selection_equals_naive_exactly(self):
        # With alpha* = 0 every candidate weight is 1, so the exact
        # per-slot selection distribution is uniform over (i, j) tuples --
        # identical to naive pairing of independently resampled inputs.
        for n, kappa in ((2, 2), (3, 1), (4, 1)):
            uniform = enumerate_selection_distribution(np.ones(n * n), kappa * n)
            np.testing.assert_allclose(uniform, np.full(n * n, 1.0 / n**2), atol=1e-12)

    @pytest.mark.slow
    def test_discrete_toy_matches_enumeration(self):
        # 2 particles per side, kappa = 2: enumerate the exact selection
        # distribution and compare against empirical frequencies.
        spec, model = merge_model(lam=(1.0, 1.0, 1.0))
        factors = decompose_pooled_prior(model)
        config = MergeConfig(mode="extended", alpha_star=0.8, oversample=2,
                             mu_strategy="prior_mean")
        left_vals = np.array([[-0.7], [0.9]])
        right_vals = np.array([[0.2], [-1.1]])
        pairs = np.array([
            [left_vals[i, 0], right_vals[j, 0]] for i in range(2) for j in range(2)
        ])
        logv = extended_merge_weights(pairs, model, 2, config)
        exact = enumerate_selection_distribution(np.exp(logv - logv.max()), 4)

        left = WeightedParticleSystem.equal_weights(left_vals, ("phi1_2",))
        right = WeightedParticleSystem.equal_weights(right_vals, ("phi2_3",))
        rng = np.random.default_rng(4)
        counts = np.zeros(4)
        reps = 30_000
        for _ in range(reps):
            merged, anc_l, anc_r = extended_merge(
                left, right, model, 2, config, rng, pooled_factors=factors
            )
            counts += np.bincount(anc_l * 2 + anc_r, minlength=4)
        freq = counts / counts.sum()
        se = np.sqrt(exact * (1 - exact) / (reps * 2))
        assert np.all(np.abs(freq - exact) < 3.5 * np.maximum(se, 1e-4))

    def test_all_zero_weights_degenerate(self):
        _, model = merge_model()
        left = WeightedParticleSystem.equal_weights([[50.0], [60.0]], ("phi1_2",))
        right = WeightedParticleSystem.equal_weights([[50.0], [60.0]], ("phi2_3",))

        def neg_inf_factor(phi):
            return np.full(np.atleast_2d(phi).shape[0], -np.inf)

        from dcmeld.dc import DegenerateMergeError

        factors = decompose_pooled_prior(model)
        factors[1] = neg_inf_factor
        with pytest.raises(DegenerateMergeError):
            extended_merge(
                left, right, model, 2,
                MergeConfig(mode="extended", alpha_star=1.0, mu_strategy="prior_mean"),
                np.random.default_rng(5), pooled_factors=factors,
            )


class TestDcMelding3:
    def test_gaussian_oracle(self):
        spec = default_gaussian_chain(M=3, n_obs=10, seed=1)
        lam = (0.5, 0.5, 0.5)
        model = gaussian_chain_build(spec, lam=lam)
        mean, cov, labels = gaussian_chain_exact_posterior(spec, lam)
        res = dc_melding_3(model, 4096, SCHED, KERNEL, MergeConfig(), seed=42)
        assert res.samples.labels == labels
        est = res.samples.mean()
        sd = np.sqrt(np.diag(res.samples.cov()))
        np.testing.assert_allclose(est, mean, atol=4 * np.max(sd) / np.sqrt(200) + 0.05)

    def test_flat_center_passthrough(self):
        # Zero data and a flat pooled factor for the center: stage-two
        # increments are constant, so the flank marginals pass through
        # exactly (no resampling can trigger, shared blocks are frozen).
        spec = default_gaussian_chain(M=3, n_obs=6, seed=9)
        spec = GaussianChainSpec(
            M=3,
            data=(spec.data[0], np.empty(0), spec.data[2]),
            noise_sd=spec.noise_sd,
            phi_prior_mean=spec.phi_prior_mean,
            phi_prior_sd=spec.phi_prior_sd,
            psi_prior_mean=spec.psi_prior_mean,
            psi_prior_sd=spec.psi_prior_sd,
        )
        model = gaussian_chain_build(
            spec, lam=(1.0, 0.0, 1.0), roles=("original", "flat", "original")
        )
        res = dc_melding_3(model, 512, SCHED, KERNEL, MergeConfig(), seed=3)
        ledger = res.ledger
        leaf1 = ledger.leaf(1)
        center = ledger.center
        assert len(center.diagnostics.alphas) == 1
        assert not any(center.diagnostics.resampled)
        np.testing.assert_array_equal(
            res.samples.column("phi1_2"), leaf1.system.column("phi1_2")
        )

    def test_multi_reduces_to_three(self):
        spec = default_gaussian_chain(M=3, n_obs=6, seed=4)
        model = gaussian_chain_build(spec, lam=(0.5, 0.5, 0.5))
        r3 = dc_melding_3(model, 256, SCHED, KERNEL, MergeConfig(), seed=11)
        rm = dc_melding_multi(model, 256, SCHED, KERNEL, MergeConfig(), seed=11)
        np.testing.assert_array_equal(r3.samples.values, rm.samples.values)
        np.testing.assert_array_equal(r3.samples.log_weights, rm.samples.log_weights)

    def test_requires_m3(self):
        spec = default_gaussian_chain(M=5, n_obs=4, seed=5)
        model = gaussian_chain_build(spec)
        with pytest.raises(ValueError):
            dc_melding_3(model, 64, SCHED, KERNEL, MergeConfig(), seed=1)

    def test_extended_merge_runs(self):
        spec = default_gaussian_chain(M=3, n_obs=8, seed=6)
        lam = (0.5, 0.5, 0.5)
        model = gaussian_chain_build(spec, lam=lam)
        mean, _, _ = gaussian_chain_exact_posterior(spec, lam)
        res = dc_melding_3(
            model, 4096, SCHED, KERNEL,
            MergeConfig(mode="extended", alpha_star=0.5, oversample=3), seed=8,
        )
        np.testing.assert_allclose(res.samples.mean(), mean, atol=0.08)


@pytest.mark.parametrize("M", [4, 5, 6, 7])
def test_dc_melding_multi_matches_exact(M):
    spec = default_gaussian_chain(M=M, n_obs=8, seed=M)
    lam = (0.8,) * M
    model = gaussian_chain_build(spec, lam=lam)
    mean, cov, labels = gaussian_chain_exact_posterior(spec, lam)
    res = dc_melding_multi(model, 4096, SCHED, KERNEL, MergeConfig(), seed=17)
    assert res.samples.labels == labels
    err = np.abs(res.samples.mean() - mean)
    assert np.all(err < 0.09), err


class TestReconstruction:
    @pytest.mark.parametrize("M", [3, 5, 6, 8])
    def test_matches_eager_oracle(self, M):
        spec = default_gaussian_chain(M=M, n_obs=5, seed=M + 20)
        model = gaussian_chain_build(spec, lam=(0.9,) * M)
        res = dc_melding_multi(model, 128, SCHED, KERNEL, MergeConfig(), seed=M)
        eager = eager_joint_reconstruction(res.ledger)
        for lab in res.samples.labels:
            np.testing.assert_array_equal(res.samples.column(lab), eager[lab])

    @pytest.mark.parametrize("M", [5, 7])
    def test_blocks_coherent_with_final_system(self, M):
        # The center record's own block columns and the ancestry-gathered
        # flank values must be the same atoms: the values attached to the
        # final psi rows are exactly the ones that parameterized their
        # last move.
        spec = default_gaussian_chain(M=M, n_obs=5, seed=M)
        model = gaussian_chain_build(spec, lam=(1.0,) * M)
        res = dc_melding_multi(model, 128, SCHED, KERNEL, MergeConfig(), seed=2)
        center = res.ledger.center
        for lab in center.system.labels:
            np.testing.assert_array_equal(
                res.samples.column(lab), center.system.column(lab)
            )

    def test_hand_traced_ledger(self):
        # Scripted N=5, M=5 ledger: every ancestry is written by hand and
        # the reconstruction is compared row by row with a manual trace.
        n = 5
        plan = plan_stages(5)

        def sysmk(labels, base):
            vals = np.column_stack(
                [base * 100.0 + 10 * k + np.arange(n) for k in range(len(labels))]
            )
            return WeightedParticleSystem.equal_weights(vals, labels)

        leaf1 = sysmk(("phi1_2", "psi1"), 1)
        leaf3 = sysmk(("phi2_3", "phi3_4", "psi3"), 3)
        leaf5 = sysmk(("phi4_5", "psi5"), 5)
        rec2sys = sysmk(("phi1_2", "phi2_3", "psi2"), 2)
        censys = sysmk(("phi3_4", "phi4_5", "psi4"), 4)

        ident = IndexMultiset.identity(n)
        A2 = IndexMultiset(np.array([1, 1, 0, 4, 3]), n)   # stage-2 ancestry
        L2 = IndexMultiset(np.array([2, 0, 1, 1, 4]), n)   # merge into left frontier
        R2 = IndexMultiset(np.array([0, 3, 3, 2, 1]), n)   # merge into leaf 3
        C = IndexMultiset(np.array([4, 0, 0, 2, 1]), n)    # final ancestry
        CL = IndexMultiset(np.array([1, 2, 0, 0, 3]), n)   # center left merge
        CR = IndexMultiset(np.array([3, 3, 1, 0, 2]), n)   # center right merge

        def rec(stage, side, submodels, system, anc, la, ra):
            return TaskRecord(stage=stage, side=side, submodels=submodels,
                              system=system, ancestry=anc, merge_left_anc=la,
                              merge_right_anc=ra, diagnostics=SmcDiagnostics())

        ledger = RunLedger(
            plan=plan, n_particles=n, seed=0,
            phi_labels=("phi1_2", "phi2_3", "phi3_4", "phi4_5"),
            psi_labels=("psi1", "psi2", "psi3", "psi4", "psi5"),
        )
        ledger.records = [
            rec(1, "leaf", (1,), leaf1, ident, None, None),
            rec(1, "leaf", (3,), leaf3, ident, None, None),
            rec(1, "leaf", (5,), leaf5, ident, None, None),
            rec(2, "left", (2,), rec2sys, A2, L2, R2),
            rec(3, "center", (4,), censys, C, CL, CR),
        ]
        joint = extract_joint_samples(ledger)

        for i in range(n):
            wl = CL.indices[C.indices[i]]          # left-frontier row
            wr = CR.indices[C.indices[i]]          # right-frontier row
            leaf1_row = L2.indices[A2.indices[wl]]
            leaf3_row = R2.indices[A2.indices[wl]]
            assert joint.column("psi4")[i] == censys.column("psi4")[i]
            assert joint.column("psi2")[i] == rec2sys.column("psi2")[wl]
            assert joint.column("phi1_2")[i] == leaf1.column("phi1_2")[leaf1_row]
            assert joint.column("psi1")[i] == leaf1.column("psi1")[leaf1_row]
            assert joint.column("phi2_3")[i] == leaf3.column("phi2_3")[leaf3_row]
            assert joint.column("phi3_4")[i] == leaf3.column("phi3_4")[leaf3_row]
            assert joint.column("psi3")[i] == leaf3.column("psi3")[leaf3_row]
            assert joint.column("phi4_5")[i] == leaf5.column("phi4_5")[wr]
            assert joint.column("psi5")[i] == leaf5.column("psi5")[wr]

    def test_incomplete_ledger_raises(self):
        spec = default_gaussian_chain(M=3, n_obs=4, seed=1)
        model = gaussian_chain_build(spec, lam=(0.5, 0.5, 0.5))
        res = dc_melding_3(model, 64, SCHED, KERNEL, MergeConfig(), seed=0)
        res.ledger.records = [
            r for r in res.ledger.records if r.side != "center"
        ]
        with pytest.raises(ValueError):
            extract_joint_samples(res.ledger)


class TestLedgerSerialization:
    def test_roundtrip_and_offline_extract(self, tmp_path):
        spec = default_gaussian_chain(M=5, n_obs=4, seed=31)
        model = gaussian_chain_build(spec, lam=(0.7,) * 5)
        res = dc_melding_multi(model, 128, SCHED, KERNEL, MergeConfig(), seed=5)
        res.ledger.save(tmp_path / "ledger")
        loaded = RunLedger.load(tmp_path / "ledger")
        joint = extract_joint_samples(loaded)
        np.testing.assert_array_equal(joint.values, res.samples.values)
        np.testing.assert_array_equal(joint.log_weights, res.samples.log_weights)
        assert joint.labels == res.samples.labels
