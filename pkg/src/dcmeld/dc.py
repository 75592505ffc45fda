"""Multi-stage divide-and-conquer samplers for chain-melded models.

The chain of M submodels is sampled in stages: stage one runs
independent tempered SMC samplers for a case-specific set of submodels,
middle stages activate one submodel on each flank (merging its shared
blocks with the neighbouring populations and bridging to the enlarged
subposterior), and the final stage targets the full melded posterior.
Four stage layouts exist depending on M mod 4; :func:`plan_stages`
builds the schedule.

Shared parameter blocks are never moved after their first stage: they
are atoms that later stages only reweight and reshuffle.  Every shuffle
is recorded as an ancestry multiset, and
:func:`extract_joint_samples` composes the recorded collections
backward (via the index algebra in :mod:`dcmeld.particles`) so that row
i of the returned joint system is one coherent trajectory across all
parameters.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .melding import ChainMeldedModel, decompose_pooled_prior, melded_term
from .particles import (
    IndexMultiset,
    ResampleScheme,
    WeightedParticleSystem,
    back_left_update,
    back_right_update,
    forward_update,
    resample,
    resample_indices,
)
from .rng import substream
from .smc import (
    MoveKernelConfig,
    SmcDiagnostics,
    TemperingSchedule,
    TemperingTarget,
    smc_sampler,
)

__all__ = [
    "StageTask",
    "Stage",
    "StagePlan",
    "MergeConfig",
    "TaskRecord",
    "RunLedger",
    "MeldingRunResult",
    "plan_stages",
    "naive_merge",
    "extended_merge_weights",
    "extended_merge",
    "dc_melding_3",
    "dc_melding_multi",
    "extract_joint_samples",
]


# ---------------------------------------------------------------------------
# Stage planning


@dataclass(frozen=True)
class StageTask:
    """One SMC run within a stage.

    ``merge_blocks`` names the (left-source, right-source) shared blocks
    paired up as the sampler input; ``fresh_blocks`` are blocks
    initialised from a proposal at this task (a leaf's own blocks, or
    the middle block of an even-M center stage).
    """

    submodels: tuple[int, ...]
    side: str  # "leaf" | "left" | "right" | "center"
    merge_blocks: tuple[int, int] | None = None
    fresh_blocks: tuple[int, ...] = ()

    @property
    def key(self) -> str:
        return f"{self.side}-" + "-".join(str(m) for m in self.submodels)


@dataclass(frozen=True)
class Stage:
    index: int
    tasks: tuple[StageTask, ...]
    pair: tuple[int, int] | None = None  # (m_L, m_R) where applicable


@dataclass(frozen=True)
class StagePlan:
    M: int
    case: str
    stages: tuple[Stage, ...]

    @property
    def S(self) -> int:
        return len(self.stages)

    @property
    def stage_one_set(self) -> tuple[int, ...]:
        return tuple(
            m for task in self.stages[0].tasks for m in task.submodels
        )

    def activated(self) -> list[int]:
        return [m for st in self.stages for t in st.tasks for m in t.submodels]


def _leaf_task(m: int, M: int) -> StageTask:
    blocks = tuple(b for b in (m - 1, m) if 1 <= b <= M - 1)
    return StageTask(submodels=(m,), side="leaf", fresh_blocks=blocks)


def plan_stages(M: int) -> StagePlan:
    """Build the stage schedule for M >= 3 submodels.

    Stage counts follow the closed forms (M+5)/4, (M+7)/4, (M+4)/4 and
    (M+6)/4 for the cases 4|(M+1), 4|(M-1), 4|M and even-with-4∤M.
    """
    if M < 3:
        raise ValueError("the chain sampler needs at least three submodels")
    stages: list[Stage] = []
    if M % 2 == 1:
        stage_one = tuple(range(1, M + 1, 2))
        if (M + 1) % 4 == 0:
            case = "odd_4divMplus1"
            n_mid = (M + 1) // 4
            pen: int | None = None
            final = StageTask(
                submodels=((M + 1) // 2,),
                side="center",
                merge_blocks=((M - 1) // 2, (M + 1) // 2),
            )
        else:
            case = "odd_4divMminus1"
            n_mid = (M - 1) // 4
            pen = (M - 1) // 2
            final = StageTask(
                submodels=((M + 3) // 2,),
                side="center",
                merge_blocks=((M + 1) // 2, (M + 3) // 2),
            )
    else:
        if M % 4 == 0:
            case = "even_4divM"
            stage_one = tuple(range(1, M // 2, 2)) + tuple(range(M // 2 + 2, M + 1, 2))
            n_mid = M // 4
            pen = None
            m1 = M // 2
            final = StageTask(
                submodels=(m1, m1 + 1),
                side="center",
                merge_blocks=(m1 - 1, m1 + 1),
                fresh_blocks=(m1,),
            )
        else:
            case = "even_not4divM"
            stage_one = tuple(range(1, M // 2 + 1, 2)) + tuple(range(M // 2 + 3, M + 1, 2))
            n_mid = (M - 2) // 4
            pen = M // 2 - 1
            m1 = M // 2 + 1
            final = StageTask(
                submodels=(m1, m1 + 1),
                side="center",
                merge_blocks=(m1 - 1, m1 + 1),
                fresh_blocks=(m1,),
            )

    stages.append(Stage(index=1, tasks=tuple(_leaf_task(m, M) for m in stage_one)))
    for s in range(2, n_mid + 1):
        m_left, m_right = 2 * s - 2, M + 3 - 2 * s
        stages.append(
            Stage(
                index=s,
                tasks=(
                    StageTask((m_left,), "left", merge_blocks=(m_left - 1, m_left)),
                    StageTask((m_right,), "right", merge_blocks=(m_right - 1, m_right)),
                ),
                pair=(m_left, m_right),
            )
        )
    if pen is not None:
        stages.append(
            Stage(
                index=len(stages) + 1,
                tasks=(StageTask((pen,), "left", merge_blocks=(pen - 1, pen)),),
            )
        )
    stages.append(Stage(index=len(stages) + 1, tasks=(final,)))

    plan = StagePlan(M=M, case=case, stages=tuple(stages))
    activated = plan.activated()
    if sorted(activated) != list(range(1, M + 1)):
        raise AssertionError(f"stage plan for M={M} is not a partition: {activated}")
    expected = {"odd_4divMplus1": (M + 5) // 4, "odd_4divMminus1": (M + 7) // 4,
                "even_4divM": (M + 4) // 4, "even_not4divM": (M + 6) // 4}[case]
    if plan.S != expected:
        raise AssertionError(f"stage count {plan.S} != closed form {expected} for M={M}")
    return plan


# ---------------------------------------------------------------------------
# Merging


@dataclass(frozen=True)
class MergeConfig:
    """Naive or auxiliary-weighted merging of two child populations.

    Extended merging oversamples each side ``oversample``*N times with
    replacement, weights the aligned tuples by
    (pooled-factor * likelihood-at-mu)^alpha_star, and resamples N
    tuples proportional to those weights.
    """

    mode: str = "naive"
    alpha_star: float = 0.5
    oversample: int = 3
    mu_strategy: str = "prior_mean"
    mu_fixed: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("naive", "extended"):
            raise ValueError(f"unknown merge mode {self.mode!r}")
        if not (0.0 <= self.alpha_star <= 1.0):
            raise ValueError("alpha_star must lie in [0, 1]")
        if int(self.oversample) < 1:
            raise ValueError("oversample factor must be a positive integer")
        object.__setattr__(self, "oversample", int(self.oversample))
        if self.mu_strategy not in ("prior_mean", "prior_draw", "fixed_value"):
            raise ValueError(f"unknown mu strategy {self.mu_strategy!r}")
        if self.mu_strategy == "fixed_value" and self.mu_fixed is None:
            raise ValueError("mu_strategy='fixed_value' requires mu_fixed")


class DegenerateMergeError(RuntimeError):
    """Every candidate tuple received zero merge weight."""


def naive_merge(
    left: WeightedParticleSystem, right: WeightedParticleSystem
) -> WeightedParticleSystem:
    """Index-aligned concatenation of two equally weighted systems."""
    if left.n != right.n:
        raise ValueError(f"size mismatch: {left.n} vs {right.n}")
    if not (left.is_equally_weighted() and right.is_equally_weighted()):
        raise ValueError("naive merge expects equally weighted inputs")
    values = np.concatenate([left.values, right.values], axis=1)
    return WeightedParticleSystem.equal_weights(values, left.labels + right.labels)


def _resolve_mu(
    model: ChainMeldedModel,
    m: int,
    phi_m: np.ndarray,
    config: MergeConfig,
    rng: np.random.Generator | None,
) -> np.ndarray:
    sub = model.submodel(m)
    if config.mu_strategy == "fixed_value":
        mu = np.asarray(config.mu_fixed, dtype=np.float64).ravel()
        return np.broadcast_to(mu, (phi_m.shape[0], mu.size)).copy()
    if config.mu_strategy == "prior_mean":
        if sub.psi_prior_mean is None:
            raise ValueError(
                f"submodel {m} provides no psi prior mean; choose another mu strategy"
            )
        return np.atleast_2d(sub.psi_prior_mean(phi_m))
    if rng is None:
        raise ValueError("mu_strategy='prior_draw' needs an RNG")
    if sub.psi_proposal is None:
        raise ValueError(f"submodel {m} has no psi proposal to draw mu from")
    return sub.psi_proposal.sample(phi_m, rng)


def extended_merge_weights(
    phi_tuples: np.ndarray,
    model: ChainMeldedModel,
    m: int,
    config: MergeConfig,
    rng: np.random.Generator | None = None,
    mu: np.ndarray | None = None,
    pooled_factors=None,
) -> np.ndarray:
    """Log auxiliary weights for candidate tuples of submodel m's blocks.

    log v = alpha_star * (log pooled-factor_m(phi_m)
                          + log p_m(Y_m | phi_m, mu_m)).
    With alpha_star = 0 the weights are uniform and the merge degenerates
    to the naive one.
    """
    phi_tuples = np.atleast_2d(np.asarray(phi_tuples, dtype=np.float64))
    if config.alpha_star == 0.0:
        return np.zeros(phi_tuples.shape[0])
    sub = model.submodel(m)
    if pooled_factors is None:
        pooled_factors = decompose_pooled_prior(model)
    if mu is None:
        mu = _resolve_mu(model, m, phi_tuples, config, rng)
    logv = pooled_factors[m - 1](phi_tuples) + sub.log_likelihood(phi_tuples, mu)
    return config.alpha_star * logv


def extended_merge(
    left: WeightedParticleSystem,
    right: WeightedParticleSystem,
    model: ChainMeldedModel,
    m: int,
    config: MergeConfig,
    rng: np.random.Generator,
    pooled_factors=None,
) -> tuple[WeightedParticleSystem, np.ndarray, np.ndarray]:
    """Auxiliary-weighted merge; returns the system and per-side ancestors.

    Both inputs must be equally weighted and of equal size N.  Each side
    is oversampled kappa*N times with replacement, the aligned tuples are
    weighted by :func:`extended_merge_weights`, and N tuples are selected
    with replacement proportional to those weights.
    """
    if left.n != right.n:
        raise ValueError(f"size mismatch: {left.n} vs {right.n}")
    if not (left.is_equally_weighted() and right.is_equally_weighted()):
        raise ValueError("extended merge expects equally weighted inputs")
    n = left.n
    kappa_n = config.oversample * n
    anc_left = rng.integers(0, n, size=kappa_n)
    anc_right = rng.integers(0, n, size=kappa_n)
    tuples = np.concatenate([left.values[anc_left], right.values[anc_right]], axis=1)
    logv = extended_merge_weights(
        tuples, model, m, config, rng=rng, pooled_factors=pooled_factors
    )
    if not np.isfinite(logv).any():
        raise DegenerateMergeError(
            f"all {kappa_n} candidate tuples have zero merge weight (submodel {m})"
        )
    sel = resample_indices(logv, "multinomial", rng)[:n]
    system = WeightedParticleSystem.equal_weights(
        tuples[sel], left.labels + right.labels
    )
    return system, anc_left[sel], anc_right[sel]


# ---------------------------------------------------------------------------
# Run ledger


@dataclass(frozen=True)
class TaskRecord:
    """Everything a finished task leaves behind for reconstruction."""

    stage: int
    side: str
    submodels: tuple[int, ...]
    system: WeightedParticleSystem
    ancestry: IndexMultiset  # output row -> task-input row
    merge_left_anc: IndexMultiset | None  # task-input row -> left-operand row
    merge_right_anc: IndexMultiset | None  # task-input row -> right-operand row
    diagnostics: SmcDiagnostics

    @property
    def key(self) -> str:
        return f"s{self.stage}-{self.side}-" + "-".join(map(str, self.submodels))


@dataclass
class RunLedger:
    """Append-only record of a run, sufficient for offline reconstruction."""

    plan: StagePlan
    n_particles: int
    seed: int
    phi_labels: tuple[str, ...] = ()
    psi_labels: tuple[str, ...] = ()
    records: list[TaskRecord] = field(default_factory=list)

    def leaf(self, m: int) -> TaskRecord:
        for rec in self.records:
            if rec.side == "leaf" and rec.submodels == (m,):
                return rec
        raise KeyError(f"no leaf record for submodel {m}")

    def side_records(self, side: str) -> list[TaskRecord]:
        return sorted(
            (r for r in self.records if r.side == side), key=lambda r: r.stage
        )

    @property
    def center(self) -> TaskRecord:
        recs = self.side_records("center")
        if not recs:
            raise ValueError("incomplete ledger: no center record")
        return recs[0]

    def save(self, directory) -> None:
        import json
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest: dict = {
            "n_particles": self.n_particles,
            "seed": self.seed,
            "phi_labels": list(self.phi_labels),
            "psi_labels": list(self.psi_labels),
            "plan": {
                "M": self.plan.M,
                "case": self.plan.case,
                "stages": [
                    {
                        "index": st.index,
                        "pair": st.pair,
                        "tasks": [
                            {
                                "submodels": list(t.submodels),
                                "side": t.side,
                                "merge_blocks": list(t.merge_blocks) if t.merge_blocks else None,
                                "fresh_blocks": list(t.fresh_blocks),
                            }
                            for t in st.tasks
                        ],
                    }
                    for st in self.plan.stages
                ],
            },
            "records": [],
        }
        for rec in self.records:
            base = rec.key
            rec_entry = {
                "key": base,
                "stage": rec.stage,
                "side": rec.side,
                "submodels": list(rec.submodels),
                "system": f"{base}.particles.bin",
                "ancestry": f"{base}.ancestry.csv",
                "merge_left_anc": f"{base}.merge_left.csv" if rec.merge_left_anc else None,
                "merge_right_anc": f"{base}.merge_right.csv" if rec.merge_right_anc else None,
                "diagnostics": f"{base}.diag.csv",
            }
            rec.system.to_binary(directory / rec_entry["system"])
            _write_indices_csv(directory / rec_entry["ancestry"], rec.ancestry)
            if rec.merge_left_anc is not None:
                _write_indices_csv(directory / rec_entry["merge_left_anc"], rec.merge_left_anc)
            if rec.merge_right_anc is not None:
                _write_indices_csv(directory / rec_entry["merge_right_anc"], rec.merge_right_anc)
            with open(directory / rec_entry["diagnostics"], "w") as fh:
                rec.diagnostics.write_csv(fh)
            manifest["records"].append(rec_entry)
        with open(directory / "ledger.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "RunLedger":
        import json
        from pathlib import Path

        directory = Path(directory)
        with open(directory / "ledger.json") as fh:
            manifest = json.load(fh)
        plan_info = manifest["plan"]
        stages = tuple(
            Stage(
                index=st["index"],
                pair=tuple(st["pair"]) if st["pair"] else None,
                tasks=tuple(
                    StageTask(
                        submodels=tuple(t["submodels"]),
                        side=t["side"],
                        merge_blocks=tuple(t["merge_blocks"]) if t["merge_blocks"] else None,
                        fresh_blocks=tuple(t["fresh_blocks"]),
                    )
                    for t in st["tasks"]
                ),
            )
            for st in plan_info["stages"]
        )
        plan = StagePlan(M=plan_info["M"], case=plan_info["case"], stages=stages)
        ledger = cls(
            plan=plan,
            n_particles=manifest["n_particles"],
            seed=manifest["seed"],
            phi_labels=tuple(manifest.get("phi_labels", ())),
            psi_labels=tuple(manifest.get("psi_labels", ())),
        )
        for entry in manifest["records"]:
            system = WeightedParticleSystem.from_binary(directory / entry["system"])
            ancestry = _read_indices_csv(directory / entry["ancestry"])
            left = (
                _read_indices_csv(directory / entry["merge_left_anc"])
                if entry["merge_left_anc"]
                else None
            )
            right = (
                _read_indices_csv(directory / entry["merge_right_anc"])
                if entry["merge_right_anc"]
                else None
            )
            ledger.records.append(
                TaskRecord(
                    stage=entry["stage"],
                    side=entry["side"],
                    submodels=tuple(entry["submodels"]),
                    system=system,
                    ancestry=ancestry,
                    merge_left_anc=left,
                    merge_right_anc=right,
                    diagnostics=SmcDiagnostics(),
                )
            )
        return ledger


def _write_indices_csv(path, multiset: IndexMultiset) -> None:
    with open(path, "w") as fh:
        fh.write(f"index_1based,n_source={multiset.n_source}\n")
        for v in multiset.one_based:
            fh.write(f"{v}\n")


def _read_indices_csv(path) -> IndexMultiset:
    with open(path) as fh:
        header = fh.readline().strip()
        n_source = int(header.split("n_source=")[1])
        idx = [int(line) for line in fh if line.strip()]
    return IndexMultiset.from_one_based(np.array(idx), n_source)


@dataclass
class MeldingRunResult:
    """Joint samples plus the ledger and per-task diagnostics."""

    samples: WeightedParticleSystem
    ledger: RunLedger
    diagnostics: dict[str, SmcDiagnostics]


# ---------------------------------------------------------------------------
# Stage targets


def _single_target(
    model: ChainMeldedModel, m: int, pooled_factors, leaf: bool
) -> TemperingTarget:
    sub = model.submodel(m)
    dl, dr, dp = sub.dim_phi_left, sub.dim_phi_right, sub.dim_psi
    if sub.psi_proposal is None and dp > 0:
        raise ValueError(f"submodel {m} needs a psi proposal")
    pool_m = pooled_factors[m - 1]

    def contribution(theta: np.ndarray) -> np.ndarray:
        phi = theta[:, : dl + dr]
        psi = theta[:, dl + dr :]
        return melded_term(pool_m(phi), sub.log_joint(phi, psi), sub.log_phi_prior(phi))

    def log_q(theta: np.ndarray) -> np.ndarray:
        if dp == 0:
            return np.zeros(theta.shape[0])
        return sub.psi_proposal.log_density(theta[:, : dl + dr], theta[:, dl + dr :])

    if leaf:
        log_base = lambda th: sub.log_phi_prior(th[:, : dl + dr]) + log_q(th)
        move_mask = np.ones(dl + dr + dp, dtype=bool)
    else:
        log_base = log_q
        move_mask = np.zeros(dl + dr + dp, dtype=bool)
        move_mask[dl + dr :] = True

    discrete = np.zeros(dl + dr + dp, dtype=bool)
    if sub.psi_discrete_mask is not None:
        discrete[dl + dr :] = np.asarray(sub.psi_discrete_mask, dtype=bool)

    labels = _task_labels(model, m)
    return TemperingTarget(
        dim=dl + dr + dp,
        log_base=log_base,
        log_target=contribution,
        move_mask=move_mask,
        discrete_mask=discrete,
        labels=labels,
    )


def _pair_target(
    model: ChainMeldedModel, m1: int, pooled_factors
) -> TemperingTarget:
    """Joint target for the even-M center submodels (m1, m1+1).

    Columns: [block m1-1, block m1 (fresh), block m1+1, psi_m1, psi_m2].
    """
    m2 = m1 + 1
    s1, s2 = model.submodel(m1), model.submodel(m2)
    bdl, bdc, bdr = model.block_dim(m1 - 1), model.block_dim(m1), model.block_dim(m2)
    d1, d2 = s1.dim_psi, s2.dim_psi
    if s1.phi_block_sampler_right is None or s1.log_phi_prior_right is None:
        raise ValueError(
            f"submodel {m1} must provide a right-block prior sampler and density "
            f"for the center block of the joint stage"
        )
    pool1, pool2 = pooled_factors[m1 - 1], pooled_factors[m2 - 1]

    sl_left = slice(0, bdl)
    sl_center = slice(bdl, bdl + bdc)
    sl_right = slice(bdl + bdc, bdl + bdc + bdr)
    sl_psi1 = slice(bdl + bdc + bdr, bdl + bdc + bdr + d1)
    sl_psi2 = slice(bdl + bdc + bdr + d1, bdl + bdc + bdr + d1 + d2)

    def phi1(theta):
        return np.concatenate([theta[:, sl_left], theta[:, sl_center]], axis=1)

    def phi2(theta):
        return np.concatenate([theta[:, sl_center], theta[:, sl_right]], axis=1)

    def log_base(theta: np.ndarray) -> np.ndarray:
        out = s1.log_phi_prior_right(theta[:, sl_center])
        if d1:
            out = out + s1.psi_proposal.log_density(phi1(theta), theta[:, sl_psi1])
        if d2:
            out = out + s2.psi_proposal.log_density(phi2(theta), theta[:, sl_psi2])
        return out

    def log_target(theta: np.ndarray) -> np.ndarray:
        p1, p2 = phi1(theta), phi2(theta)
        out = melded_term(pool1(p1), s1.log_joint(p1, theta[:, sl_psi1]), s1.log_phi_prior(p1))
        return out + melded_term(
            pool2(p2), s2.log_joint(p2, theta[:, sl_psi2]), s2.log_phi_prior(p2)
        )

    dim = bdl + bdc + bdr + d1 + d2
    move_mask = np.zeros(dim, dtype=bool)
    move_mask[sl_center] = True
    move_mask[sl_psi1] = True
    move_mask[sl_psi2] = True
    discrete = np.zeros(dim, dtype=bool)
    if s1.psi_discrete_mask is not None:
        discrete[sl_psi1] = np.asarray(s1.psi_discrete_mask, dtype=bool)
    if s2.psi_discrete_mask is not None:
        discrete[sl_psi2] = np.asarray(s2.psi_discrete_mask, dtype=bool)

    labels = (
        model.block_labels[m1 - 2]
        + model.block_labels[m1 - 1]
        + model.block_labels[m2 - 1]
        + s1.psi_labels
        + s2.psi_labels
    )
    return TemperingTarget(
        dim=dim,
        log_base=log_base,
        log_target=log_target,
        move_mask=move_mask,
        discrete_mask=discrete,
        labels=labels,
    )


def _task_labels(model: ChainMeldedModel, m: int) -> tuple[str, ...]:
    sub = model.submodel(m)
    labels: tuple[str, ...] = ()
    if m > 1:
        labels += model.block_labels[m - 2]
    if m < model.M:
        labels += model.block_labels[m - 1]
    return labels + sub.psi_labels


# ---------------------------------------------------------------------------
# The runner


def _block_cols(model: ChainMeldedModel, system: WeightedParticleSystem, b: int) -> np.ndarray:
    cols = [system.labels.index(lab) for lab in model.block_labels[b - 1]]
    return system.values[:, cols]


def _run_leaf(
    model: ChainMeldedModel,
    pooled_factors,
    m: int,
    n_particles: int,
    schedule: TemperingSchedule,
    kernel_config: MoveKernelConfig,
    resample_scheme: ResampleScheme,
    seed: int,
) -> TaskRecord:
    sub = model.submodel(m)
    target = _single_target(model, m, pooled_factors, leaf=True)
    rng_init = substream(seed, "stage", 1, "leaf", m, "init")
    if sub.phi_prior_sampler is None:
        raise ValueError(f"submodel {m} needs a phi prior sampler for stage one")
    phi0 = np.atleast_2d(sub.phi_prior_sampler(n_particles, rng_init))
    if sub.dim_psi:
        psi0 = np.atleast_2d(sub.psi_proposal.sample(phi0, rng_init))
        theta0 = np.concatenate([phi0, psi0], axis=1)
    else:
        theta0 = phi0
    init = WeightedParticleSystem.equal_weights(theta0, target.labels)
    out, ancestry, diag = smc_sampler(
        target, init, schedule, kernel_config, resample_scheme,
        (seed, "stage", 1, "leaf", m),
    )
    equal, r = resample(out, resample_scheme, substream(seed, "stage", 1, "barrier", m))
    composed = forward_update(r, ancestry)
    return TaskRecord(
        stage=1, side="leaf", submodels=(m,), system=equal,
        ancestry=composed, merge_left_anc=None, merge_right_anc=None, diagnostics=diag,
    )


class _Branch:
    """Aligned current block arrays on one flank of the chain."""

    def __init__(self) -> None:
        self.blocks: dict[int, np.ndarray] = {}

    def gather(self, idx: np.ndarray) -> None:
        for b in self.blocks:
            self.blocks[b] = self.blocks[b][idx]

    def add(self, b: int, values: np.ndarray) -> None:
        self.blocks[b] = values


def _merge_for_task(
    model, pooled_factors, task, left_vals, right_vals, labels_l, labels_r,
    merge_config, rng,
) -> tuple[np.ndarray, IndexMultiset, IndexMultiset]:
    n = left_vals.shape[0]
    left_sys = WeightedParticleSystem.equal_weights(left_vals, labels_l)
    right_sys = WeightedParticleSystem.equal_weights(right_vals, labels_r)
    # Auxiliary weights need the activated submodel's likelihood over its
    # full phi; the two-submodel center stage lacks its middle block at
    # merge time, so joint center stages always merge naively.
    if merge_config.mode == "extended" and len(task.submodels) == 1:
        merged, anc_l, anc_r = extended_merge(
            left_sys, right_sys, model, task.submodels[0], merge_config, rng,
            pooled_factors=pooled_factors,
        )
        return merged.values, IndexMultiset(anc_l, n), IndexMultiset(anc_r, n)
    merged = naive_merge(left_sys, right_sys)
    ident = IndexMultiset.identity(n)
    return merged.values, ident, ident


def _run_task(
    model: ChainMeldedModel,
    pooled_factors,
    task: StageTask,
    stage_idx: int,
    phi_left: np.ndarray,
    phi_right: np.ndarray,
    n_particles: int,
    schedule: TemperingSchedule,
    kernel_config: MoveKernelConfig,
    merge_config: MergeConfig,
    resample_scheme: ResampleScheme,
    seed: int,
    final: bool,
) -> TaskRecord:
    b_left, b_right = task.merge_blocks
    labels_l = model.block_labels[b_left - 1]
    labels_r = model.block_labels[b_right - 1]
    rng_merge = substream(seed, "stage", stage_idx, task.side, task.submodels[0], "merge")
    merged_phi, anc_l, anc_r = _merge_for_task(
        model, pooled_factors, task, phi_left, phi_right, labels_l, labels_r,
        merge_config, rng_merge,
    )
    rng_init = substream(seed, "stage", stage_idx, task.side, task.submodels[0], "init")

    if len(task.submodels) == 2:
        m1, m2 = task.submodels
        target = _pair_target(model, m1, pooled_factors)
        s1, s2 = model.submodel(m1), model.submodel(m2)
        bdl = model.block_dim(m1 - 1)
        center = np.atleast_2d(s1.phi_block_sampler_right(n_particles, rng_init))
        phi1 = np.concatenate([merged_phi[:, :bdl], center], axis=1)
        phi2 = np.concatenate([center, merged_phi[:, bdl:]], axis=1)
        parts = [merged_phi[:, :bdl], center, merged_phi[:, bdl:]]
        if s1.dim_psi:
            parts.append(np.atleast_2d(s1.psi_proposal.sample(phi1, rng_init)))
        if s2.dim_psi:
            parts.append(np.atleast_2d(s2.psi_proposal.sample(phi2, rng_init)))
        theta0 = np.concatenate(parts, axis=1)
    else:
        m = task.submodels[0]
        target = _single_target(model, m, pooled_factors, leaf=False)
        sub = model.submodel(m)
        if sub.dim_psi:
            psi0 = np.atleast_2d(sub.psi_proposal.sample(merged_phi, rng_init))
            theta0 = np.concatenate([merged_phi, psi0], axis=1)
        else:
            theta0 = merged_phi

    init = WeightedParticleSystem.equal_weights(theta0, target.labels)
    out, ancestry, diag = smc_sampler(
        target, init, schedule, kernel_config, resample_scheme,
        (seed, "stage", stage_idx, task.side, task.submodels[0]),
    )
    if final:
        system, composed = out, ancestry
    else:
        system, r = resample(
            out, resample_scheme,
            substream(seed, "stage", stage_idx, task.side, task.submodels[0], "barrier"),
        )
        composed = forward_update(r, ancestry)
    return TaskRecord(
        stage=stage_idx, side=task.side, submodels=task.submodels, system=system,
        ancestry=composed, merge_left_anc=anc_l, merge_right_anc=anc_r, diagnostics=diag,
    )


def run_stage_one(
    model: ChainMeldedModel,
    submodels: Sequence[int],
    n_particles: int,
    schedule: TemperingSchedule,
    kernel_config: MoveKernelConfig,
    seed: int,
    resample_scheme: ResampleScheme | None = None,
    workers: int = 1,
) -> dict[int, TaskRecord]:
    """Run independent flank samplers only; used by the baseline samplers."""
    pooled_factors = decompose_pooled_prior(model)
    resample_scheme = resample_scheme or ResampleScheme()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            m: pool.submit(
                _run_leaf, model, pooled_factors, m, n_particles,
                schedule, kernel_config, resample_scheme, seed,
            )
            for m in submodels
        }
        return {m: fut.result() for m, fut in futures.items()}


def dc_melding_multi(
    model: ChainMeldedModel,
    n_particles: int,
    schedule: TemperingSchedule,
    kernel_config: MoveKernelConfig,
    merge_config: MergeConfig,
    seed: int,
    resample_scheme: ResampleScheme | None = None,
    workers: int = 1,
) -> MeldingRunResult:
    """Run the multi-stage sampler for any M >= 3 chain-melded model."""
    plan = plan_stages(model.M)
    pooled_factors = decompose_pooled_prior(model)
    resample_scheme = resample_scheme or ResampleScheme()
    ledger = RunLedger(
        plan=plan,
        n_particles=n_particles,
        seed=seed,
        phi_labels=model.phi_labels,
        psi_labels=model.psi_labels,
    )
    diagnostics: dict[str, SmcDiagnostics] = {}

    # Stage one: independent leaves, fanned out across workers.
    leaf_tasks = plan.stages[0].tasks
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            task.submodels[0]: pool.submit(
                _run_leaf, model, pooled_factors, task.submodels[0], n_particles,
                schedule, kernel_config, resample_scheme, seed,
            )
            for task in leaf_tasks
        }
        leaf_records = {m: fut.result() for m, fut in futures.items()}
    for m in sorted(leaf_records):
        rec = leaf_records[m]
        ledger.records.append(rec)
        diagnostics[rec.key] = rec.diagnostics

    left, right = _Branch(), _Branch()
    left.add(1, _block_cols(model, leaf_records[1].system, 1))
    right.add(model.M - 1, _block_cols(model, leaf_records[model.M].system, model.M - 1))

    def absorb_leaf(branch: _Branch, leaf_m: int, idx: np.ndarray) -> None:
        rec = leaf_records[leaf_m]
        for b in (leaf_m - 1, leaf_m):
            if 1 <= b <= model.M - 1:
                branch.add(b, _block_cols(model, rec.system, b)[idx])

    def run_side_task(task: StageTask, stage_idx: int, final: bool) -> TaskRecord:
        m = task.submodels[0]
        b_left, b_right = task.merge_blocks
        if task.side == "left":
            phi_l, phi_r = left.blocks[b_left], _block_cols(model, leaf_records[m + 1].system, b_right)
        elif task.side == "right":
            phi_l, phi_r = _block_cols(model, leaf_records[m - 1].system, b_left), right.blocks[b_right]
        else:  # center
            phi_l, phi_r = left.blocks[b_left], right.blocks[b_right]
        rec = _run_task(
            model, pooled_factors, task, stage_idx, phi_l, phi_r, n_particles,
            schedule, kernel_config, merge_config, resample_scheme, seed, final,
        )
        if not final:
            out_rows = rec.ancestry.indices
            if task.side == "left":
                left.gather(rec.merge_left_anc.indices[out_rows])
                absorb_leaf(left, m + 1, rec.merge_right_anc.indices[out_rows])
            else:
                right.gather(rec.merge_right_anc.indices[out_rows])
                absorb_leaf(right, m - 1, rec.merge_left_anc.indices[out_rows])
        return rec

    for stage in plan.stages[1:]:
        final_stage = stage.index == plan.S
        if len(stage.tasks) == 2 and not final_stage:
            with ThreadPoolExecutor(max_workers=max(1, min(workers, 2))) as pool:
                futs = [
                    pool.submit(run_side_task, task, stage.index, False)
                    for task in stage.tasks
                ]
                recs = [f.result() for f in futs]
        else:
            recs = [
                run_side_task(task, stage.index, final_stage) for task in stage.tasks
            ]
        for rec in recs:
            ledger.records.append(rec)
            diagnostics[rec.key] = rec.diagnostics

    samples = extract_joint_samples(ledger)
    return MeldingRunResult(samples=samples, ledger=ledger, diagnostics=diagnostics)


def dc_melding_3(
    model: ChainMeldedModel,
    n_particles: int,
    schedule: TemperingSchedule,
    kernel_config: MoveKernelConfig,
    merge_config: MergeConfig,
    seed: int,
    resample_scheme: ResampleScheme | None = None,
    workers: int = 1,
) -> MeldingRunResult:
    """Two-stage sampler for M = 3: parallel flank samplers, merge, bridge.

    This is the M = 3 specialisation of :func:`dc_melding_multi`; both
    produce identical output for identical seeds.
    """
    if model.M != 3:
        raise ValueError("dc_melding_3 requires a three-submodel chain")
    return dc_melding_multi(
        model, n_particles, schedule, kernel_config, merge_config, seed,
        resample_scheme=resample_scheme, workers=workers,
    )


# ---------------------------------------------------------------------------
# Joint-sample reconstruction


def _combined_frontier_anc(rec: TaskRecord, frontier_side: str) -> IndexMultiset:
    anc = rec.merge_left_anc if frontier_side == "left" else rec.merge_right_anc
    return forward_update(rec.ancestry, anc)


def extract_joint_samples(ledger: RunLedger) -> WeightedParticleSystem:
    """Reconstruct one coherent joint system from a finished run ledger.

    Walks the recorded ancestry collections outward from the final stage
    with the backward index updates, gathering each stored stage system
    so that row i carries a single trajectory across every phi block and
    every psi.  Weights are the final stage's weights.
    """
    center = ledger.center
    n = center.system.n
    ident = IndexMultiset.identity(n)

    columns: dict[str, np.ndarray] = {}

    def take(system: WeightedParticleSystem, idx=None) -> None:
        for lab in system.labels:
            col = system.column(lab)
            columns[lab] = col if idx is None else col[idx]

    # The center task's own output rows are already final-aligned.
    take(center.system)

    for side, back_update, frontier in (
        ("left", back_left_update, "left"),
        ("right", back_right_update, "right"),
    ):
        recs = ledger.side_records(side)
        base_m = 1 if side == "left" else ledger.plan.M
        f_center = _combined_frontier_anc(center, frontier)
        chain = [
            _combined_frontier_anc(rec, frontier) for rec in recs
        ] + [f_center, ident]
        systems = [ledger.leaf(base_m).system] + [rec.system for rec in recs]
        gathered, composed = back_update(chain, systems)

        # gathered[0] is the outermost leaf aligned to the final rows;
        # gathered[j >= 1] is recs[j-1]'s output likewise aligned
        # (composed[j] excludes that record's own ancestry, so its stored
        # post-move psi values stay attached to the right trajectories).
        take(gathered[0])
        for j, rec in enumerate(recs, start=1):
            take(gathered[j])
            # Absorbed stage-one leaf: one step through this record's own
            # merge ancestry, then gathered by the downstream composition.
            w_after = composed[j].indices
            absorbed_m = rec.submodels[0] + 1 if side == "left" else rec.submodels[0] - 1
            leaf_anc = rec.merge_right_anc if side == "left" else rec.merge_left_anc
            leaf_rows = leaf_anc.indices[rec.ancestry.indices[w_after]]
            take(ledger.leaf(absorbed_m).system, idx=leaf_rows)

    ordered_labels = [
        lab for lab in ledger.phi_labels + ledger.psi_labels if lab in columns
    ]
    missing = set(ledger.phi_labels + ledger.psi_labels) - set(ordered_labels)
    if missing:
        raise ValueError(f"incomplete ledger: no stored values for {sorted(missing)}")
    values = np.column_stack([columns[lab] for lab in ordered_labels])
    return WeightedParticleSystem(values, center.system.log_weights, tuple(ordered_labels))
