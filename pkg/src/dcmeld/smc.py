"""Tempered SMC sampler with ancestry tracking.

The sampler bridges a base density to a target along the geometric path
pi_alpha ∝ base^(1-alpha) * target^alpha.  Per temperature it reweights
(by (d_alpha) * (log target - log base) evaluated at the pre-move
particles), optionally resamples when the relative ESS drops below the
trigger, and then applies a pi_alpha-reversible random-walk Metropolis
kernel.  The returned index multiset composes every resampling step, so
entry i names the stage-input ancestor of output particle i.

Temperatures come from a fixed ladder or are chosen adaptively so each
increment's relative conditional ESS hits a target value.

Moves are vectorized across particles; determinism is guaranteed by
drawing every random array from streams keyed on (seed path, rung,
iteration), independent of thread scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .particles import (
    DegenerateWeightsError,
    IndexMultiset,
    ResampleScheme,
    WeightedParticleSystem,
    relative_ess,
    resample_indices,
)

__all__ = [
    "TemperingTarget",
    "TemperingSchedule",
    "MoveKernelConfig",
    "MoveStats",
    "SmcDiagnostics",
    "SmcDegeneracyError",
    "tempered_log_density",
    "weight_increment",
    "next_temperature",
    "relative_cess",
    "rwm_move",
    "smc_sampler",
]


class SmcDegeneracyError(RuntimeError):
    """The particle system degenerated; carries the failing temperature."""

    def __init__(self, message: str, alpha: float):
        super().__init__(f"{message} (alpha={alpha:.6g})")
        self.alpha = alpha


@dataclass(frozen=True)
class TemperingTarget:
    """Endpoints of a tempering path over a d-dimensional state.

    ``log_base`` and ``log_target`` take an (n, d) batch and return (n,).
    ``init_sampler(n, rng)`` draws from the base distribution.
    ``move_mask`` marks coordinates the move kernel may change (defaults
    to all); ``discrete_mask`` marks integer coordinates moved by +-1
    proposals instead of the Gaussian walk.
    """

    dim: int
    log_base: Callable[[np.ndarray], np.ndarray]
    log_target: Callable[[np.ndarray], np.ndarray]
    init_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None
    move_mask: np.ndarray | None = None
    discrete_mask: np.ndarray | None = None
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"x[{k}]" for k in range(self.dim)))
        if len(self.labels) != self.dim:
            raise ValueError("labels must match dim")
        for name in ("move_mask", "discrete_mask"):
            mask = getattr(self, name)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool).ravel()
                if mask.size != self.dim:
                    raise ValueError(f"{name} must have length dim")
                object.__setattr__(self, name, mask)

    def log_ratio(self, theta: np.ndarray) -> np.ndarray:
        return self.log_target(theta) - self.log_base(theta)


@dataclass(frozen=True)
class TemperingSchedule:
    """Fixed ladder or adaptive relative-CESS temperature selection."""

    mode: str = "adaptive"
    ladder: tuple[float, ...] = ()
    target_cess: float = 0.9
    max_steps: int = 1000

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "fixed":
            ladder = tuple(float(a) for a in self.ladder)
            if not ladder or ladder[-1] != 1.0:
                raise ValueError("a fixed ladder must end at 1.0")
            if any(b <= a for a, b in zip((0.0,) + ladder, ladder)):
                raise ValueError("a fixed ladder must be strictly increasing from 0")
            object.__setattr__(self, "ladder", ladder)
        else:
            if not (0.0 < self.target_cess < 1.0):
                raise ValueError("adaptive CESS target must lie in (0, 1)")

    @classmethod
    def fixed(cls, ladder) -> "TemperingSchedule":
        return cls(mode="fixed", ladder=tuple(ladder))

    @classmethod
    def adaptive(cls, target_cess: float = 0.9, max_steps: int = 1000) -> "TemperingSchedule":
        return cls(mode="adaptive", target_cess=target_cess, max_steps=max_steps)


@dataclass(frozen=True)
class MoveKernelConfig:
    """Random-walk Metropolis sweep configuration.

    Continuous coordinates move jointly with covariance
    (2.38^2/d) * (weighted empirical covariance + 1e-6 I), frozen for the
    whole sweep.  Discrete coordinates move by symmetric +-1 proposals in
    random blocks of ``discrete_block_size`` sites per Metropolis step.
    """

    n_mcmc_iters: int = 10
    joint_proposal: bool = True
    discrete_block_size: int = 8
    cov_regularization: float = 1e-6
    scale_factor: float = 2.38

    def __post_init__(self) -> None:
        if self.n_mcmc_iters < 0:
            raise ValueError("n_mcmc_iters must be >= 0")
        if self.discrete_block_size < 1:
            raise ValueError("discrete_block_size must be >= 1")


@dataclass
class MoveStats:
    """Acceptance bookkeeping for one move sweep."""

    proposed_continuous: int = 0
    accepted_continuous: int = 0
    proposed_discrete: int = 0
    accepted_discrete: int = 0

    @property
    def acceptance_rate(self) -> float:
        total = self.proposed_continuous + self.proposed_discrete
        if total == 0:
            return float("nan")
        return (self.accepted_continuous + self.accepted_discrete) / total


@dataclass
class SmcDiagnostics:
    """Per-temperature records: (alpha, ess, acceptance rate, resampled)."""

    alphas: list[float] = field(default_factory=list)
    ess: list[float] = field(default_factory=list)
    acceptance: list[float] = field(default_factory=list)
    resampled: list[bool] = field(default_factory=list)

    def append(self, alpha: float, ess_val: float, acc: float, resampled: bool) -> None:
        self.alphas.append(float(alpha))
        self.ess.append(float(ess_val))
        self.acceptance.append(float(acc))
        self.resampled.append(bool(resampled))

    def to_rows(self) -> list[tuple[float, float, float, bool]]:
        return list(zip(self.alphas, self.ess, self.acceptance, self.resampled))

    def write_csv(self, buf) -> None:
        buf.write("alpha,ess,acceptance,resampled\n")
        for a, e, acc, r in self.to_rows():
            buf.write(f"{a!r},{e!r},{acc!r},{int(r)}\n")


def tempered_log_density(target: TemperingTarget, alpha: float, theta: np.ndarray) -> np.ndarray:
    """(1-alpha) log base + alpha log target; exact at the endpoints."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    theta = np.atleast_2d(theta)
    if alpha == 0.0:
        out = target.log_base(theta)
    elif alpha == 1.0:
        out = target.log_target(theta)
    else:
        out = (1.0 - alpha) * target.log_base(theta) + alpha * target.log_target(theta)
    out = np.asarray(out, dtype=np.float64)
    if np.isnan(out).any():
        raise FloatingPointError("tempered log-density evaluated to NaN")
    return out


def weight_increment(
    target: TemperingTarget, alpha_prev: float, alpha_next: float, theta: np.ndarray
) -> np.ndarray:
    """Log importance increment (alpha_next - alpha_prev) * log(target/base)."""
    if not (0.0 <= alpha_prev <= alpha_next <= 1.0):
        raise ValueError("need 0 <= alpha_prev <= alpha_next <= 1")
    return (alpha_next - alpha_prev) * target.log_ratio(np.atleast_2d(theta))


def relative_cess(log_weights: np.ndarray, log_increment: np.ndarray) -> float:
    """Relative conditional ESS (sum W u)^2 / sum W u^2 of one increment."""
    lw = np.asarray(log_weights, dtype=np.float64)
    lw = lw - logsumexp(lw)
    li = np.asarray(log_increment, dtype=np.float64)
    num = 2.0 * logsumexp(lw + li)
    den = logsumexp(lw + 2.0 * li)
    return float(np.exp(num - den))


def next_temperature(
    target: TemperingTarget,
    system: WeightedParticleSystem,
    alpha_prev: float,
    schedule: TemperingSchedule,
    log_ratio: np.ndarray | None = None,
) -> float:
    """Next rung of the path, fixed or by relative-CESS bisection."""
    if alpha_prev >= 1.0:
        raise ValueError("the path already reached alpha = 1")
    if schedule.mode == "fixed":
        for a in schedule.ladder:
            if a > alpha_prev:
                return a
        return 1.0
    lr = target.log_ratio(system.values) if log_ratio is None else log_ratio
    finite = np.isfinite(lr) & np.isfinite(system.log_weights)
    if not finite.any():
        return 1.0
    # Constant increments keep the CESS at 1 for every alpha.
    lr_f = lr[finite]
    if np.allclose(lr_f, lr_f[0], rtol=0.0, atol=1e-12):
        return 1.0
    target_val = schedule.target_cess

    def rel_cess_at(alpha: float) -> float:
        return relative_cess(system.log_weights, (alpha - alpha_prev) * lr)

    if rel_cess_at(1.0) >= target_val:
        return 1.0
    lo, hi = alpha_prev, 1.0
    while hi - lo > 1e-6:
        mid = 0.5 * (lo + hi)
        if rel_cess_at(mid) >= target_val:
            lo = mid
        else:
            hi = mid
    return min(0.5 * (lo + hi), 1.0)


def _proposal_cholesky(
    system: WeightedParticleSystem, cont_idx: np.ndarray, config: MoveKernelConfig
) -> np.ndarray:
    d = cont_idx.size
    w = system.normalized_weights()
    x = system.values[:, cont_idx]
    mean = w @ x
    centered = x - mean
    cov = (centered * w[:, None]).T @ centered
    cov = (config.scale_factor**2 / d) * cov + config.cov_regularization * np.eye(d)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.diag(np.sqrt(np.maximum(np.diag(cov), config.cov_regularization)))


def rwm_move(
    system: WeightedParticleSystem,
    log_density: Callable[[np.ndarray], np.ndarray],
    config: MoveKernelConfig,
    rng: np.random.Generator,
    move_mask: np.ndarray | None = None,
    discrete_mask: np.ndarray | None = None,
) -> tuple[WeightedParticleSystem, MoveStats]:
    """Apply n_mcmc_iters Metropolis sweeps; weights are left untouched.

    The proposal scale is computed once from the incoming system and held
    fixed for the sweep, keeping the kernel reversible for
    ``log_density``.
    """
    stats = MoveStats()
    if config.n_mcmc_iters == 0:
        return system, stats
    d = system.dim
    move = np.ones(d, dtype=bool) if move_mask is None else np.asarray(move_mask, bool)
    discrete = (
        np.zeros(d, dtype=bool) if discrete_mask is None else np.asarray(discrete_mask, bool)
    )
    cont_idx = np.flatnonzero(move & ~discrete)
    disc_idx = np.flatnonzero(move & discrete)
    if cont_idx.size == 0 and disc_idx.size == 0:
        return system, stats

    chol = _proposal_cholesky(system, cont_idx, config) if cont_idx.size else None
    values = system.values.copy()
    n = system.n
    logp = np.asarray(log_density(values), dtype=np.float64)

    for _ in range(config.n_mcmc_iters):
        if cont_idx.size:
            prop = values.copy()
            step = rng.standard_normal((n, cont_idx.size)) @ chol.T
            prop[:, cont_idx] += step
            logp_prop = np.asarray(log_density(prop), dtype=np.float64)
            accept = np.log(rng.random(n)) < (logp_prop - logp)
            values[accept] = prop[accept]
            logp[accept] = logp_prop[accept]
            stats.proposed_continuous += n
            stats.accepted_continuous += int(accept.sum())
        if disc_idx.size:
            order = rng.permutation(disc_idx)
            for start in range(0, order.size, config.discrete_block_size):
                block = order[start : start + config.discrete_block_size]
                prop = values.copy()
                prop[:, block] += rng.choice((-1.0, 1.0), size=(n, block.size))
                logp_prop = np.asarray(log_density(prop), dtype=np.float64)
                accept = np.log(rng.random(n)) < (logp_prop - logp)
                values[accept] = prop[accept]
                logp[accept] = logp_prop[accept]
                stats.proposed_discrete += n
                stats.accepted_discrete += int(accept.sum())

    moved = WeightedParticleSystem(values, system.log_weights, system.labels)
    return moved, stats


def smc_sampler(
    target: TemperingTarget,
    init_particles: WeightedParticleSystem,
    schedule: TemperingSchedule,
    kernel_config: MoveKernelConfig,
    resample_scheme: ResampleScheme,
    rng_seed_path: tuple,
    low_acceptance_warn: float = 0.01,
) -> tuple[WeightedParticleSystem, IndexMultiset, SmcDiagnostics]:
    """Run the tempering loop: reweight, optionally resample, move.

    ``init_particles`` must be equally weighted draws from the base
    distribution.  The returned multiset maps every output particle to
    the input particle it descends from, composing all in-run
    resamplings.  Final weights are the post-last-increment weights
    (reset at the last resampling if one occurred).
    """
    import warnings

    from .rng import substream

    if not init_particles.is_equally_weighted():
        raise ValueError("smc_sampler expects equally weighted input particles")
    if init_particles.dim != target.dim:
        raise ValueError("particle dimension does not match the target")

    n = init_particles.n
    values = init_particles.values.copy()
    log_w = np.zeros(n)
    ancestry = IndexMultiset.identity(n)
    diagnostics = SmcDiagnostics()

    alpha = 0.0
    rung = 0
    while alpha < 1.0:
        rung += 1
        if rung > schedule.max_steps:
            raise SmcDegeneracyError(
                f"schedule exceeded max_steps={schedule.max_steps}", alpha
            )
        system = WeightedParticleSystem(values, log_w, target.labels)
        lr = target.log_ratio(values)
        if np.isnan(lr).any():
            raise FloatingPointError("tempering log-ratio evaluated to NaN")
        alpha_next = next_temperature(target, system, alpha, schedule, log_ratio=lr)
        log_w = log_w + (alpha_next - alpha) * lr
        if not np.isfinite(log_w).any():
            raise SmcDegeneracyError("all particle weights vanished", alpha_next)

        ess_val = np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w))
        did_resample = False
        if ess_val / n < resample_scheme.trigger:
            idx = resample_indices(
                log_w, resample_scheme.kind, substream(*rng_seed_path, "resample", rung)
            )
            values = values[idx]
            log_w = np.zeros(n)
            ancestry = IndexMultiset(ancestry.indices[idx], ancestry.n_source)
            did_resample = True

        moved, stats = rwm_move(
            WeightedParticleSystem(values, log_w, target.labels),
            lambda th: tempered_log_density(target, alpha_next, th),
            kernel_config,
            substream(*rng_seed_path, "move", rung),
            move_mask=target.move_mask,
            discrete_mask=target.discrete_mask,
        )
        values = moved.values.copy()
        acc = stats.acceptance_rate
        if np.isfinite(acc) and acc < low_acceptance_warn and kernel_config.n_mcmc_iters > 0:
            warnings.warn(
                f"move acceptance {acc:.3%} below {low_acceptance_warn:.0%} "
                f"at alpha={alpha_next:.4g}",
                stacklevel=2,
            )
        diagnostics.append(alpha_next, ess_val, acc, did_resample)
        alpha = alpha_next

    out = WeightedParticleSystem(values, log_w, target.labels)
    return out, ancestry, diagnostics
