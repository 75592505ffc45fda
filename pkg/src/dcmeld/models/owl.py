"""Little-owl integrated population model as a three-submodel chain.

Submodel 1 is a capture-recapture model (multinomial rows over first
recapture times), submodel 2 a latent count model (Poisson/Binomial
population dynamics with Poisson observation), and submodel 3 a Poisson
fecundity model.  Shared blocks: (alpha0, alpha2) between submodels 1
and 2, rho between 2 and 3.  With logarithmic pooling weights (1/2,
1/2, 1/2) the melded posterior coincides with the joint posterior of
the single integrated model, which the structural tests verify.

Data are stratified by age a in {J, A} and sex s in {M, F}; time runs
t = 1..T.  All densities are batched over particles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln, ndtr

from ..melding import ChainMeldedModel, PooledPriorSpec, PsiProposal, Submodel

__all__ = [
    "STRATA",
    "OwlData",
    "OwlTruth",
    "owl_link",
    "owl_Q",
    "owl_capture_loglik",
    "owl_count_loglik",
    "owl_fecundity_loglik",
    "owl_build",
    "owl_param_labels",
    "simulate_owl_data",
    "write_owl_data",
    "load_owl_data",
]

STRATA: tuple[tuple[str, str], ...] = (("J", "M"), ("J", "F"), ("A", "M"), ("A", "F"))

_ALPHA_SD = 2.0
_ALPHA_BOUND = 10.0
_RHO_HI = 10.0
# Normalizer of N(0, 2^2) truncated to [-10, 10].
_TRUNC_LOG_Z = float(
    np.log(ndtr(_ALPHA_BOUND / _ALPHA_SD) - ndtr(-_ALPHA_BOUND / _ALPHA_SD))
)
_LOG_2PI = float(np.log(2.0 * np.pi))


def _trunc_normal_logpdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = (
        -0.5 * (x / _ALPHA_SD) ** 2
        - np.log(_ALPHA_SD)
        - 0.5 * _LOG_2PI
        - _TRUNC_LOG_Z
    )
    return np.where(np.abs(x) <= _ALPHA_BOUND, out, -np.inf)


def _trunc_normal_sample(shape, rng: np.random.Generator) -> np.ndarray:
    out = _ALPHA_SD * rng.standard_normal(shape)
    bad = np.abs(out) > _ALPHA_BOUND
    while bad.any():
        out[bad] = _ALPHA_SD * rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > _ALPHA_BOUND
    return out


def _rho_logpdf(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return np.where((rho > 0.0) & (rho < _RHO_HI), -np.log(_RHO_HI), -np.inf)


def _poisson_logpmf(k: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Poisson log-pmf with a point mass at zero when the mean is zero."""
    k = np.asarray(k, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    valid = (k >= 0) & (k == np.floor(k))
    kc = np.where(valid, k, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(
            mean > 0,
            kc * np.log(np.where(mean > 0, mean, 1.0)) - mean - gammaln(kc + 1.0),
            np.where(kc == 0, 0.0, -np.inf),
        )
    return np.where(valid, out, -np.inf)


def _binom_logpmf(k: np.ndarray, n: np.ndarray, p: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    valid = (k >= 0) & (k <= n) & (k == np.floor(k)) & (n >= 0) & (n == np.floor(n))
    kc = np.where(valid, k, 0.0)
    nc = np.where(valid, n, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            gammaln(nc + 1.0)
            - gammaln(kc + 1.0)
            - gammaln(nc - kc + 1.0)
            + kc * np.log(np.where(p > 0, p, 1.0))
            + (nc - kc) * np.log(np.where(p < 1, 1.0 - p, 1.0))
        )
        out = np.where((p <= 0) & (kc > 0), -np.inf, out)
        out = np.where((p >= 1) & (kc < nc), -np.inf, out)
    return np.where(valid, out, -np.inf)


def _invlogit(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Data containers


@dataclass(frozen=True)
class OwlData:
    """Capture matrices, population counts, and fecundity counts.

    ``capture[(a, s)]`` is a T x (T+1) integer matrix of first-recapture
    counts (column T indexes "never recaptured"); ``counts`` holds the
    annual population counts y_t; ``n_breeding``/``n_chicks`` the
    fecundity data (named to avoid clashing with particle counts).
    """

    T: int
    capture: dict[tuple[str, str], np.ndarray]
    counts: np.ndarray
    n_breeding: np.ndarray
    n_chicks: np.ndarray

    def __post_init__(self) -> None:
        capture = {}
        for key in STRATA:
            mat = np.asarray(self.capture[key], dtype=np.int64)
            if mat.shape != (self.T, self.T + 1):
                raise ValueError(f"capture matrix {key} must be T x (T+1)")
            if (mat < 0).any():
                raise ValueError("capture counts must be nonnegative")
            for t in range(self.T):
                if mat[t, : t + 1].any():
                    raise ValueError(
                        f"capture matrix {key}: recaptures at or before release time {t + 1}"
                    )
            capture[key] = mat
        counts = np.asarray(self.counts, dtype=np.int64)
        n_br = np.asarray(self.n_breeding, dtype=np.int64)
        n_ch = np.asarray(self.n_chicks, dtype=np.int64)
        for name, arr in (("counts", counts), ("n_breeding", n_br), ("n_chicks", n_ch)):
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have length T")
            if (arr < 0).any():
                raise ValueError(f"{name} must be nonnegative")
        object.__setattr__(self, "capture", capture)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "n_breeding", n_br)
        object.__setattr__(self, "n_chicks", n_ch)

    def releases(self, key: tuple[str, str]) -> np.ndarray:
        return self.capture[key].sum(axis=1)


@dataclass(frozen=True)
class OwlTruth:
    """Generating parameters for the synthetic data simulator."""

    alpha0: float = -0.85
    alpha1: float = -0.2
    alpha2: float = 1.25
    alpha4: float = 0.3
    alpha5: float = 0.2  # broadcast over u = 2..T
    alpha6: float = -1.5
    rho: float = 1.5

    def as_dict(self) -> dict:
        return {
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "alpha4": self.alpha4,
            "alpha5": self.alpha5,
            "alpha6": self.alpha6,
            "rho": self.rho,
        }


# ---------------------------------------------------------------------------
# Links and likelihood pieces


def owl_link(
    alpha0: np.ndarray,
    alpha1: np.ndarray,
    alpha2: np.ndarray,
    alpha4: np.ndarray,
    alpha5: np.ndarray,
    alpha6: np.ndarray,
    T: int,
) -> tuple[dict[tuple[str, str], np.ndarray], dict[str, np.ndarray], np.ndarray]:
    """Survival, recapture, and immigration rates from the link scales.

    survival  delta_{a,s} = invlogit(alpha0 + alpha1*1[s=M] + alpha2*1[a=A])
    recapture pi_{s,u}    = invlogit(alpha4*1[s=M] + alpha5_u), u = 2..T
    immigration eta       = exp(alpha6)

    ``alpha5`` has T-1 columns for u = 2..T; the returned ``pi[s]`` has T
    columns indexed u-1 with the (never used) u = 1 column set to zero.
    """
    alpha0 = np.atleast_1d(np.asarray(alpha0, dtype=np.float64))
    n = alpha0.shape[0]
    alpha5 = np.atleast_2d(np.asarray(alpha5, dtype=np.float64))
    if alpha5.shape != (n, T - 1):
        raise ValueError(f"alpha5 must have shape (n, T-1), got {alpha5.shape}")
    delta = {}
    for a, s in STRATA:
        lin = alpha0 + np.asarray(alpha1) * (s == "M") + np.asarray(alpha2) * (a == "A")
        delta[(a, s)] = _invlogit(lin)
    pi = {}
    for s in ("M", "F"):
        lin = np.asarray(alpha4)[..., None] * (s == "M") + alpha5
        pi_s = np.zeros((n, T))
        pi_s[:, 1:] = _invlogit(lin)
        pi[s] = pi_s
    eta = np.exp(np.asarray(alpha6, dtype=np.float64))
    return delta, pi, eta


def owl_Q(delta: np.ndarray, pi: np.ndarray, T: int) -> np.ndarray:
    """First-recapture probability matrix for one (age, sex) stratum.

    ``delta`` is the stratum's (time-constant) survival, ``pi`` its
    recapture probabilities with T columns (u = 1..T; column 0 unused).
    Rows are release times t = 1..T; columns 1..T are recapture times
    with Q[t, u] = delta^(u-t) * pi_u * prod_{r=t+1}^{u-1} (1 - pi_r),
    and column T+1 holds the never-recaptured complement so every row
    sums to one exactly.
    """
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    pi = np.asarray(pi, dtype=np.float64)
    squeeze = pi.ndim == 1
    pi = np.atleast_2d(pi)
    n = delta.shape[0]
    if pi.shape != (n, T):
        raise ValueError(f"pi must have shape (n, T), got {pi.shape}")
    log_delta = np.log(delta)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
        log_1m = np.log1p(-pi)
    # cum[:, r-1] = sum_{r'=2}^{r} log(1 - pi_{r'}), cum[:, 0] = 0.
    cum = np.concatenate(
        [np.zeros((n, 1)), np.cumsum(log_1m[:, 1:], axis=1)], axis=1
    )
    t_idx = np.arange(1, T + 1)
    u_idx = np.arange(1, T + 1)
    steps = u_idx[None, :] - t_idx[:, None]  # u - t
    # C[u-1] gathered per column; the u = 1 column is masked out below.
    cum_u = cum[:, np.maximum(u_idx - 2, 0)]
    logq = (
        log_delta[:, None, None] * steps[None, :, :]
        + log_pi[:, None, :]
        + cum_u[:, None, :]
        - cum[:, t_idx - 1, None]
    )
    Q = np.zeros((n, T, T + 1))
    mask = steps > 0
    Q[:, :, :T] = np.where(mask[None, :, :], np.exp(logq), 0.0)
    never = 1.0 - Q[:, :, :T].sum(axis=2)
    if (never < -1e-9).any():
        raise AssertionError("negative never-recaptured mass")
    Q[:, :, T] = np.clip(never, 0.0, 1.0)
    return Q[0] if squeeze else Q


def owl_capture_loglik(data: OwlData, delta: dict, pi: dict) -> np.ndarray:
    """Multinomial log-likelihood over all strata and release times.

    The multinomial coefficient is constant in the parameters and
    dropped.  A positive count in a zero-probability cell yields -inf.
    """
    T = data.T
    n = np.atleast_1d(next(iter(delta.values()))).shape[0]
    total = np.zeros(n)
    for key in STRATA:
        counts = data.capture[key]
        if not counts.any():
            continue
        Q = owl_Q(np.atleast_1d(delta[key]), np.atleast_2d(pi[key[1]]), T)
        ti, ui = np.nonzero(counts)
        cell = Q[:, ti, ui]
        logcell = np.where(cell > 0, np.log(np.where(cell > 0, cell, 1.0)), -np.inf)
        total = total + np.sum(counts[ti, ui][None, :] * logcell, axis=1)
    return total


def owl_count_loglik(
    y: np.ndarray,
    latents: np.ndarray,
    delta_jf: np.ndarray,
    delta_af: np.ndarray,
    rho: np.ndarray,
    eta: np.ndarray,
    T: int,
    include_transitions: bool = True,
    include_observation: bool = True,
    include_initial: bool = True,
) -> np.ndarray:
    """Count-model log-density of the latent path and (optionally) counts.

    ``latents`` columns: [xJ_1, xA_1, (xJ_t, surv_t, imm_t) for t=2..T].
    Initial sizes have discrete-uniform {0..50} priors; transitions are
    xJ_t ~ Pois(x_{t-1} rho/2 delta_JF), surv_t ~ Bin(x_{t-1}, delta_AF),
    imm_t ~ Pois(x_{t-1} eta); observation y_t ~ Pois(x_t) with
    x_t = xJ_t + surv_t + imm_t.  A zero population places point mass on
    zero offspring/survivors/immigrants.  Violations return -inf rather
    than raising; proposals are allowed to step outside the support.
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    n = latents.shape[0]
    if latents.shape[1] != 2 + 3 * (T - 1):
        raise ValueError(f"latents must have 2 + 3(T-1) columns, got {latents.shape[1]}")
    xj = np.empty((n, T))
    xa = np.empty((n, T))
    xj[:, 0] = latents[:, 0]
    xa[:, 0] = latents[:, 1]
    surv = latents[:, 3::3]
    imm = latents[:, 4::3]
    xj[:, 1:] = latents[:, 2::3]
    xa[:, 1:] = surv + imm
    x = xj + xa

    total = np.zeros(n)
    if include_initial:
        for init in (xj[:, 0], xa[:, 0]):
            ok = (init >= 0) & (init <= 50) & (init == np.floor(init))
            total = total + np.where(ok, -np.log(51.0), -np.inf)
    if include_transitions:
        xprev = x[:, :-1]
        mean_j = xprev * (rho[:, None] / 2.0) * delta_jf[:, None]
        total = total + _poisson_logpmf(xj[:, 1:], mean_j).sum(axis=1)
        total = total + _binom_logpmf(surv, xprev, np.broadcast_to(
            delta_af[:, None], xprev.shape
        )).sum(axis=1)
        total = total + _poisson_logpmf(imm, xprev * eta[:, None]).sum(axis=1)
    if include_observation:
        total = total + _poisson_logpmf(
            np.broadcast_to(np.asarray(y, dtype=np.float64)[None, :], x.shape), x
        ).sum(axis=1)
    return total


def owl_fecundity_loglik(
    n_breeding: np.ndarray, n_chicks: np.ndarray, rho: np.ndarray
) -> np.ndarray:
    """Poisson log-likelihood of chick counts with means N_br * rho."""
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    mean = n_breeding[None, :] * rho[:, None]
    k = np.broadcast_to(np.asarray(n_chicks, dtype=np.float64)[None, :], mean.shape)
    return _poisson_logpmf(k, mean).sum(axis=1)


# ---------------------------------------------------------------------------
# Parameter layout


def owl_param_labels(T: int) -> dict[str, tuple[str, ...]]:
    psi1 = ("alpha1", "alpha4") + tuple(f"alpha5_{u}" for u in range(2, T + 1))
    psi2 = ("alpha6", "xJ_1", "xA_1") + tuple(
        f"{name}_{t}" for t in range(2, T + 1) for name in ("xJ", "surv", "imm")
    )
    return {
        "block1": ("alpha0", "alpha2"),
        "block2": ("rho",),
        "psi1": psi1,
        "psi2": psi2,
        "psi3": (),
    }


def _feasible_latent_path(
    y: np.ndarray,
    delta_jf: np.ndarray,
    delta_af: np.ndarray,
    rho: np.ndarray,
    eta: np.ndarray,
    T: int,
) -> np.ndarray:
    """Deterministic integer path matching the counts, finite under the prior.

    x_t tracks max(y_t, 1); each step splits the target between
    offspring, survivors, and immigrants proportionally to their expected
    shares, honouring surv_t <= x_{t-1} and nonnegativity.
    """
    n = delta_jf.shape[0]
    latents = np.zeros((n, 2 + 3 * (T - 1)))
    target = np.maximum(np.asarray(y, dtype=np.float64), 1.0)
    rate_j = (rho / 2.0) * delta_jf
    share = rate_j / np.maximum(rate_j + delta_af + eta, 1e-12)
    xj = np.clip(np.round(target[0] * share), 0, 50)
    xa = np.clip(target[0] - xj, 0, 50)
    latents[:, 0] = xj
    latents[:, 1] = xa
    xprev = xj + xa
    for t in range(1, T):
        e_j = xprev * rate_j
        e_s = xprev * delta_af
        e_i = xprev * eta
        total = np.maximum(e_j + e_s + e_i, 1e-12)
        scale = target[t] / total
        xj_t = np.round(scale * e_j)
        surv_t = np.minimum(np.round(scale * e_s), xprev)
        imm_t = np.maximum(target[t] - xj_t - surv_t, 0.0)
        latents[:, 2 + 3 * (t - 1)] = xj_t
        latents[:, 3 + 3 * (t - 1)] = surv_t
        latents[:, 4 + 3 * (t - 1)] = imm_t
        xprev = xj_t + surv_t + imm_t
    return latents


# ---------------------------------------------------------------------------
# Model assembly


def owl_build(data: OwlData, lam: tuple[float, float, float] = (0.5, 0.5, 0.5)) -> ChainMeldedModel:
    """Assemble the three-submodel chain with the documented priors.

    Roles are (original, correction, original); with lam = (1/2, 1/2,
    1/2) the melded joint equals the single integrated model's joint up
    to a constant.
    """
    T = data.T
    labels = owl_param_labels(T)

    def split1(phi):
        phi = np.atleast_2d(phi)
        return phi[:, 0], phi[:, 1]

    # --- submodel 1: capture-recapture -------------------------------
    def p1_phi_prior(phi):
        a0, a2 = split1(phi)
        return _trunc_normal_logpdf(a0) + _trunc_normal_logpdf(a2)

    def p1_psi_prior(psi):
        psi = np.atleast_2d(psi)
        return _trunc_normal_logpdf(psi).sum(axis=1)

    def p1_likelihood(phi, psi):
        phi = np.atleast_2d(phi)
        psi = np.atleast_2d(psi)
        delta, pi, _ = owl_link(
            phi[:, 0], psi[:, 0], phi[:, 1], psi[:, 1], psi[:, 2:],
            np.zeros(phi.shape[0]), T,
        )
        return owl_capture_loglik(data, delta, pi)

    def p1_joint(phi, psi):
        return p1_phi_prior(phi) + p1_psi_prior(psi) + p1_likelihood(phi, psi)

    p1_proposal = PsiProposal(
        sample=lambda phi, rng: _trunc_normal_sample(
            (np.atleast_2d(phi).shape[0], 1 + T), rng
        ),
        log_density=lambda phi, psi: p1_psi_prior(psi),
    )

    sub1 = Submodel(
        index=1,
        dim_phi_left=0,
        dim_phi_right=2,
        dim_psi=1 + T,
        log_joint=p1_joint,
        log_phi_prior=p1_phi_prior,
        log_likelihood=p1_likelihood,
        psi_proposal=p1_proposal,
        log_psi_prior=p1_psi_prior,
        phi_prior_sampler=lambda n, rng: _trunc_normal_sample((n, 2), rng),
        phi_block_sampler_right=lambda n, rng: _trunc_normal_sample((n, 2), rng),
        log_phi_prior_right=p1_phi_prior,
        psi_labels=labels["psi1"],
        psi_prior_mean=lambda phi: np.zeros((np.atleast_2d(phi).shape[0], 1 + T)),
    )

    # --- submodel 2: latent count model ------------------------------
    def p2_phi_prior(phi):
        phi = np.atleast_2d(phi)
        return (
            _trunc_normal_logpdf(phi[:, 0])
            + _trunc_normal_logpdf(phi[:, 1])
            + _rho_logpdf(phi[:, 2])
        )

    def _p2_rates(phi):
        phi = np.atleast_2d(phi)
        return _invlogit(phi[:, 0]), _invlogit(phi[:, 0] + phi[:, 1]), phi[:, 2]

    def p2_psi_cond_prior(phi, psi):
        psi = np.atleast_2d(psi)
        dj, da, rho = _p2_rates(phi)
        return _trunc_normal_logpdf(psi[:, 0]) + owl_count_loglik(
            data.counts, psi[:, 1:], dj, da, rho, np.exp(psi[:, 0]), T,
            include_observation=False,
        )

    def p2_likelihood(phi, psi):
        psi = np.atleast_2d(psi)
        dj, da, rho = _p2_rates(phi)
        return owl_count_loglik(
            data.counts, psi[:, 1:], dj, da, rho, np.exp(psi[:, 0]), T,
            include_transitions=False, include_initial=False,
        )

    def p2_joint(phi, psi):
        psi = np.atleast_2d(psi)
        dj, da, rho = _p2_rates(phi)
        return (
            p2_phi_prior(phi)
            + _trunc_normal_logpdf(psi[:, 0])
            + owl_count_loglik(data.counts, psi[:, 1:], dj, da, rho, np.exp(psi[:, 0]), T)
        )

    def p2_psi_sample(phi, rng):
        """Exact draw from the conditional prior: alpha6 plus a simulated path."""
        phi = np.atleast_2d(phi)
        n = phi.shape[0]
        alpha6 = _trunc_normal_sample((n, 1), rng)
        dj, da, rho = _p2_rates(phi)
        eta = np.exp(alpha6[:, 0])
        latents = np.zeros((n, 2 + 3 * (T - 1)))
        latents[:, 0] = rng.integers(0, 51, size=n)
        latents[:, 1] = rng.integers(0, 51, size=n)
        xprev = latents[:, 0] + latents[:, 1]
        for t in range(1, T):
            # Populations explode for extreme eta prior draws; such paths
            # carry ~exp(-1e6) posterior weight, so capping them changes
            # nothing the weights can see while keeping the rates drawable.
            xprev = np.minimum(xprev, 1e6)
            xj = rng.poisson(xprev * (rho / 2.0) * dj)
            surv = rng.binomial(xprev.astype(np.int64), da)
            imm = rng.poisson(xprev * eta)
            latents[:, 2 + 3 * (t - 1)] = xj
            latents[:, 3 + 3 * (t - 1)] = surv
            latents[:, 4 + 3 * (t - 1)] = imm
            xprev = xj + surv + imm
        return np.concatenate([alpha6, latents], axis=1)

    def p2_psi_init(phi, rng):
        """Feasible deterministic path for MCMC starts; tracks the counts."""
        phi = np.atleast_2d(phi)
        alpha6 = _trunc_normal_sample((phi.shape[0], 1), rng)
        dj, da, rho = _p2_rates(phi)
        path = _feasible_latent_path(data.counts, dj, da, rho, np.exp(alpha6[:, 0]), T)
        return np.concatenate([alpha6, path], axis=1)

    p2_proposal = PsiProposal(sample=p2_psi_sample, log_density=p2_psi_cond_prior)

    def p2_psi_mean(phi):
        phi = np.atleast_2d(phi)
        dj, da, rho = _p2_rates(phi)
        path = _feasible_latent_path(
            data.counts, dj, da, rho, np.full(phi.shape[0], np.exp(0.0)), T
        )
        return np.concatenate([np.zeros((phi.shape[0], 1)), path], axis=1)

    psi2_dim = 3 + 3 * (T - 1)
    sub2 = Submodel(
        index=2,
        dim_phi_left=2,
        dim_phi_right=1,
        dim_psi=psi2_dim,
        log_joint=p2_joint,
        log_phi_prior=p2_phi_prior,
        log_likelihood=p2_likelihood,
        psi_proposal=p2_proposal,
        log_psi_prior=None,
        log_phi_prior_left=lambda b: _trunc_normal_logpdf(np.atleast_2d(b)[:, 0])
        + _trunc_normal_logpdf(np.atleast_2d(b)[:, 1]),
        log_phi_prior_right=lambda b: _rho_logpdf(np.atleast_2d(b)[:, 0]),
        phi_prior_sampler=lambda n, rng: np.concatenate(
            [_trunc_normal_sample((n, 2), rng), rng.uniform(0, _RHO_HI, (n, 1))], axis=1
        ),
        phi_block_sampler_right=lambda n, rng: rng.uniform(0, _RHO_HI, (n, 1)),
        psi_labels=labels["psi2"],
        psi_discrete_mask=np.array([False] + [True] * (psi2_dim - 1)),
        psi_prior_mean=p2_psi_mean,
        psi_init_sampler=p2_psi_init,
    )

    # --- submodel 3: fecundity ----------------------------------------
    def p3_phi_prior(phi):
        return _rho_logpdf(np.atleast_2d(phi)[:, 0])

    def p3_likelihood(phi, psi):
        return owl_fecundity_loglik(
            data.n_breeding, data.n_chicks, np.atleast_2d(phi)[:, 0]
        )

    def p3_joint(phi, psi):
        return p3_phi_prior(phi) + p3_likelihood(phi, psi)

    sub3 = Submodel(
        index=3,
        dim_phi_left=1,
        dim_phi_right=0,
        dim_psi=0,
        log_joint=p3_joint,
        log_phi_prior=p3_phi_prior,
        log_likelihood=p3_likelihood,
        psi_proposal=PsiProposal(
            sample=lambda phi, rng: np.empty((np.atleast_2d(phi).shape[0], 0)),
            log_density=lambda phi, psi: np.zeros(np.atleast_2d(phi).shape[0]),
        ),
        phi_prior_sampler=lambda n, rng: rng.uniform(0, _RHO_HI, (n, 1)),
        psi_labels=(),
        psi_prior_mean=lambda phi: np.empty((np.atleast_2d(phi).shape[0], 0)),
    )

    return ChainMeldedModel(
        submodels=(sub1, sub2, sub3),
        pooling=PooledPriorSpec(lam=tuple(lam), roles=("original", "correction", "original")),
        block_labels=(labels["block1"], labels["block2"]),
    )


# ---------------------------------------------------------------------------
# Synthetic data


def simulate_owl_data(
    truth: OwlTruth,
    seed: int,
    T: int = 25,
    releases: int = 40,
    init_sizes: tuple[int, int] = (12, 25),
) -> OwlData:
    """Simulate all three datasets from the model at the given truth."""
    rng = np.random.default_rng(seed)
    alpha5 = np.full((1, T - 1), truth.alpha5)
    delta, pi, eta = owl_link(
        np.array([truth.alpha0]), truth.alpha1, truth.alpha2, truth.alpha4,
        alpha5, np.array([truth.alpha6]), T,
    )
    capture = {}
    for key in STRATA:
        Q = owl_Q(delta[key], pi[key[1]], T)[0]
        mat = np.zeros((T, T + 1), dtype=np.int64)
        for t in range(T):
            r = int(rng.poisson(releases))
            if r > 0:
                mat[t] = rng.multinomial(r, Q[t])
        capture[key] = mat

    dj = float(delta[("J", "F")][0])
    da = float(delta[("A", "F")][0])
    eta_v = float(eta[0])
    xj, xa = init_sizes
    counts = np.zeros(T, dtype=np.int64)
    n_breeding = np.zeros(T, dtype=np.int64)
    n_chicks = np.zeros(T, dtype=np.int64)
    x = xj + xa
    for t in range(T):
        if t > 0:
            xj = int(rng.poisson(x * truth.rho / 2.0 * dj)) if x > 0 else 0
            surv = int(rng.binomial(x, da)) if x > 0 else 0
            imm = int(rng.poisson(x * eta_v)) if x > 0 else 0
            x = xj + surv + imm
        counts[t] = rng.poisson(x)
        n_breeding[t] = rng.poisson(max(0.5 * x, 1.0))
        n_chicks[t] = rng.poisson(n_breeding[t] * truth.rho)
    return OwlData(
        T=T, capture=capture, counts=counts, n_breeding=n_breeding, n_chicks=n_chicks
    )


def write_owl_data(data: OwlData, directory, truth: OwlTruth | None = None) -> None:
    """Write capture_<a>_<s>.csv, counts.csv, fecundity.csv (+ truth.json)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (a, s), mat in data.capture.items():
        np.savetxt(directory / f"capture_{a}_{s}.csv", mat, fmt="%d", delimiter=",")
    with open(directory / "counts.csv", "w") as fh:
        fh.write("t,y\n")
        for t, y in enumerate(data.counts, start=1):
            fh.write(f"{t},{y}\n")
    with open(directory / "fecundity.csv", "w") as fh:
        fh.write("t,N_br,n_ch\n")
        for t in range(data.T):
            fh.write(f"{t + 1},{data.n_breeding[t]},{data.n_chicks[t]}\n")
    if truth is not None:
        with open(directory / "truth.json", "w") as fh:
            json.dump(truth.as_dict(), fh, indent=2, sort_keys=True)


def load_owl_data(directory) -> OwlData:
    directory = Path(directory)
    capture = {}
    for a, s in STRATA:
        capture[(a, s)] = np.loadtxt(
            directory / f"capture_{a}_{s}.csv", dtype=np.int64, delimiter=","
        )
    T = capture[STRATA[0]].shape[0]
    counts = np.zeros(T, dtype=np.int64)
    with open(directory / "counts.csv") as fh:
        fh.readline()
        for line in fh:
            t, y = line.strip().split(",")
            counts[int(t) - 1] = int(y)
    n_br = np.zeros(T, dtype=np.int64)
    n_ch = np.zeros(T, dtype=np.int64)
    with open(directory / "fecundity.csv") as fh:
        fh.readline()
        for line in fh:
            t, nb, nc = line.strip().split(",")
            n_br[int(t) - 1] = int(nb)
            n_ch[int(t) - 1] = int(nc)
    return OwlData(T=T, capture=capture, counts=counts, n_breeding=n_br, n_chicks=n_ch)
