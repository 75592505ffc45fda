"""Analytically tractable Gaussian chain benchmark.

Submodel 1 observes Y_1 ~ N(phi_12, sigma_1^2), interior submodel m
observes Y_m ~ N(phi_{m-1,m} + phi_{m,m+1} + psi_m, sigma_m^2), and
submodel M observes Y_M ~ N(phi_{M-1,M}, sigma_M^2).  Shared blocks and
interior psi's are scalars with Gaussian priors chosen per (submodel,
block), so pooling with unequal priors is exercised and every melded
(sub)posterior is an explicit Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dc import plan_stages
from ..melding import ChainMeldedModel, PooledPriorSpec, PsiProposal, Submodel

__all__ = [
    "GaussianChainSpec",
    "default_gaussian_chain",
    "gaussian_chain_build",
    "gaussian_chain_exact_posterior",
    "gaussian_chain_exact_subposterior",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


def _norm_logpdf(x: np.ndarray, mean, sd) -> np.ndarray:
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI


@dataclass(frozen=True)
class GaussianChainSpec:
    """Data, noise scales, and per-(submodel, block) Gaussian priors.

    ``phi_prior_mean[m-1]`` / ``phi_prior_sd[m-1]`` list the prior
    parameters for submodel m's owned blocks in left-to-right order
    (edges own one block, interiors two).  ``psi_prior_*[k]`` belongs to
    interior submodel k+2.
    """

    M: int
    data: tuple[np.ndarray, ...]
    noise_sd: tuple[float, ...]
    phi_prior_mean: tuple[tuple[float, ...], ...]
    phi_prior_sd: tuple[tuple[float, ...], ...]
    psi_prior_mean: tuple[float, ...]
    psi_prior_sd: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.M < 3:
            raise ValueError("the Gaussian chain needs at least three submodels")
        if not (
            len(self.data) == len(self.noise_sd) == len(self.phi_prior_mean)
            == len(self.phi_prior_sd) == self.M
        ):
            raise ValueError("per-submodel fields must have length M")
        if len(self.psi_prior_mean) != self.M - 2 or len(self.psi_prior_sd) != self.M - 2:
            raise ValueError("need one psi prior per interior submodel")
        for m in range(self.M):
            expected = 1 if m in (0, self.M - 1) else 2
            if len(self.phi_prior_mean[m]) != expected or len(self.phi_prior_sd[m]) != expected:
                raise ValueError(f"submodel {m + 1} owns {expected} block prior(s)")
        if any(s <= 0 for s in self.noise_sd):
            raise ValueError("noise standard deviations must be positive")
        if any(s <= 0 for row in self.phi_prior_sd for s in row) or any(
            s <= 0 for s in self.psi_prior_sd
        ):
            raise ValueError("prior standard deviations must be positive")
        object.__setattr__(self, "data", tuple(np.asarray(y, dtype=np.float64).ravel() for y in self.data))

    def block_prior(self, m: int, b: int) -> tuple[float, float]:
        """Prior (mean, sd) submodel m places on block b (both 1-based)."""
        side = 0 if (m > 1 and b == m - 1) else (0 if m == 1 else 1)
        if m == self.M:
            side = 0
        return self.phi_prior_mean[m - 1][side], self.phi_prior_sd[m - 1][side]


def default_gaussian_chain(
    M: int = 3,
    n_obs: int = 12,
    seed: int = 0,
    noise_sd: float = 0.8,
) -> GaussianChainSpec:
    """Simulate a well-identified chain instance for tests and demos."""
    rng = np.random.default_rng(seed)
    truth_phi = rng.normal(0.0, 1.0, size=M - 1)
    truth_psi = rng.normal(0.0, 1.0, size=M - 2)
    data = []
    for m in range(1, M + 1):
        if m == 1:
            mean = truth_phi[0]
        elif m == M:
            mean = truth_phi[-1]
        else:
            mean = truth_phi[m - 2] + truth_phi[m - 1] + truth_psi[m - 2]
        data.append(mean + noise_sd * rng.standard_normal(n_obs))
    phi_mean = []
    phi_sd = []
    for m in range(1, M + 1):
        k = 1 if m in (1, M) else 2
        # Deliberately unequal priors across the submodels sharing a block.
        phi_mean.append(tuple(0.25 * ((m + j) % 3 - 1) for j in range(k)))
        phi_sd.append(tuple(1.0 + 0.5 * ((m + j) % 2) for j in range(k)))
    return GaussianChainSpec(
        M=M,
        data=tuple(data),
        noise_sd=(noise_sd,) * M,
        phi_prior_mean=tuple(phi_mean),
        phi_prior_sd=tuple(phi_sd),
        psi_prior_mean=(0.0,) * (M - 2),
        psi_prior_sd=(1.5,) * (M - 2),
    )


def _roles_from_plan(M: int) -> tuple[str, ...]:
    stage_one = set(plan_stages(M).stage_one_set)
    return tuple("original" if m in stage_one else "correction" for m in range(1, M + 1))


def gaussian_chain_build(
    spec: GaussianChainSpec,
    lam: tuple[float, ...] | None = None,
    roles: tuple[str, ...] | None = None,
) -> ChainMeldedModel:
    """Assemble the melded model with conjugate-Gaussian callbacks."""
    M = spec.M
    lam = tuple(float(v) for v in (lam if lam is not None else (1.0,) * M))
    roles = roles if roles is not None else _roles_from_plan(M)

    submodels = []
    for m in range(1, M + 1):
        y = spec.data[m - 1]
        sigma = spec.noise_sd[m - 1]
        interior = 1 < m < M
        means = spec.phi_prior_mean[m - 1]
        sds = spec.phi_prior_sd[m - 1]

        def log_phi_prior(phi, _means=means, _sds=sds):
            phi = np.atleast_2d(phi)
            out = np.zeros(phi.shape[0])
            for j, (mu, sd) in enumerate(zip(_means, _sds)):
                out = out + _norm_logpdf(phi[:, j], mu, sd)
            return out

        def lik_mean(phi, psi, _interior=interior):
            phi = np.atleast_2d(phi)
            if _interior:
                return phi[:, 0] + phi[:, 1] + np.atleast_2d(psi)[:, 0]
            return phi[:, 0]

        def log_likelihood(phi, psi, _y=y, _sigma=sigma, _f=lik_mean):
            mean = _f(phi, psi)
            resid = mean[:, None] - _y[None, :]
            return (
                -0.5 * np.sum(resid * resid, axis=1) / (_sigma**2)
                - _y.size * (np.log(_sigma) + 0.5 * _LOG_2PI)
            )

        if interior:
            pm, ps = spec.psi_prior_mean[m - 2], spec.psi_prior_sd[m - 2]

            def log_psi_prior(psi, _pm=pm, _ps=ps):
                return _norm_logpdf(np.atleast_2d(psi)[:, 0], _pm, _ps)

            psi_proposal = PsiProposal(
                sample=lambda phi, rng, _pm=pm, _ps=ps: (
                    _pm + _ps * rng.standard_normal((np.atleast_2d(phi).shape[0], 1))
                ),
                log_density=lambda phi, psi, _pm=pm, _ps=ps: _norm_logpdf(
                    np.atleast_2d(psi)[:, 0], _pm, _ps
                ),
            )

            def log_joint(phi, psi, _lp=log_phi_prior, _lpsi=log_psi_prior, _ll=log_likelihood):
                return _lp(phi) + _lpsi(psi) + _ll(phi, psi)

            psi_mean_fn = lambda phi, _pm=pm: np.full((np.atleast_2d(phi).shape[0], 1), _pm)
            dim_psi = 1
            psi_labels = (f"psi{m}",)
        else:
            log_psi_prior = None
            psi_proposal = PsiProposal(
                sample=lambda phi, rng: np.empty((np.atleast_2d(phi).shape[0], 0)),
                log_density=lambda phi, psi: np.zeros(np.atleast_2d(phi).shape[0]),
            )

            def log_joint(phi, psi, _lp=log_phi_prior, _ll=log_likelihood):
                return _lp(phi) + _ll(phi, psi)

            psi_mean_fn = lambda phi: np.empty((np.atleast_2d(phi).shape[0], 0))
            dim_psi = 0
            psi_labels = ()

        def phi_sampler(n, rng, _means=means, _sds=sds):
            cols = [mu + sd * rng.standard_normal(n) for mu, sd in zip(_means, _sds)]
            return np.column_stack(cols)

        def block_sampler_right(n, rng, _mu=means[-1], _sd=sds[-1]):
            return (_mu + _sd * rng.standard_normal(n))[:, None]

        left_fn = right_fn = None
        if interior:
            left_fn = lambda b, _mu=means[0], _sd=sds[0]: _norm_logpdf(
                np.atleast_2d(b)[:, 0], _mu, _sd
            )
            right_fn = lambda b, _mu=means[1], _sd=sds[1]: _norm_logpdf(
                np.atleast_2d(b)[:, 0], _mu, _sd
            )

        submodels.append(
            Submodel(
                index=m,
                dim_phi_left=0 if m == 1 else 1,
                dim_phi_right=0 if m == M else 1,
                dim_psi=dim_psi,
                log_joint=log_joint,
                log_phi_prior=log_phi_prior,
                log_likelihood=log_likelihood,
                psi_proposal=psi_proposal,
                log_psi_prior=log_psi_prior,
                log_phi_prior_left=left_fn,
                log_phi_prior_right=right_fn,
                phi_prior_sampler=phi_sampler,
                phi_block_sampler_right=block_sampler_right,
                psi_labels=psi_labels,
                psi_prior_mean=psi_mean_fn,
            )
        )

    block_labels = tuple((f"phi{b}_{b + 1}",) for b in range(1, M))
    return ChainMeldedModel(
        submodels=tuple(submodels),
        pooling=PooledPriorSpec(lam=lam, roles=roles),
        block_labels=block_labels,
    )


# ---------------------------------------------------------------------------
# Exact melded (sub)posterior moments


def _pooled_quadratics(
    spec: GaussianChainSpec, lam: tuple[float, ...], roles: tuple[str, ...]
) -> list[list[tuple[float, int, float, float]]]:
    """Per-submodel pooled-prior factors as (coef, block, mean, sd) quadratics.

    Mirrors the decomposition: originals keep their prior with
    coefficient 1, corrections take lambda_m times their own plus the
    (lambda_k - 1)-weighted neighbour deficits routed through each block.
    """
    M = spec.M
    factors: list[list[tuple[float, int, float, float]]] = [[] for _ in range(M + 1)]
    for m in range(1, M + 1):
        own_blocks = [m - 1, m] if 1 < m < M else ([1] if m == 1 else [M - 1])
        role = roles[m - 1]
        if role == "original":
            for b in own_blocks:
                mu, sd = spec.block_prior(m, b)
                factors[m].append((1.0, b, mu, sd))
            deficit = lam[m - 1] - 1.0
        elif role == "flat":
            deficit = lam[m - 1]
        else:
            for b in own_blocks:
                mu, sd = spec.block_prior(m, b)
                factors[m].append((lam[m - 1], b, mu, sd))
            continue
        if deficit == 0.0:
            continue
        for b in own_blocks:
            nb = m - 1 if b == m - 1 else m + 1
            if roles[nb - 1] != "correction":
                raise ValueError(
                    f"submodel {m}'s pooled-prior deficit has no correction neighbour"
                )
            mu, sd = spec.block_prior(m, b)
            factors[nb].append((deficit, b, mu, sd))
    return factors


def _coords(spec: GaussianChainSpec) -> tuple[list[str], dict[str, int]]:
    labels = [f"phi{b}_{b + 1}" for b in range(1, spec.M)] + [
        f"psi{m}" for m in range(2, spec.M)
    ]
    return labels, {lab: i for i, lab in enumerate(labels)}


def gaussian_chain_exact_subposterior(
    spec: GaussianChainSpec,
    lam: tuple[float, ...],
    subset: tuple[int, ...],
    roles: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Exact mean/covariance of a melded subset posterior.

    Assembles the precision matrix and linear term of the quadratic
    log-density (pooled factors + likelihood + psi priors of the subset)
    and solves.  Coordinates not touched by the subset are dropped.
    """
    M = spec.M
    roles = roles if roles is not None else _roles_from_plan(M)
    lam = tuple(float(v) for v in lam)
    labels, pos = _coords(spec)
    D = len(labels)
    P = np.zeros((D, D))
    b_vec = np.zeros(D)
    touched: set[int] = set()
    factors = _pooled_quadratics(spec, lam, roles)

    def add_gaussian(i: int, mu: float, sd: float, coef: float = 1.0) -> None:
        prec = coef / sd**2
        P[i, i] += prec
        b_vec[i] += prec * mu
        touched.add(i)

    subset = sorted(set(subset))
    for m in subset:
        for coef, blk, mu, sd in factors[m]:
            add_gaussian(pos[f"phi{blk}_{blk + 1}"], mu, sd, coef)
        # Likelihood quadratic.
        y = spec.data[m - 1]
        prec = y.size / spec.noise_sd[m - 1] ** 2
        ysum_prec = y.sum() / spec.noise_sd[m - 1] ** 2
        if m == 1:
            i = pos["phi1_2"]
            P[i, i] += prec
            b_vec[i] += ysum_prec
            touched.add(i)
        elif m == M:
            i = pos[f"phi{M - 1}_{M}"]
            P[i, i] += prec
            b_vec[i] += ysum_prec
            touched.add(i)
        else:
            idx = [pos[f"phi{m - 1}_{m}"], pos[f"phi{m}_{m + 1}"], pos[f"psi{m}"]]
            for a in idx:
                for c in idx:
                    P[a, c] += prec
                b_vec[a] += ysum_prec
                touched.update(idx)
            add_gaussian(pos[f"psi{m}"], spec.psi_prior_mean[m - 2], spec.psi_prior_sd[m - 2])

    keep = sorted(touched)
    P_k = P[np.ix_(keep, keep)]
    try:
        cov = np.linalg.inv(P_k)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular melded precision matrix") from exc
    mean = cov @ b_vec[keep]
    return mean, cov, tuple(labels[i] for i in keep)


def gaussian_chain_exact_posterior(
    spec: GaussianChainSpec,
    lam: tuple[float, ...],
    roles: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Exact mean/covariance of the full melded posterior."""
    return gaussian_chain_exact_subposterior(
        spec, lam, tuple(range(1, spec.M + 1)), roles=roles
    )
