"""Chain-melded models: pooled priors and melded log-densities.

A chain of M submodels shares parameter blocks pairwise: submodel m sees
the blocks phi_{m-1,m} and phi_{m,m+1} plus its own psi_m.  The melded
joint multiplies a pooled prior over the shared blocks with each
submodel's joint divided by its marginal prior on its shared blocks.
Only logarithmic pooling is built in; the pooling callback is pluggable.

All densities are unnormalized log-densities operating on batches: a
callback receives one or more ``(n, d)`` arrays and returns an ``(n,)``
array.  ``-inf`` marks points outside support; NaN is an error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Submodel",
    "PooledPriorSpec",
    "ChainMeldedModel",
    "PsiProposal",
    "log_pooled_prior",
    "decompose_pooled_prior",
    "log_melded_joint",
    "log_melded_subset",
    "melded_term",
]


def melded_term(pool: np.ndarray, joint: np.ndarray, phi_prior: np.ndarray) -> np.ndarray:
    """One submodel's melded factor log(pool_m * joint_m / phi_prior_m).

    Computed by log subtraction; a point outside the support of any
    ingredient yields -inf rather than NaN (-inf minus -inf is read as
    "outside support", never as an indeterminate form).
    """
    with np.errstate(invalid="ignore"):
        out = pool + joint - phi_prior
    bad = ~(np.isfinite(pool) & np.isfinite(joint) & np.isfinite(phi_prior))
    return np.where(bad, -np.inf, out)

BatchDensity = Callable[..., np.ndarray]


@dataclass(frozen=True)
class PsiProposal:
    """Sampler and log-density for q(psi_m | phi_m).

    ``sample(phi, rng) -> (n, dim_psi)`` and
    ``log_density(phi, psi) -> (n,)``.  For submodels whose psi has no
    direct dependence on phi this is simply the (artificial) psi prior.
    """

    sample: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    log_density: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _zero_density(*arrays: np.ndarray) -> np.ndarray:
    return np.zeros(np.atleast_2d(arrays[0]).shape[0])


@dataclass(frozen=True)
class Submodel:
    """One link of the chain with its data bound in.

    ``log_joint(phi, psi)`` is log p_m(phi_m, psi_m, Y_m);
    ``log_phi_prior(phi)`` the marginal prior on the shared blocks;
    ``log_likelihood(phi, psi)`` is log p_m(Y_m | phi_m, psi_m).
    ``phi`` concatenates the left and right blocks of this submodel.
    """

    index: int
    dim_phi_left: int
    dim_phi_right: int
    dim_psi: int
    log_joint: BatchDensity
    log_phi_prior: BatchDensity
    log_likelihood: BatchDensity
    psi_proposal: PsiProposal | None = None
    log_psi_prior: BatchDensity | None = None
    # Optional per-block factors of log_phi_prior, needed when this
    # submodel keeps its original prior under pooling weights != 1 and
    # a correction neighbour must absorb the per-block deficit.
    log_phi_prior_left: BatchDensity | None = None
    log_phi_prior_right: BatchDensity | None = None
    # Samplers for stage-one initialisation and the even-M center block.
    phi_prior_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None
    phi_block_sampler_right: Callable[[int, np.random.Generator], np.ndarray] | None = None
    psi_labels: tuple[str, ...] = ()
    psi_discrete_mask: np.ndarray | None = None
    psi_prior_mean: Callable[[np.ndarray], np.ndarray] | None = None
    # Optional MCMC starting-point sampler (defaults to psi_proposal.sample);
    # models with awkward latent supports provide a feasible construction.
    psi_init_sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None

    @property
    def dim_phi(self) -> int:
        return self.dim_phi_left + self.dim_phi_right

    def __post_init__(self) -> None:
        if self.dim_psi and len(self.psi_labels) not in (0, self.dim_psi):
            raise ValueError(f"submodel {self.index}: psi_labels/dim_psi mismatch")
        if not self.psi_labels and self.dim_psi:
            object.__setattr__(
                self,
                "psi_labels",
                tuple(f"psi{self.index}[{k}]" for k in range(self.dim_psi)),
            )


@dataclass(frozen=True)
class PooledPriorSpec:
    """Logarithmic-pooling weights and the per-submodel decomposition roles.

    Roles: ``original`` keeps the submodel's own marginal prior as its
    pooled factor, ``correction`` absorbs whatever makes the product of
    factors equal the pooled prior, and ``flat`` contributes a constant.
    """

    lam: tuple[float, ...]
    roles: tuple[str, ...]

    def __post_init__(self) -> None:
        lam = tuple(float(v) for v in self.lam)
        roles = tuple(self.roles)
        if len(lam) != len(roles):
            raise ValueError("lambda and roles must have equal length")
        if any(v < 0 for v in lam):
            raise ValueError("pooling weights must be nonnegative")
        for r in roles:
            if r not in ("original", "correction", "flat"):
                raise ValueError(f"unknown decomposition role {r!r}")
        if sum(lam) < 1.0:
            warnings.warn(
                "pooling weights sum to less than 1; the pooled prior may be improper",
                stacklevel=3,
            )
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "roles", roles)


@dataclass(frozen=True)
class ChainMeldedModel:
    """M >= 3 submodels chained through shared phi blocks, plus pooling."""

    submodels: tuple[Submodel, ...]
    pooling: PooledPriorSpec
    block_labels: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self) -> None:
        submodels = tuple(self.submodels)
        if len(submodels) < 3:
            raise ValueError("a chain-melded model needs at least three submodels")
        if len(self.pooling.lam) != len(submodels):
            raise ValueError(
                f"pooling weights have length {len(self.pooling.lam)} "
                f"but there are {len(submodels)} submodels"
            )
        if submodels[0].dim_phi_left != 0:
            raise ValueError("submodel 1 has no left block")
        if submodels[-1].dim_phi_right != 0:
            raise ValueError(f"submodel {len(submodels)} has no right block")
        for m in range(len(submodels) - 1):
            if submodels[m].dim_phi_right != submodels[m + 1].dim_phi_left:
                raise ValueError(
                    f"submodels {m + 1} and {m + 2} disagree on the shared block dimension"
                )
        block_labels = self.block_labels
        if not block_labels:
            block_labels = tuple(
                tuple(
                    f"phi{b + 1}_{b + 2}[{k}]"
                    for k in range(submodels[b].dim_phi_right)
                )
                for b in range(len(submodels) - 1)
            )
        if len(block_labels) != len(submodels) - 1:
            raise ValueError("need one label tuple per shared block")
        object.__setattr__(self, "submodels", submodels)
        object.__setattr__(self, "block_labels", tuple(tuple(t) for t in block_labels))

    @property
    def M(self) -> int:
        return len(self.submodels)

    @property
    def n_blocks(self) -> int:
        return self.M - 1

    def block_dim(self, b: int) -> int:
        """Dimension of shared block b (1-based, b = 1..M-1)."""
        return self.submodels[b - 1].dim_phi_right

    def block_slice(self, b: int) -> slice:
        start = sum(self.block_dim(k) for k in range(1, b))
        return slice(start, start + self.block_dim(b))

    @property
    def dim_phi(self) -> int:
        return sum(self.block_dim(b) for b in range(1, self.M))

    @property
    def dim_psi(self) -> int:
        return sum(s.dim_psi for s in self.submodels)

    def psi_slice(self, m: int) -> slice:
        start = sum(self.submodels[k].dim_psi for k in range(m - 1))
        return slice(start, start + self.submodels[m - 1].dim_psi)

    def submodel(self, m: int) -> Submodel:
        """1-based access."""
        return self.submodels[m - 1]

    def phi_for(self, m: int, phi: np.ndarray) -> np.ndarray:
        """Extract submodel m's (left, right) blocks from the full phi matrix."""
        phi = np.atleast_2d(phi)
        parts = []
        if m > 1:
            parts.append(phi[:, self.block_slice(m - 1)])
        if m < self.M:
            parts.append(phi[:, self.block_slice(m)])
        return np.concatenate(parts, axis=1) if parts else phi[:, :0]

    def psi_for(self, m: int, psi: np.ndarray) -> np.ndarray:
        return np.atleast_2d(psi)[:, self.psi_slice(m)]

    @property
    def phi_labels(self) -> tuple[str, ...]:
        return tuple(lab for block in self.block_labels for lab in block)

    @property
    def psi_labels(self) -> tuple[str, ...]:
        return tuple(lab for s in self.submodels for lab in s.psi_labels)


def log_pooled_prior(model: ChainMeldedModel, phi: np.ndarray) -> np.ndarray:
    """Unnormalized log pooled prior: sum_m lambda_m log p_m(phi_m).

    The pooling normalizer is never computed; only ratios matter to the
    samplers.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.shape[1] != model.dim_phi:
        raise ValueError(f"phi has {phi.shape[1]} coords, expected {model.dim_phi}")
    total = np.zeros(phi.shape[0])
    for m, (lam, sub) in enumerate(zip(model.pooling.lam, model.submodels), start=1):
        if lam == 0.0:
            continue
        total = total + lam * sub.log_phi_prior(model.phi_for(m, phi))
    return total


def decompose_pooled_prior(model: ChainMeldedModel) -> list[BatchDensity]:
    """Split the pooled prior into per-submodel factors.

    Returns callbacks ``f_m(phi_m) -> (n,)`` such that
    ``sum_m f_m(phi_m) == log_pooled_prior(phi)`` pointwise.  Submodels
    with role ``original`` keep ``log p_m``; role ``flat`` contributes 0;
    role ``correction`` absorbs its own lambda-weighted prior plus the
    per-block deficits of neighbouring original/flat submodels.
    """
    M = model.M
    lam = model.pooling.lam
    roles = model.pooling.roles
    if all(r == "correction" for r in roles):
        raise ValueError("at least one submodel must have role original or flat")

    # terms[m] collects (coeff, density, which-block-of-m) contributions.
    terms: list[list[tuple[float, BatchDensity, str]]] = [[] for _ in range(M + 1)]
    for m in range(1, M + 1):
        sub = model.submodel(m)
        role = roles[m - 1]
        if role == "original":
            terms[m].append((1.0, sub.log_phi_prior, "own"))
            deficit = lam[m - 1] - 1.0
        elif role == "flat":
            deficit = lam[m - 1]
        else:
            terms[m].append((lam[m - 1], sub.log_phi_prior, "own"))
            continue
        if deficit == 0.0:
            continue
        # Route the deficit through each shared block to the correction
        # neighbour on the other side of that block.
        if m == 1 or m == M:
            nb = 2 if m == 1 else M - 1
            if roles[nb - 1] != "correction":
                raise ValueError(
                    f"submodel {m} (role {role}, lambda={lam[m - 1]}) needs a "
                    f"correction neighbour to absorb its pooled-prior deficit"
                )
            side = "left" if m == 1 else "right"
            terms[nb].append((deficit, sub.log_phi_prior, side))
        else:
            if sub.log_phi_prior_left is None or sub.log_phi_prior_right is None:
                raise ValueError(
                    f"interior submodel {m} needs per-block prior factors to "
                    f"decompose the pooled prior with lambda={lam[m - 1]}"
                )
            for nb, dens, side in (
                (m - 1, sub.log_phi_prior_left, "right"),
                (m + 1, sub.log_phi_prior_right, "left"),
            ):
                if roles[nb - 1] != "correction":
                    raise ValueError(
                        f"submodel {m}'s pooled-prior deficit through its shared "
                        f"block cannot be absorbed: submodel {nb} is not a correction"
                    )
                terms[nb].append((deficit, dens, side))

    factors: list[BatchDensity] = []
    for m in range(1, M + 1):
        sub = model.submodel(m)
        dl, dr = sub.dim_phi_left, sub.dim_phi_right

        def factor(phi_m: np.ndarray, _terms=tuple(terms[m]), _dl=dl, _dr=dr) -> np.ndarray:
            phi_m = np.atleast_2d(np.asarray(phi_m, dtype=np.float64))
            if phi_m.shape[1] != _dl + _dr:
                raise ValueError(
                    f"expected {_dl + _dr} phi coords, got {phi_m.shape[1]}"
                )
            out = np.zeros(phi_m.shape[0])
            for coeff, dens, side in _terms:
                if side == "own":
                    out = out + coeff * dens(phi_m)
                elif side == "left":
                    out = out + coeff * dens(phi_m[:, :_dl])
                else:
                    out = out + coeff * dens(phi_m[:, _dl:])
            return out

        factors.append(factor)
    return factors


def _resolve_psi(model: ChainMeldedModel, psi: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    if isinstance(psi, (list, tuple)):
        parts = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in psi]
        psi = np.concatenate(parts, axis=1) if parts else np.empty((1, 0))
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    if psi.shape[1] != model.dim_psi:
        raise ValueError(f"psi has {psi.shape[1]} coords, expected {model.dim_psi}")
    return psi


def log_melded_joint(model: ChainMeldedModel, phi: np.ndarray, psi) -> np.ndarray:
    """Unnormalized log of the melded joint over all submodels."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    psi = _resolve_psi(model, psi)
    total = log_pooled_prior(model, phi)
    for m in range(1, model.M + 1):
        sub = model.submodel(m)
        phi_m = model.phi_for(m, phi)
        psi_m = model.psi_for(m, psi)
        total = melded_term(total, sub.log_joint(phi_m, psi_m), sub.log_phi_prior(phi_m))
    if np.isnan(total).any():
        raise FloatingPointError("melded joint log-density evaluated to NaN")
    return total


def log_melded_subset(
    model: ChainMeldedModel,
    subset: Sequence[int],
    phi: np.ndarray,
    psi,
    pooled_factors: list[BatchDensity] | None = None,
) -> np.ndarray:
    """Joint log-density of a subset of submodels under the decomposition.

    ``phi`` and ``psi`` are the full matrices; only the coordinates the
    subset touches are read.  With ``subset == {1..M}`` this equals
    :func:`log_melded_joint` (pointwise, exactly).
    """
    subset = sorted(set(int(m) for m in subset))
    if not subset:
        raise ValueError("subset may not be empty")
    if subset[0] < 1 or subset[-1] > model.M:
        raise ValueError(f"subset members must lie in 1..{model.M}")
    if pooled_factors is None:
        pooled_factors = decompose_pooled_prior(model)
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    psi = _resolve_psi(model, psi)
    total = np.zeros(phi.shape[0])
    for m in subset:
        sub = model.submodel(m)
        phi_m = model.phi_for(m, phi)
        psi_m = model.psi_for(m, psi)
        total = total + melded_term(
            pooled_factors[m - 1](phi_m),
            sub.log_joint(phi_m, psi_m),
            sub.log_phi_prior(phi_m),
        )
    if np.isnan(total).any():
        raise FloatingPointError("melded subset log-density evaluated to NaN")
    return total
