"""Comparison samplers for chain-melded models.

Three references: a two-stage Metropolis-within-Gibbs sampler whose
flank proposals come from stored subposterior samples (so stage-one
likelihoods cancel from the acceptance ratios), a direct random-scan
MCMC on the full melded posterior, and a plugin sampler that fixes the
shared blocks at point estimates to demonstrate the resulting
uncertainty underestimation.

The full-posterior MCMC keeps per-submodel log-density caches and
updates one randomly chosen coordinate block per iteration, re-running
only the submodels that block touches; chains can run vectorized side
by side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .melding import ChainMeldedModel, decompose_pooled_prior, melded_term
from .particles import WeightedParticleSystem
from .rng import substream

__all__ = [
    "SubposteriorPool",
    "two_stage_parallel_sampler",
    "full_posterior_mcmc",
    "pointwise_plugin_sampler",
    "gelman_rubin",
]


@dataclass(frozen=True)
class SubposteriorPool:
    """Stored equally weighted stage-one samples for the two flanks.

    ``left`` holds (phi_12, psi_1) draws, ``right`` (phi_23, psi_3);
    both systems must be equally weighted.
    """

    left: WeightedParticleSystem
    right: WeightedParticleSystem

    def __post_init__(self) -> None:
        if self.left.n < 1 or self.right.n < 1:
            raise ValueError("subposterior pools may not be empty")
        if not (self.left.is_equally_weighted() and self.right.is_equally_weighted()):
            raise ValueError("subposterior pools must be equally weighted")


def _center_contribution(model: ChainMeldedModel, pooled_factors):
    """Log of submodel 2's melded factor: pool_2 + joint_2 - phi-prior_2."""
    sub = model.submodel(2)
    pool = pooled_factors[1]

    def contribution(phi_pair: np.ndarray, psi2: np.ndarray) -> np.ndarray:
        return melded_term(
            pool(phi_pair), sub.log_joint(phi_pair, psi2), sub.log_phi_prior(phi_pair)
        )

    return contribution


def two_stage_parallel_sampler(
    model: ChainMeldedModel,
    pool: SubposteriorPool,
    n_iters: int,
    seed: int,
    psi2_step_scale: float = 0.25,
    burn_in: float = 0.2,
    thin: int = 1,
) -> WeightedParticleSystem:
    """Metropolis-within-Gibbs with pooled stage-one proposals (M = 3).

    Block A redraws (phi_12, psi_1) uniformly (with replacement) from
    the left pool; the acceptance ratio reduces to submodel 2's melded
    factor because the proposal density cancels the flank terms.  Block
    B mirrors this for (phi_23, psi_3); block C moves psi_2 with a
    symmetric random walk (+-1 proposals on discrete coordinates).
    Returns the post-burn-in thinned chain with unit weights.
    """
    if model.M != 3:
        raise ValueError("the two-stage parallel sampler requires M = 3")
    pooled_factors = decompose_pooled_prior(model)
    contribution = _center_contribution(model, pooled_factors)
    sub2 = model.submodel(2)
    b1, b2 = model.block_dim(1), model.block_dim(2)
    d_psi2 = sub2.dim_psi
    rng = substream(seed, "two-stage")

    left_row = int(rng.integers(pool.left.n))
    right_row = int(rng.integers(pool.right.n))
    phi12 = pool.left.values[left_row, :b1]
    phi23 = pool.right.values[right_row, :b2]
    psi1 = pool.left.values[left_row, b1:]
    psi3 = pool.right.values[right_row, b2:]
    init_sampler = sub2.psi_init_sampler or sub2.psi_proposal.sample
    psi2 = init_sampler(np.concatenate([phi12, phi23])[None, :], rng)[0]

    discrete = (
        np.asarray(sub2.psi_discrete_mask, dtype=bool)
        if sub2.psi_discrete_mask is not None
        else np.zeros(d_psi2, dtype=bool)
    )
    cont_idx = np.flatnonzero(~discrete)
    disc_idx = np.flatnonzero(discrete)

    def center(phi12_v, phi23_v, psi2_v) -> float:
        phi_pair = np.concatenate([phi12_v, phi23_v])[None, :]
        return float(contribution(phi_pair, psi2_v[None, :])[0])

    current = center(phi12, phi23, psi2)
    kept = []
    keep_from = int(burn_in * n_iters)
    for it in range(n_iters):
        # Block A: left-flank proposal from the pool.
        row = int(rng.integers(pool.left.n))
        cand12 = pool.left.values[row, :b1]
        cand = center(cand12, phi23, psi2)
        if np.log(rng.random()) < cand - current:
            phi12, psi1, current = cand12, pool.left.values[row, b1:], cand
        # Block B: right-flank proposal from the pool.
        row = int(rng.integers(pool.right.n))
        cand23 = pool.right.values[row, :b2]
        cand = center(phi12, cand23, psi2)
        if np.log(rng.random()) < cand - current:
            phi23, psi3, current = cand23, pool.right.values[row, b2:], cand
        # Block C: symmetric random-walk update of psi_2.
        if d_psi2:
            prop = psi2.copy()
            if cont_idx.size:
                prop[cont_idx] += psi2_step_scale * rng.standard_normal(cont_idx.size)
            if disc_idx.size:
                sites = rng.choice(disc_idx, size=min(8, disc_idx.size), replace=False)
                prop[sites] += rng.choice((-1.0, 1.0), size=sites.size)
            cand = center(phi12, phi23, prop)
            if np.log(rng.random()) < cand - current:
                psi2, current = prop, cand
        if it >= keep_from and (it - keep_from) % thin == 0:
            kept.append(np.concatenate([phi12, phi23, psi1, psi2, psi3]))

    labels = (
        model.block_labels[0]
        + model.block_labels[1]
        + model.submodel(1).psi_labels
        + sub2.psi_labels
        + model.submodel(3).psi_labels
    )
    return WeightedParticleSystem.equal_weights(np.asarray(kept), labels)


# ---------------------------------------------------------------------------
# Full-posterior random-scan MCMC


@dataclass
class _UpdateBlock:
    name: str
    cols: np.ndarray  # columns in the joint layout
    touches: tuple[int, ...]  # submodels whose terms the block enters
    discrete: bool
    scale: float


def _joint_layout(model: ChainMeldedModel):
    """Column layout [blocks..., psi...] and per-submodel column views."""
    labels = model.phi_labels + model.psi_labels
    d_phi = model.dim_phi
    phi_cols = {
        b: np.arange(model.block_slice(b).start, model.block_slice(b).stop)
        for b in range(1, model.M)
    }
    psi_cols = {
        m: d_phi + np.arange(model.psi_slice(m).start, model.psi_slice(m).stop)
        for m in range(1, model.M + 1)
    }
    return labels, phi_cols, psi_cols


def _build_blocks(model: ChainMeldedModel, phi_cols, psi_cols, include_phi=True,
                  psi_only_for: set[int] | None = None) -> list[_UpdateBlock]:
    blocks: list[_UpdateBlock] = []
    if include_phi:
        for b in range(1, model.M):
            blocks.append(
                _UpdateBlock(
                    name=f"phi_block_{b}",
                    cols=phi_cols[b],
                    touches=(b, b + 1),
                    discrete=False,
                    scale=0.5,
                )
            )
    for m in range(1, model.M + 1):
        if psi_only_for is not None and m not in psi_only_for:
            continue
        sub = model.submodel(m)
        if sub.dim_psi == 0:
            continue
        mask = (
            np.asarray(sub.psi_discrete_mask, dtype=bool)
            if sub.psi_discrete_mask is not None
            else np.zeros(sub.dim_psi, dtype=bool)
        )
        cont = psi_cols[m][~mask]
        disc = psi_cols[m][mask]
        if cont.size:
            blocks.append(
                _UpdateBlock(f"psi{m}_cont", cont, (m,), discrete=False, scale=0.5)
            )
        if disc.size:
            blocks.append(
                _UpdateBlock(f"psi{m}_disc", disc, (m,), discrete=True, scale=1.0)
            )
    return blocks


class _SubmodelTermCache:
    """Per-chain cached melded factors, recomputed per touched submodel."""

    def __init__(self, model: ChainMeldedModel, pooled_factors, state: np.ndarray,
                 phi_cols, psi_cols):
        self.model = model
        self.pooled = pooled_factors
        self.phi_cols = phi_cols
        self.psi_cols = psi_cols
        self.terms = np.stack(
            [self.term(m, state) for m in range(1, model.M + 1)], axis=1
        )  # (n_chains, M)

    def phi_m(self, m: int, state: np.ndarray) -> np.ndarray:
        cols = []
        if m > 1:
            cols.append(self.phi_cols[m - 1])
        if m < self.model.M:
            cols.append(self.phi_cols[m])
        return state[:, np.concatenate(cols)]

    def term(self, m: int, state: np.ndarray) -> np.ndarray:
        sub = self.model.submodel(m)
        phi = self.phi_m(m, state)
        psi = state[:, self.psi_cols[m]]
        return melded_term(
            self.pooled[m - 1](phi), sub.log_joint(phi, psi), sub.log_phi_prior(phi)
        )

    def total(self) -> np.ndarray:
        return self.terms.sum(axis=1)


def _prior_init(model: ChainMeldedModel, n_chains: int, rng, max_tries: int = 1000):
    d = model.dim_phi + model.dim_psi
    _, phi_cols, psi_cols = _joint_layout(model)
    for _ in range(max_tries):
        state = np.zeros((n_chains, d))
        for m in range(1, model.M + 1):
            sub = model.submodel(m)
            if sub.phi_prior_sampler is None:
                raise ValueError(f"submodel {m} has no phi prior sampler for init")
            draw = np.atleast_2d(sub.phi_prior_sampler(n_chains, rng))
            offset = 0
            if m > 1:
                state[:, phi_cols[m - 1]] = draw[:, : model.block_dim(m - 1)]
                offset = model.block_dim(m - 1)
            if m < model.M:
                state[:, phi_cols[m]] = draw[:, offset:]
        for m in range(1, model.M + 1):
            sub = model.submodel(m)
            if sub.dim_psi:
                phi = np.concatenate(
                    [state[:, phi_cols[b]] for b in ((m - 1, m) if 1 < m < model.M
                     else ((1,) if m == 1 else (model.M - 1,)))], axis=1,
                )
                init_sampler = sub.psi_init_sampler or sub.psi_proposal.sample
                state[:, psi_cols[m]] = init_sampler(phi, rng)
        pooled = decompose_pooled_prior(model)
        cache = _SubmodelTermCache(model, pooled, state, phi_cols, psi_cols)
        if np.isfinite(cache.total()).all():
            return state, cache
    raise RuntimeError(f"no finite initialisation found in {max_tries} prior draws")


def _random_scan(
    model: ChainMeldedModel,
    n_iters: int,
    seed: int,
    n_chains: int,
    blocks: list[_UpdateBlock],
    state: np.ndarray,
    cache: _SubmodelTermCache,
    burn_in: float,
    adapt: bool = True,
    discrete_sites: int = 8,
) -> tuple[np.ndarray, dict]:
    """Shared random-scan Metropolis-within-Gibbs driver.

    One block update per iteration; per-block scalar scales adapt toward
    30% acceptance during burn-in and freeze afterwards.  Returns draws
    of shape (n_chains, n_kept, d) and diagnostics.
    """
    rng = substream(seed, "mcmc")
    steps_per_chain = n_iters // n_chains
    keep_from = int(burn_in * steps_per_chain)
    kept = np.empty((n_chains, steps_per_chain - keep_from, state.shape[1]))
    acc_count = {b.name: 0 for b in blocks}
    prop_count = {b.name: 0 for b in blocks}
    scales = {b.name: b.scale for b in blocks}

    for it in range(steps_per_chain):
        block = blocks[int(rng.integers(len(blocks)))]
        prop = state.copy()
        if block.discrete:
            sites = rng.choice(block.cols, size=min(discrete_sites, block.cols.size),
                               replace=False)
            prop[:, sites] += rng.choice((-1.0, 1.0), size=(n_chains, sites.size))
        else:
            prop[:, block.cols] += scales[block.name] * rng.standard_normal(
                (n_chains, block.cols.size)
            )
        new_terms = np.stack([cache.term(m, prop) for m in block.touches], axis=1)
        old_terms = cache.terms[:, [m - 1 for m in block.touches]]
        log_ratio = new_terms.sum(axis=1) - old_terms.sum(axis=1)
        accept = np.log(rng.random(n_chains)) < log_ratio
        state[accept] = prop[accept]
        for j, m in enumerate(block.touches):
            cache.terms[accept, m - 1] = new_terms[accept, j]
        prop_count[block.name] += n_chains
        acc_count[block.name] += int(accept.sum())
        if adapt and not block.discrete and it < keep_from and (it + 1) % 50 == 0:
            rate = acc_count[block.name] / max(prop_count[block.name], 1)
            scales[block.name] *= float(np.exp((rate - 0.3)))
        if it >= keep_from:
            kept[:, it - keep_from, :] = state
    acceptance = {
        name: acc_count[name] / prop_count[name]
        for name in acc_count
        if prop_count[name]
    }
    return kept, {"acceptance": acceptance, "scales": scales}


def full_posterior_mcmc(
    model: ChainMeldedModel,
    n_iters: int,
    seed: int,
    n_chains: int = 2,
    burn_in: float = 0.2,
    discrete_sites: int = 8,
) -> tuple[WeightedParticleSystem, dict]:
    """Random-scan adaptive Metropolis on the full melded log-density.

    ``n_iters`` counts total block updates across all chains.  Returns
    the pooled post-burn-in chain (unit weights) plus diagnostics with
    per-block acceptance rates and the per-chain draws (for convergence
    checks such as :func:`gelman_rubin`).
    """
    labels, phi_cols, psi_cols = _joint_layout(model)
    state, cache = _prior_init(model, n_chains, substream(seed, "mcmc-init"))
    blocks = _build_blocks(model, phi_cols, psi_cols)
    kept, info = _random_scan(
        model, n_iters, seed, n_chains, blocks, state, cache, burn_in,
        discrete_sites=discrete_sites,
    )
    info["chains"] = kept
    pooled = kept.reshape(-1, kept.shape[2])
    return WeightedParticleSystem.equal_weights(pooled, labels), info


def pointwise_plugin_sampler(
    model: ChainMeldedModel,
    plugin_phi: np.ndarray,
    n_iters: int,
    seed: int,
    n_chains: int = 1,
    burn_in: float = 0.2,
    target_submodel: int = 2,
) -> tuple[WeightedParticleSystem, dict]:
    """MCMC over one submodel's psi with the shared blocks pinned.

    The shared parameters are fixed at ``plugin_phi`` (point estimates
    from stage one), so the chain explores the conditional rather than
    the melded marginal; intervals therefore understate uncertainty.
    """
    plugin_phi = np.asarray(plugin_phi, dtype=np.float64).ravel()
    if plugin_phi.size != model.dim_phi:
        raise ValueError(f"plugin phi must have {model.dim_phi} coordinates")
    labels, phi_cols, psi_cols = _joint_layout(model)
    sub = model.submodel(target_submodel)
    if sub.dim_psi == 0:
        raise ValueError(f"submodel {target_submodel} has no psi to sample")

    rng = substream(seed, "plugin-init")
    d = model.dim_phi + model.dim_psi
    state = np.zeros((n_chains, d))
    state[:, : model.dim_phi] = plugin_phi[None, :]
    phi_m_cols = np.concatenate(
        [phi_cols[b] for b in ((target_submodel - 1, target_submodel)
         if 1 < target_submodel < model.M
         else ((1,) if target_submodel == 1 else (model.M - 1,)))]
    )
    state[:, psi_cols[target_submodel]] = sub.psi_proposal.sample(
        state[:, phi_m_cols], rng
    )
    pooled = decompose_pooled_prior(model)
    cache = _SubmodelTermCache(model, pooled, state, phi_cols, psi_cols)
    if not np.isfinite(cache.terms[:, target_submodel - 1]).all():
        raise ValueError("plugin phi lies outside the target submodel's support")
    blocks = _build_blocks(
        model, phi_cols, psi_cols, include_phi=False, psi_only_for={target_submodel}
    )
    kept, info = _random_scan(
        model, n_iters, seed, n_chains, blocks, state, cache, burn_in
    )
    info["chains"] = kept
    pooled_draws = kept.reshape(-1, d)[:, psi_cols[target_submodel]]
    return (
        WeightedParticleSystem.equal_weights(pooled_draws, sub.psi_labels),
        info,
    )


def gelman_rubin(chains: np.ndarray) -> np.ndarray:
    """Split-Rhat per column for draws of shape (n_chains, n_iter, d)."""
    chains = np.asarray(chains, dtype=np.float64)
    c, n, d = chains.shape
    half = n // 2
    split = chains[:, : 2 * half, :].reshape(2 * c, half, d)
    means = split.mean(axis=1)
    variances = split.var(axis=1, ddof=1)
    w = variances.mean(axis=0)
    b = half * means.var(axis=0, ddof=1)
    var_hat = (half - 1) / half * w + b / half
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_hat / w)
    return np.where(w > 0, rhat, 1.0)
