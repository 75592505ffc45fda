"""Independent oracles used by the test suite.

Nothing here reuses the library's solvers: the Gaussian-chain density is
rebuilt from its definition and marginalised by grid quadrature
(chain-structured message passing), and ledger reconstruction is
re-derived by eager forward trajectory storage.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from dcmeld.models.gaussian_chain import GaussianChainSpec


def norm_logpdf(x, mean, sd):
    z = (np.asarray(x) - mean) / sd
    return -0.5 * z**2 - np.log(sd) - 0.5 * np.log(2 * np.pi)


def chain_log_factors(spec: GaussianChainSpec, lam):
    """The melded Gaussian-chain log-density as chain-structured factors.

    Returns (unary, pairwise) where unary[b] is a callable f(phi_b) and
    pairwise[b] a callable f(phi_b, phi_b1) for blocks b = 1..M-1, with
    every interior psi integrated out analytically is NOT done here:
    instead the psi integral is performed by 1-D grid quadrature inside
    the pairwise factor, keeping the oracle numeric end to end.
    """
    M = spec.M
    unary = {b: [] for b in range(1, M)}
    pairwise = {b: [] for b in range(1, M - 1)}

    # Pooling: lam_m * each block prior of submodel m.
    for m in range(1, M + 1):
        own = [m - 1, m] if 1 < m < M else ([1] if m == 1 else [M - 1])
        for b in own:
            mu, sd = spec.block_prior(m, b)
            unary[b].append((lam[m - 1], mu, sd))

    # Edge likelihoods.
    y1, s1 = spec.data[0], spec.noise_sd[0]
    yM, sM = spec.data[-1], spec.noise_sd[-1]

    def f_unary(b):
        terms = unary[b]

        def f(x):
            out = np.zeros_like(np.asarray(x, dtype=float))
            for coef, mu, sd in terms:
                out = out + coef * norm_logpdf(x, mu, sd)
            if b == 1:
                for y in y1:
                    out = out + norm_logpdf(y, x, s1)
            if b == M - 1:
                for y in yM:
                    out = out + norm_logpdf(y, x, sM)
            return out

        return f

    def f_pair(m):
        # Interior submodel m couples blocks m-1 and m through
        # Y_m ~ N(phi_left + phi_right + psi_m, sigma^2), psi integrated
        # numerically over a wide grid.
        y, sig = spec.data[m - 1], spec.noise_sd[m - 1]
        pm, ps = spec.psi_prior_mean[m - 2], spec.psi_prior_sd[m - 2]
        psi_grid = np.linspace(pm - 10 * ps, pm + 10 * ps, 801)
        dpsi = psi_grid[1] - psi_grid[0]

        def f(xl, xr):
            xl = np.asarray(xl, dtype=float)
            s = (xl + xr)[..., None] + psi_grid
            ll = norm_logpdf(psi_grid, pm, ps) * np.ones_like(s)
            for yv in y:
                ll = ll + norm_logpdf(yv, s, sig)
            return logsumexp(ll, axis=-1) + np.log(dpsi)

        return f

    return f_unary, f_pair


def chain_grid_moments(spec: GaussianChainSpec, lam, n_grid=201, half_width=6.0,
                       center=None):
    """Mean/variance of every block by grid message passing.

    Builds per-block grids, multiplies unary and pairwise factors, and
    eliminates left to right; pairwise marginals come from the standard
    forward/backward messages.  Returns (means, variances) over blocks
    1..M-1 in order.
    """
    M = spec.M
    f_unary, f_pair = chain_log_factors(spec, lam)
    if center is None:
        center = np.zeros(M - 1)
    grids = [np.linspace(c - half_width, c + half_width, n_grid) for c in center]
    log_u = [f_unary(b)(grids[b - 1]) for b in range(1, M)]
    log_p = []
    for b in range(1, M - 1):
        f = f_pair(b + 1)
        log_p.append(f(grids[b - 1][:, None], grids[b][None, :]))

    # Forward messages a[b] over grid b (0-indexed blocks).
    nb = M - 1
    fwd = [None] * nb
    fwd[0] = log_u[0]
    for b in range(1, nb):
        fwd[b] = log_u[b] + logsumexp(fwd[b - 1][:, None] + log_p[b - 1], axis=0)
    bwd = [None] * nb
    bwd[-1] = np.zeros(n_grid)
    for b in range(nb - 2, -1, -1):
        bwd[b] = logsumexp(log_p[b] + (log_u[b + 1] + bwd[b + 1])[None, :], axis=1)

    means, variances = [], []
    for b in range(nb):
        logm = fwd[b] + bwd[b]
        w = np.exp(logm - logsumexp(logm))
        mu = float(w @ grids[b])
        means.append(mu)
        variances.append(float(w @ (grids[b] - mu) ** 2))
    return np.array(means), np.array(variances)


# ---------------------------------------------------------------------------
# Eager full-trajectory reconstruction oracle


def eager_joint_reconstruction(ledger):
    """Re-derive the joint samples by forward trajectory storage.

    Replays the ledger in stage order keeping, for each branch, fully
    materialised aligned matrices of every column seen so far (gathering
    all of them at every merge/ancestry step).  Independent of
    extract_joint_samples, which walks backward instead.
    """
    center = ledger.center
    sides = {}
    for side, base_m in (("left", 1), ("right", ledger.plan.M)):
        leaf = ledger.leaf(base_m)
        cols = {lab: leaf.system.column(lab) for lab in leaf.system.labels}
        for rec in ledger.side_records(side):
            out_rows = rec.ancestry.indices
            frontier_anc = (
                rec.merge_left_anc if side == "left" else rec.merge_right_anc
            )
            leaf_anc = rec.merge_right_anc if side == "left" else rec.merge_left_anc
            gather_front = frontier_anc.indices[out_rows]
            cols = {lab: col[gather_front] for lab, col in cols.items()}
            absorbed = ledger.leaf(
                rec.submodels[0] + 1 if side == "left" else rec.submodels[0] - 1
            )
            gather_leaf = leaf_anc.indices[out_rows]
            for lab in absorbed.system.labels:
                cols[lab] = absorbed.system.column(lab)[gather_leaf]
            for lab in rec.system.labels:
                cols[lab] = rec.system.column(lab)
        sides[side] = cols

    out_rows = center.ancestry.indices
    joint = {}
    for side, anc in (("left", center.merge_left_anc), ("right", center.merge_right_anc)):
        gather = anc.indices[out_rows]
        for lab, col in sides[side].items():
            joint[lab] = col[gather]
    for lab in center.system.labels:
        joint[lab] = center.system.column(lab)
    return joint
