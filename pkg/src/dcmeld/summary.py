"""Posterior summaries: weighted moments, quantiles, and ESS.

Weighted quantiles use the inverted-CDF convention (smallest value whose
cumulative normalized weight reaches the level).  For unit-weight chains
the per-column ESS is autocorrelation-based (initial positive sequence);
for weighted particle sets it is the usual 1/sum(w^2).
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .particles import WeightedParticleSystem, ess

__all__ = [
    "weighted_quantile",
    "autocorr_ess",
    "summarize_system",
    "summary_rows",
]

QUANTILES = (0.025, 0.5, 0.975)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if values.size != weights.size:
        raise ValueError("values and weights must have equal length")
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.cumsum(weights[order])
    cum /= cum[-1]
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    idx = np.searchsorted(cum, q, side="left")
    return v[np.minimum(idx, v.size - 1)]


def autocorr_ess(x: np.ndarray) -> float:
    """Effective sample size from the initial positive autocorrelation sums."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = x @ x / n
    if var == 0:
        return float(n)
    # FFT autocovariance.
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real / n
    rho = acov / acov[0]
    # Sum consecutive pairs while they remain positive (even-lag pairing).
    s = 0.0
    for k in range(1, n // 2):
        pair = rho[2 * k - 1] + rho[2 * k]
        if pair <= 0:
            break
        s += pair
    return float(min(n, n / (1.0 + 2.0 * s)))


def summarize_system(system: WeightedParticleSystem) -> list[dict]:
    """Per-column mean, SD, quantiles, and ESS as a list of row dicts."""
    w = system.normalized_weights()
    equally = system.is_equally_weighted()
    weight_ess = ess(system.log_weights)
    rows = []
    for j, label in enumerate(system.labels):
        col = system.values[:, j]
        mean = float(w @ col)
        var = float(w @ (col - mean) ** 2)
        qs = weighted_quantile(col, w, QUANTILES)
        col_ess = autocorr_ess(col) if equally else weight_ess
        rows.append(
            {
                "parameter": label,
                "mean": mean,
                "sd": float(np.sqrt(max(var, 0.0))),
                "q2.5": float(qs[0]),
                "q50": float(qs[1]),
                "q97.5": float(qs[2]),
                "ess": float(col_ess),
            }
        )
    return rows


def summary_rows(rows: list[dict]) -> list[tuple[str, str, float]]:
    """Flatten summary dicts to long-format (parameter, statistic, value)."""
    out = []
    for row in rows:
        for stat in ("mean", "sd", "q2.5", "q50", "q97.5", "ess"):
            out.append((row["parameter"], stat, row[stat]))
    return out
