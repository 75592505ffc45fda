"""Weighted particle systems, resampling, and ancestry index algebra.

A :class:`WeightedParticleSystem` is the currency every sampler in this
package consumes and produces: an ``(N, d)`` value matrix, length-``N``
log-weights, and per-coordinate labels.  Systems are immutable; all
operations are pure functions, so they are safe to call concurrently.

Ancestry is tracked with :class:`IndexMultiset` collections (ordered,
duplicates allowed).  ``forward_update`` composes two collections, and
``back_left_update`` / ``back_right_update`` propagate a chain of
collections outward-in, gathering the stored particle systems along the
way; together these reconstruct coherent joint trajectories after a
multi-stage run.

Indices are 0-based in memory and 1-based in serialized form.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DegenerateWeightsError",
    "WeightedParticleSystem",
    "IndexMultiset",
    "ResampleScheme",
    "ess",
    "relative_ess",
    "resample",
    "resample_indices",
    "forward_update",
    "back_left_update",
    "back_right_update",
]


class DegenerateWeightsError(ValueError):
    """All particle weights are zero (every log-weight is -inf)."""


@dataclass(frozen=True)
class WeightedParticleSystem:
    """N particles of dimension d with log-weights and coordinate labels."""

    values: np.ndarray
    log_weights: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        log_weights = np.asarray(self.log_weights, dtype=np.float64).ravel()
        labels = tuple(str(c) for c in self.labels)
        if values.shape[0] < 1:
            raise ValueError("a particle system needs at least one particle")
        if values.shape[0] != log_weights.shape[0]:
            raise ValueError(
                f"{values.shape[0]} particles but {log_weights.shape[0]} log-weights"
            )
        if values.shape[1] != len(labels):
            raise ValueError(f"{values.shape[1]} columns but {len(labels)} labels")
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be unique")
        if np.isnan(log_weights).any():
            raise ValueError("log-weights may not be NaN")
        if not np.isfinite(log_weights).any():
            raise DegenerateWeightsError("all log-weights are -inf")
        values = values.copy()
        log_weights = log_weights.copy()
        values.setflags(write=False)
        log_weights.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "log_weights", log_weights)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def equal_weights(cls, values: np.ndarray, labels) -> "WeightedParticleSystem":
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        return cls(values, np.zeros(values.shape[0]), tuple(labels))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def is_equally_weighted(self, tol: float = 1e-12) -> bool:
        lw = self.log_weights
        return bool(np.all(np.abs(lw - lw[0]) <= tol))

    def ess(self) -> float:
        return ess(self.log_weights)

    def gather(self, indices: "IndexMultiset | np.ndarray") -> "WeightedParticleSystem":
        """Row-gather; the result carries equal weights."""
        idx = indices.indices if isinstance(indices, IndexMultiset) else np.asarray(indices)
        return WeightedParticleSystem.equal_weights(self.values[idx], self.labels)

    def column(self, label: str) -> np.ndarray:
        return self.values[:, self.labels.index(label)]

    def mean(self) -> np.ndarray:
        return self.normalized_weights() @ self.values

    def cov(self) -> np.ndarray:
        w = self.normalized_weights()
        centered = self.values - w @ self.values
        return (centered * w[:, None]).T @ centered

    # -- serialization -------------------------------------------------

    def to_csv(self, path_or_buf) -> None:
        """Write ``labels + log_weight`` header and full-precision rows."""
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "w", newline="")
            close = True
        else:
            buf = path_or_buf
        try:
            buf.write(",".join(self.labels + ("log_weight",)) + "\n")
            for row, lw in zip(self.values, self.log_weights):
                buf.write(",".join(repr(float(v)) for v in row) + f",{float(lw)!r}\n")
        finally:
            if close:
                buf.close()

    @classmethod
    def from_csv(cls, path_or_buf) -> "WeightedParticleSystem":
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "r")
            close = True
        else:
            buf = path_or_buf
        try:
            header = buf.readline().strip().split(",")
            if not header or header[-1] != "log_weight":
                raise ValueError("malformed particle CSV: last column must be log_weight")
            rows = [line.strip().split(",") for line in buf if line.strip()]
        finally:
            if close:
                buf.close()
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != len(header):
            raise ValueError("malformed particle CSV: ragged rows")
        return cls(data[:, :-1], data[:, -1], tuple(header[:-1]))

    _MAGIC = b"DCMELDP1"

    def to_binary(self, path_or_buf) -> None:
        """Columnar dump: little-endian f64, row-major, length-prefixed labels."""
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "wb")
            close = True
        else:
            buf = path_or_buf
        try:
            buf.write(self._MAGIC)
            buf.write(struct.pack("<QQ", self.n, self.dim))
            buf.write(struct.pack("<Q", len(self.labels)))
            for lab in self.labels:
                raw = lab.encode("utf-8")
                buf.write(struct.pack("<Q", len(raw)))
                buf.write(raw)
            buf.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(self.log_weights, dtype="<f8").tobytes())
        finally:
            if close:
                buf.close()

    @classmethod
    def from_binary(cls, path_or_buf) -> "WeightedParticleSystem":
        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            buf = open(path_or_buf, "rb")
            close = True
        else:
            buf = path_or_buf
        try:
            if buf.read(len(cls._MAGIC)) != cls._MAGIC:
                raise ValueError("not a particle-system binary dump")
            n, d = struct.unpack("<QQ", buf.read(16))
            (n_labels,) = struct.unpack("<Q", buf.read(8))
            labels = []
            for _ in range(n_labels):
                (ln,) = struct.unpack("<Q", buf.read(8))
                labels.append(buf.read(ln).decode("utf-8"))
            values = np.frombuffer(buf.read(8 * n * d), dtype="<f8").reshape(n, d)
            log_weights = np.frombuffer(buf.read(8 * n), dtype="<f8")
        finally:
            if close:
                buf.close()
        return cls(values, log_weights, tuple(labels))


@dataclass(frozen=True)
class IndexMultiset:
    """Ordered ancestor-index collection; duplicates allowed.

    ``indices`` are 0-based positions into a source system of size
    ``n_source``.  Use :meth:`from_one_based` / :attr:`one_based` at
    serialization boundaries.
    """

    indices: np.ndarray
    n_source: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).ravel().copy()
        if idx.size == 0:
            raise ValueError("an index multiset may not be empty")
        if idx.min() < 0 or idx.max() >= self.n_source:
            raise ValueError(
                f"indices must lie in [0, {self.n_source - 1}], got "
                f"[{idx.min()}, {idx.max()}]"
            )
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "n_source", int(self.n_source))

    @classmethod
    def identity(cls, n: int) -> "IndexMultiset":
        return cls(np.arange(n, dtype=np.int64), n)

    @classmethod
    def from_one_based(cls, indices, n_source: int) -> "IndexMultiset":
        return cls(np.asarray(indices, dtype=np.int64) - 1, n_source)

    @property
    def one_based(self) -> np.ndarray:
        return self.indices + 1

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class ResampleScheme:
    """Resampling flavour plus the relative-ESS trigger threshold."""

    kind: str = "systematic"
    trigger: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling kind {self.kind!r}")
        if not (0.0 < self.trigger <= 1.0):
            raise ValueError("resampling trigger must lie in (0, 1]")


def ess(log_weights: np.ndarray) -> float:
    """Effective sample size 1/Σ w̄ᵢ² of normalized weights; in [1, N]."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.isfinite(lw).any():
        raise DegenerateWeightsError("all log-weights are -inf")
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def relative_ess(log_weights: np.ndarray) -> float:
    return ess(log_weights) / np.asarray(log_weights).size


def resample_indices(log_weights: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Draw N 0-based ancestor indices proportional to normalized weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.isfinite(lw).any():
        raise DegenerateWeightsError("cannot resample: all log-weights are -inf")
    n = lw.size
    w = np.exp(lw - logsumexp(lw))
    cum = np.cumsum(w)
    cum[-1] = 1.0
    if kind == "systematic":
        positions = (rng.random() + np.arange(n)) / n
    elif kind == "multinomial":
        positions = rng.random(n)
    else:
        raise ValueError(f"unknown resampling kind {kind!r}")
    return np.searchsorted(cum, positions, side="right").astype(np.int64)


def resample(
    system: WeightedParticleSystem,
    scheme: ResampleScheme,
    rng: np.random.Generator,
) -> tuple[WeightedParticleSystem, IndexMultiset]:
    """Resample to equal weights; returns the system and its ancestry."""
    idx = resample_indices(system.log_weights, scheme.kind, rng)
    ancestry = IndexMultiset(idx, system.n)
    return system.gather(ancestry), ancestry


def forward_update(a: IndexMultiset, b: IndexMultiset) -> IndexMultiset:
    """Compose collections: result[i] = b[a[i]].

    ``a`` selects positions of ``b``, so ``a`` must index into ``len(b)``.
    """
    if len(a) != len(b):
        raise ValueError(f"length mismatch: |a|={len(a)} |b|={len(b)}")
    if a.n_source != len(b):
        raise ValueError(
            f"a indexes a system of size {a.n_source}, but b has {len(b)} entries"
        )
    return IndexMultiset(b.indices[a.indices], b.n_source)


def _propagate_chain(
    index_chain: list[IndexMultiset],
    systems: list[WeightedParticleSystem],
) -> tuple[list[WeightedParticleSystem], list[IndexMultiset]]:
    if len(index_chain) < 2:
        raise ValueError("the index chain needs at least two collections")
    if len(systems) != len(index_chain) - 1:
        raise ValueError(
            f"{len(index_chain)} collections require {len(index_chain) - 1} systems, "
            f"got {len(systems)}"
        )
    n = len(index_chain[-1])
    for coll in index_chain:
        if len(coll) != n:
            raise ValueError("all index collections must have equal length")
    for sys_, coll in zip(systems, index_chain[:-1]):
        if sys_.n != coll.n_source:
            raise ValueError("systems must align with their index collections")
    updated_systems: list[WeightedParticleSystem] = list(systems)
    updated_chain: list[IndexMultiset] = list(index_chain[:-1])
    carry = index_chain[-1]
    for j in range(len(updated_chain) - 1, -1, -1):
        composed = forward_update(carry, updated_chain[j])
        updated_chain[j] = composed
        updated_systems[j] = updated_systems[j].gather(composed)
        carry = composed
    return updated_systems, updated_chain


def back_left_update(
    index_chain: list[IndexMultiset],
    systems: list[WeightedParticleSystem],
) -> tuple[list[WeightedParticleSystem], list[IndexMultiset]]:
    """Backward trajectory propagation over a leftward chain.

    ``index_chain`` holds T >= 2 collections in increasing submodel order
    (outermost first, the center/root collection last); ``systems`` align
    with the first T-1 entries.  Walking from the center outward, each
    collection is overridden by the composition with its right neighbour
    (new[i] = old[neighbour[i]]) and its system rows are gathered by the
    composed indices.  Returns the updated systems and collections.
    """
    return _propagate_chain(index_chain, systems)


def back_right_update(
    index_chain: list[IndexMultiset],
    systems: list[WeightedParticleSystem],
) -> tuple[list[WeightedParticleSystem], list[IndexMultiset]]:
    """Mirror image of :func:`back_left_update` for a rightward chain.

    Collections arrive in decreasing submodel order (outermost-right
    first, center/root last); composition and gathering are identical to
    the leftward version, only the submodel ordering convention differs.
    """
    return _propagate_chain(index_chain, systems)
