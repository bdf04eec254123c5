"""Subspace selection for low-rank optimization.

Three selectors produce an orthonormal m x r basis from a gradient matrix:

* ``dominant``  - the r leading left singular vectors,
* ``sara``      - r left singular vectors drawn without replacement with
  probabilities proportional to their singular values,
* ``random``    - a Haar-ish random orthonormal basis (QR of a Gaussian).

The sampled selector follows the successive-sampling law
``P{(I_1..I_r)=(i_1..i_r)} = prod_k w_{i_k} / (1 - w_{i_1} - ... - w_{i_{k-1}})``,
implemented via exponential keys (same distribution, one pass). Exact
index-inclusion probabilities under that law, and their minimum (the quantity
the convergence analysis calls delta), are computed by a subset DP.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import matcore
from .matcore import RngStream

__all__ = [
    "SelectionWeights",
    "singular_weights",
    "sample_without_replacement",
    "sample_many",
    "sample_ordered",
    "inclusion_probabilities",
    "min_inclusion_probability",
    "EXACT_MAX_DIM",
    "Projector",
    "SelectorKind",
    "select_sara",
    "select_dominant",
    "select_random",
    "refresh_projector",
    "ProjectorLogWriter",
    "ProjectorLogEntry",
    "read_projector_log",
]

#: Exact inclusion probabilities enumerate subsets; cap the dimension.
EXACT_MAX_DIM = 12

_ORTHO_TOL = 1e-10


def validate_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D sequence")
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("weights must lie in [0, 1]")
    if abs(float(w.sum()) - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1, got {float(w.sum())!r}")
    return w


#: Alias kept for symmetry with the rest of the API: a validated weight vector.
SelectionWeights = np.ndarray


def singular_weights(s) -> np.ndarray:
    """Normalize singular values to selection weights w_i = s_i / sum(s).

    A zero spectrum (zero gradient) degenerates to uniform weights so the
    selector stays total.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("singular values must be a non-empty 1-D sequence")
    if np.any(s < 0):
        raise ValueError(f"negative singular value at index {int(np.argmin(s))}")
    total = float(s.sum())
    if total == 0.0:
        return np.full(s.size, 1.0 / s.size)
    return s / total


def sample_without_replacement(weights, r: int, rng: RngStream) -> np.ndarray:
    """Draw r distinct indices under the successive-sampling law; sorted ascending.

    Zero-weight indices are only used when fewer than r weights are positive:
    all positive indices are then taken and the remainder filled uniformly.
    """
    return sample_many(weights, r, 1, rng)[0]


def sample_many(weights, r: int, n: int, rng: RngStream) -> np.ndarray:
    """n independent samples, one per row, each sorted ascending. Shape (n, r)."""
    w = validate_weights(weights)
    m = w.size
    if not 1 <= r <= m:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= m={m}")
    pos = np.flatnonzero(w > 0)
    if pos.size >= r:
        # exponential keys: r smallest of E_i / w_i reproduce the sequential law
        keys = rng.gen.exponential(size=(n, pos.size)) / w[pos]
        take = np.argpartition(keys, r - 1, axis=1)[:, :r]
        idx = pos[take]
    else:
        zero = np.flatnonzero(w == 0)
        k = r - pos.size
        u = rng.gen.random((n, zero.size))
        fill = zero[np.argpartition(u, k - 1, axis=1)[:, :k]]
        idx = np.concatenate([np.broadcast_to(pos, (n, pos.size)), fill], axis=1)
    return np.sort(idx, axis=1)


def sample_ordered(weights, r: int, rng: RngStream) -> np.ndarray:
    """One draw with the sequential order preserved: index k of the result is
    the k-th draw of the successive-sampling law (ascending key order)."""
    w = validate_weights(weights)
    if not 1 <= r <= w.size:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= m={w.size}")
    pos = np.flatnonzero(w > 0)
    if pos.size >= r:
        keys = rng.gen.exponential(size=pos.size) / w[pos]
        return pos[np.argsort(keys)[:r]]
    zero = np.flatnonzero(w == 0)
    k = r - pos.size
    keys = rng.gen.exponential(size=pos.size) / w[pos]
    head = pos[np.argsort(keys)]
    tail = zero[np.argsort(rng.gen.random(zero.size))[:k]]
    return np.concatenate([head, tail])


def _exact_inclusion(w: np.ndarray, r: int) -> np.ndarray:
    """Subset DP. The law's denominators depend only on the set drawn so far,
    so P(drawn set = S) accumulates over masks level by level."""
    m = w.size
    pos = np.flatnonzero(w > 0)
    p = np.zeros(m)
    if pos.size < r:
        p[pos] = 1.0
        zero = np.flatnonzero(w == 0)
        p[zero] = (r - pos.size) / zero.size
        return p
    wp = w[pos]
    level = {0: (1.0, 0.0)}  # mask -> (probability, drawn mass)
    for _ in range(r):
        nxt: dict[int, list[float]] = {}
        for mask, (prob, mass) in level.items():
            rem = 1.0 - mass
            for j in range(pos.size):
                bit = 1 << j
                if mask & bit:
                    continue
                q = prob * wp[j] / rem
                cur = nxt.get(mask | bit)
                if cur is None:
                    nxt[mask | bit] = [q, mass + wp[j]]
                else:
                    cur[0] += q
        level = {k: (v[0], v[1]) for k, v in nxt.items()}
    for mask, (prob, _) in level.items():
        for j in range(pos.size):
            if mask & (1 << j):
                p[pos[j]] += prob
    # accumulation can overshoot 1 by an ulp; these are probabilities
    return np.clip(p, 0.0, 1.0)


def inclusion_probabilities(
    weights,
    r: int,
    method: str = "exact",
    *,
    trials: int = 100_000,
    rng: Optional[RngStream] = None,
) -> np.ndarray:
    """P(i in sample) for every index i, under the sampling law above.

    method='exact' enumerates (m <= EXACT_MAX_DIM); method='monte-carlo'
    estimates from `trials` draws with standard error <= 0.5/sqrt(trials).
    """
    w = validate_weights(weights)
    m = w.size
    if not 1 <= r <= m:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= m={m}")
    if method == "exact":
        if m > EXACT_MAX_DIM:
            raise ValueError(
                f"exact enumeration capped at m <= {EXACT_MAX_DIM} (got m={m}); "
                "use method='monte-carlo'"
            )
        return _exact_inclusion(w, r)
    if method == "monte-carlo":
        if rng is None:
            raise ValueError("monte-carlo method needs an RngStream")
        draws = sample_many(w, r, trials, rng)
        return np.bincount(draws.ravel(), minlength=m) / trials
    raise ValueError(f"unknown method {method!r}")


def min_inclusion_probability(
    weights,
    r: int,
    method: str = "exact",
    *,
    trials: int = 100_000,
    rng: Optional[RngStream] = None,
) -> float:
    """Minimum index-inclusion probability (delta in the convergence bounds)."""
    return float(np.min(inclusion_probabilities(weights, r, method, trials=trials, rng=rng)))


# ---------------------------------------------------------------------------
# projectors and selectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Projector:
    """Orthonormal m x r basis plus provenance."""

    basis: np.ndarray
    source_indices: Optional[tuple[int, ...]] = None
    created_at_step: int = 0

    def __post_init__(self):
        b = matcore.as_matrix(self.basis, "projector basis")
        object.__setattr__(self, "basis", b)
        dev = orthonormality_deviation(b)
        if dev > _ORTHO_TOL:
            raise ValueError(f"basis is not orthonormal: max |P'P - I| = {dev:.3e}")
        if self.source_indices is not None:
            idx = tuple(int(i) for i in self.source_indices)
            if any(b2 <= b1 for b1, b2 in zip(idx, idx[1:])):
                raise ValueError(f"source_indices must be strictly increasing, got {idx}")
            if len(idx) != b.shape[1]:
                raise ValueError("source_indices length must equal basis rank")
            object.__setattr__(self, "source_indices", idx)

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]


def orthonormality_deviation(basis: np.ndarray) -> float:
    g = basis.T @ basis
    return float(np.max(np.abs(g - np.eye(basis.shape[1]))))


@dataclass(frozen=True)
class SelectorKind:
    """Which selector to run, at what rank, refreshed how often."""

    kind: str  # "dominant" | "sara" | "random"
    rank: int
    refresh_period: int

    def __post_init__(self):
        if self.kind not in ("dominant", "sara", "random"):
            raise ValueError(f"unknown selector kind {self.kind!r}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")


def select_sara(g, r: int, rng: RngStream, step: int = 0) -> Projector:
    """Importance-sampled selection: draw r left singular vectors of g with
    probabilities proportional to their singular values."""
    g = matcore.as_matrix(g, "gradient")
    k = min(g.shape)
    if not 1 <= r <= k:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= min(shape)={k}")
    factors = matcore.svd(g)
    weights = singular_weights(factors.S)
    idx = sample_without_replacement(weights, r, rng)
    basis = np.ascontiguousarray(factors.U[:, idx])
    return Projector(basis, tuple(int(i) for i in idx), step)


def select_dominant(g, r: int, step: int = 0) -> Projector:
    """The r leading left singular vectors of g."""
    g = matcore.as_matrix(g, "gradient")
    k = min(g.shape)
    if not 1 <= r <= k:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= min(shape)={k}")
    factors = matcore.svd(g)
    basis = np.ascontiguousarray(factors.U[:, :r])
    return Projector(basis, tuple(range(r)), step)


def select_random(m: int, r: int, rng: RngStream, step: int = 0) -> Projector:
    """Random orthonormal basis, independent of the gradient."""
    if not 1 <= r <= m:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= m={m}")
    basis = matcore.qr_orthonormal(matcore.gaussian_matrix(rng, m, r))
    return Projector(basis, None, step)


def refresh_projector(
    kind: SelectorKind,
    g,
    prev: Optional[Projector],
    step: int,
    rng: Optional[RngStream] = None,
) -> Projector:
    """Fresh selection when step % refresh_period == 0, else pass prev through."""
    if step % kind.refresh_period != 0:
        if prev is None:
            raise ValueError(f"no previous projector to reuse at step {step}")
        return prev
    if kind.kind == "dominant":
        return select_dominant(g, kind.rank, step)
    if rng is None:
        raise ValueError(f"selector {kind.kind!r} needs an RngStream")
    if kind.kind == "sara":
        return select_sara(g, kind.rank, rng, step)
    return select_random(matcore.as_matrix(g).shape[0], kind.rank, rng, step)


# ---------------------------------------------------------------------------
# projector log: JSON-lines records, bases in binary sidecars
# ---------------------------------------------------------------------------


@dataclass
class ProjectorLogEntry:
    step: int
    layer: str
    selector: str
    source_indices: Optional[list[int]]
    basis: np.ndarray = field(repr=False)


class ProjectorLogWriter:
    """Appends one JSONL record per refresh; bases go to <log dir>/<sidecar>/."""

    def __init__(self, log_path, sidecar_dir: str = "projector_bases"):
        self.log_path = str(log_path)
        self.sidecar_dir = sidecar_dir
        os.makedirs(os.path.join(os.path.dirname(self.log_path) or ".", sidecar_dir), exist_ok=True)
        self._fh = open(self.log_path, "w", encoding="utf-8")

    def append(self, step: int, layer: str, selector: str, projector: Projector) -> None:
        rel = os.path.join(self.sidecar_dir, f"{layer}_step{step:08d}.mat")
        matcore.save_matrix(os.path.join(os.path.dirname(self.log_path) or ".", rel), projector.basis)
        record = {
            "step": int(step),
            "layer": layer,
            "selector": selector,
            "source_indices": None
            if projector.source_indices is None
            else [int(i) for i in projector.source_indices],
            "basis_path": rel.replace(os.sep, "/"),
        }
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_projector_log(log_path) -> list[ProjectorLogEntry]:
    """Load all records (bases included) from a projector log."""
    base_dir = os.path.dirname(str(log_path)) or "."
    entries = []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            basis = matcore.load_matrix(os.path.join(base_dir, rec["basis_path"]))
            entries.append(
                ProjectorLogEntry(
                    step=int(rec["step"]),
                    layer=rec["layer"],
                    selector=rec["selector"],
                    source_indices=rec["source_indices"],
                    basis=basis,
                )
            )
    return entries
