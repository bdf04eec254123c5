"""Dense float64 matrix primitives: arithmetic, SVD/QR, seeded splittable RNG streams,
and a flat binary / JSON serialization format.

Everything downstream (selectors, optimizers, metrics) goes through these helpers so
that shape validation, sign canonicalization and determinism live in one place.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import threading
from contextlib import contextmanager
from typing import NamedTuple

import numpy as np
from numpy.random import Generator, Philox

__all__ = [
    "ShapeMismatchError",
    "SvdConvergenceError",
    "RankDeficientError",
    "set_deterministic",
    "deterministic_enabled",
    "deterministic_mode",
    "as_matrix",
    "matmul",
    "transpose",
    "add_scaled",
    "hadamard",
    "frobenius_norm",
    "spectral_norm",
    "SvdFactors",
    "svd",
    "qr_orthonormal",
    "RngStream",
    "gaussian_matrix",
    "save_matrix",
    "load_matrix",
    "matrix_to_json",
    "matrix_from_json",
]


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class SvdConvergenceError(RuntimeError):
    """The SVD iteration failed to converge."""


class RankDeficientError(ValueError):
    """Input matrix does not have full column rank."""


# ---------------------------------------------------------------------------
# deterministic mode
#
# When enabled, matmul routes through np.einsum, whose reduction is a fixed
# sequential loop, and the deterministic_mode context additionally pins the
# BLAS thread pools to one thread so LAPACK factorizations are bit-stable
# regardless of the ambient thread count. Default mode uses `@` and whatever
# parallelism BLAS brings.
# ---------------------------------------------------------------------------

_state = threading.local()


def set_deterministic(flag: bool) -> None:
    _state.deterministic = bool(flag)


def deterministic_enabled() -> bool:
    return getattr(_state, "deterministic", False)


@contextmanager
def deterministic_mode(flag: bool = True):
    """Temporarily force (or disable) bit-stable sequential reductions."""
    prev = deterministic_enabled()
    set_deterministic(flag)
    try:
        if flag:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=1):
                yield
        else:
            yield
    finally:
        set_deterministic(prev)


# ---------------------------------------------------------------------------
# validation and elementwise / product operations
# ---------------------------------------------------------------------------


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, 2-D, float64 array. Raises ValueError otherwise."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_shapes(a: np.ndarray, b: np.ndarray, op: str, elementwise: bool) -> None:
    if elementwise:
        if a.shape != b.shape:
            raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")
    else:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"{op}: inner dims of {a.shape} and {b.shape} differ")


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _check_shapes(a, b, "matmul", elementwise=False)
    if deterministic_enabled():
        return np.einsum("ij,jk->ik", a, b)
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def add_scaled(a, b, c: float) -> np.ndarray:
    """a + c * b, elementwise."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _check_shapes(a, b, "add_scaled", elementwise=True)
    return a + c * b


def hadamard(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _check_shapes(a, b, "hadamard", elementwise=True)
    return a * b


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    # np.sum uses pairwise reduction over a fixed layout: bit-stable either mode
    return math.sqrt(float(np.sum(a * a)))


def spectral_norm(a) -> float:
    """Largest singular value."""
    a = as_matrix(a)
    try:
        return float(np.linalg.norm(a, 2))
    except np.linalg.LinAlgError as e:  # pragma: no cover - LAPACK rarely fails here
        raise SvdConvergenceError(f"spectral norm failed for shape {a.shape}: {e}") from e


# ---------------------------------------------------------------------------
# factorizations
# ---------------------------------------------------------------------------


class SvdFactors(NamedTuple):
    """Thin SVD A = U @ diag(S) @ Vt with S descending and sign-canonical U."""

    U: np.ndarray  # (m, k)
    S: np.ndarray  # (k,)
    Vt: np.ndarray  # (k, n)


def svd(a) -> SvdFactors:
    """Thin SVD with each left singular vector flipped so its first nonzero
    entry (scanning top-down) is positive. Deterministic for a fixed input."""
    a = as_matrix(a, "svd input")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise SvdConvergenceError(f"SVD did not converge for shape {a.shape}: {e}") from e
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return SvdFactors(np.ascontiguousarray(u), s, np.ascontiguousarray(vt))


def qr_orthonormal(a) -> np.ndarray:
    """Orthonormal basis (m x r) for the column span of a full-column-rank input.

    Signs fixed so the R factor has a positive diagonal, which makes the map
    idempotent on already-orthonormal input.
    """
    a = as_matrix(a, "qr input")
    m, r = a.shape
    if m < r:
        raise ShapeMismatchError(f"qr_orthonormal needs rows >= cols, got {a.shape}")
    q, rmat = np.linalg.qr(a)
    diag = np.diagonal(rmat)
    tol = max(m, r) * np.finfo(np.float64).eps * max(np.max(np.abs(diag)), 1e-300)
    bad = np.flatnonzero(np.abs(diag) <= tol)
    if bad.size:
        raise RankDeficientError(f"column {int(bad[0])} is linearly dependent (|R[j,j]| <= {tol:.3e})")
    signs = np.sign(diag)
    return np.ascontiguousarray(q * signs)


# ---------------------------------------------------------------------------
# RNG streams
#
# Counter-based Philox keyed by (seed, stream_id): the same pair replays the
# same sequence on any platform, and distinct stream ids are independent, so
# per-layer / per-step streams can be derived freely without coupling draws.
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class RngStream:
    """A named, reproducible random stream. Derive sub-streams with child()."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen: Generator | None = None

    @property
    def gen(self) -> Generator:
        if self._gen is None:
            key = self.seed | (self.stream_id << 64)
            self._gen = Generator(Philox(key=key))
        return self._gen

    def child(self, tag) -> "RngStream":
        """Independent stream addressed by (this stream, tag)."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def gaussian_matrix(rng: RngStream, m: int, n: int) -> np.ndarray:
    """i.i.d. standard normal (m x n)."""
    if m < 1 or n < 1:
        raise ValueError(f"gaussian_matrix needs positive dims, got ({m}, {n})")
    return rng.gen.standard_normal((m, n))


# ---------------------------------------------------------------------------
# serialization
#
# Binary layout: u64-le rows, u64-le cols, then rows*cols float64-le values in
# row-major order. JSON form is nested row lists, for small fixtures.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def save_matrix(path, a) -> None:
    a = as_matrix(a)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(a.shape[0], a.shape[1]))
        f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        rows, cols = _HEADER.unpack(head)
        payload = f.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def matrix_to_json(a) -> str:
    return json.dumps([[float(v) for v in row] for row in as_matrix(a)])


def matrix_from_json(text: str) -> np.ndarray:
    return as_matrix(json.loads(text), "json matrix")
