"""Subspace-overlap and update-spectrum diagnostics.

overlap(U, V) = ||U'V||_F^2 / r for two orthonormal m x r bases; 1 means the
spans coincide, 0 means they are orthogonal. The value depends only on the
spans, so singular-vector signs and column order are irrelevant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import matcore
from .subspace import ProjectorLogEntry, orthonormality_deviation

__all__ = [
    "subspace_overlap",
    "OverlapPoint",
    "adjacent_overlap",
    "anchor_overlap",
    "SpectrumReport",
    "diff_spectrum",
    "update_spectrum",
    "write_metric_rows",
]

#: Inputs may have been serialized and re-read; accept slightly degraded bases.
METRIC_ORTHO_TOL = 1e-8


def _check_basis(u: np.ndarray, name: str) -> np.ndarray:
    u = matcore.as_matrix(u, name)
    dev = orthonormality_deviation(u)
    if dev > METRIC_ORTHO_TOL:
        raise ValueError(f"{name} is not orthonormal: max |U'U - I| = {dev:.3e}")
    return u


def subspace_overlap(u, v) -> float:
    """Span overlap of two orthonormal m x r bases, in [0, 1]."""
    u = _check_basis(u, "U")
    v = _check_basis(v, "V")
    if u.shape != v.shape:
        raise matcore.ShapeMismatchError(f"bases have shapes {u.shape} and {v.shape}")
    cross = matcore.matmul(u.T, v)
    return float(np.sum(cross * cross)) / u.shape[1]


@dataclass(frozen=True)
class OverlapPoint:
    step: int
    layer: str
    value: float


def _by_layer(entries: Iterable[ProjectorLogEntry]) -> dict[str, list[ProjectorLogEntry]]:
    groups: dict[str, list[ProjectorLogEntry]] = {}
    for e in entries:
        groups.setdefault(e.layer, []).append(e)
    for layer in groups:
        groups[layer].sort(key=lambda e: e.step)
    return groups


def adjacent_overlap(entries: Iterable[ProjectorLogEntry]) -> list[OverlapPoint]:
    """Overlap between consecutive refresh-time projectors, reported at the
    later step. Layers with fewer than two refreshes contribute nothing."""
    points = []
    for layer, group in sorted(_by_layer(entries).items()):
        for prev, cur in zip(group, group[1:]):
            points.append(OverlapPoint(cur.step, layer, subspace_overlap(prev.basis, cur.basis)))
    return points


def anchor_overlap(entries: Iterable[ProjectorLogEntry], anchor_step: int) -> list[OverlapPoint]:
    """Overlap of each refresh at step >= anchor_step against the anchor-step
    projector of the same layer."""
    points = []
    groups = _by_layer(entries)
    for layer, group in sorted(groups.items()):
        anchors = [e for e in group if e.step == anchor_step]
        if not anchors:
            raise ValueError(f"no projector logged at anchor step {anchor_step} for layer {layer!r}")
        anchor = anchors[0]
        for e in group:
            if e.step >= anchor_step:
                points.append(OverlapPoint(e.step, layer, subspace_overlap(anchor.basis, e.basis)))
    return points


@dataclass(frozen=True)
class SpectrumReport:
    layer: str
    normalized: np.ndarray  # descending; leading value 1 unless the diff is zero
    stable_rank: float  # ||D||_F^2 / sigma_max(D)^2; 0 for a zero diff


def diff_spectrum(w_a, w_b, layer: str = "") -> SpectrumReport:
    a = matcore.as_matrix(w_a, "W_a")
    b = matcore.as_matrix(w_b, "W_b")
    if a.shape != b.shape:
        raise matcore.ShapeMismatchError(f"checkpoint shapes {a.shape} and {b.shape} differ")
    diff = b - a
    s = matcore.svd(diff).S
    top = float(s[0])
    if top == 0.0:
        return SpectrumReport(layer, np.zeros_like(s), 0.0)
    return SpectrumReport(layer, s / top, float(np.sum(s * s)) / (top * top))


def update_spectrum(ckpt_a: dict[str, np.ndarray], ckpt_b: dict[str, np.ndarray]) -> list[SpectrumReport]:
    """Per-layer spectra of the weight difference between two checkpoints."""
    if set(ckpt_a) != set(ckpt_b):
        raise ValueError(f"checkpoint layers differ: {sorted(ckpt_a)} vs {sorted(ckpt_b)}")
    return [diff_spectrum(ckpt_a[layer], ckpt_b[layer], layer) for layer in sorted(ckpt_a)]


def write_metric_rows(path, rows: Sequence[tuple]) -> None:
    """CSV of (step, layer, metric, value) rows; floats via repr for exact replay."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,layer,metric,value\n")
        for step, layer, metric, value in rows:
            f.write(f"{int(step)},{layer},{metric},{value!r}\n")
