"""Low-rank optimizer family.

Every step routine consumes a per-layer projector P (m x r, orthonormal
columns) and a per-layer state object, mutates the state in place, and returns
the new weights. Moment recursions are deliberately NOT bias-corrected, and
weight decay is absent throughout.

Projected-Adam recursions, shared by the family:

    R = P' G
    M = b1 M + (1 - b1) R
    V = b2 V + (1 - b2) R o R          (or a factored / per-row proxy)
    x <- x - eta * alpha * P (M / (sqrt(V) + xi))

The momentum-SGD variant keeps its momentum in subspace coordinates and
re-projects it through old and new bases whenever the subspace changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import matcore
from .matcore import matmul
from .subspace import Projector

__all__ = [
    "HyperParams",
    "AdamState",
    "AdafactorState",
    "AdamMiniState",
    "MomentumState",
    "Quantized8State",
    "QuantizedAdamState",
    "OPTIMIZER_KINDS",
    "full_adam_step",
    "galore_adam_step",
    "fira_adam_step",
    "galore_adafactor_step",
    "galore_adam_mini_step",
    "galore_adam_8bit_step",
    "msgd_step",
    "quantize_state",
    "dequantize_state",
    "init_state",
    "step_dispatch",
    "save_checkpoint",
    "load_checkpoint",
    "LayerSnapshot",
]

OPTIMIZER_KINDS = (
    "full-adam",
    "galore-adam",
    "fira-adam",
    "galore-adafactor",
    "galore-adam-mini",
    "galore-adam-8bit",
    "msgd",
)


@dataclass(frozen=True)
class HyperParams:
    eta: float
    rank: int
    refresh_period: int
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    xi: float = 1e-8

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        # beta1 = 1 is admitted for the noiseless momentum-SGD schedule limit
        if not 0 <= self.beta1 <= 1:
            raise ValueError("beta1 must lie in [0, 1]")
        if not 0 <= self.beta2 < 1:
            raise ValueError("beta2 must lie in [0, 1)")
        if not self.xi > 0:
            raise ValueError("xi must be > 0")
        if self.rank < 1 or self.refresh_period < 1:
            raise ValueError("rank and refresh_period must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0


@dataclass
class AdafactorState:
    m: np.ndarray
    row_acc: np.ndarray  # (r,)
    col_acc: np.ndarray  # (n,)
    step_count: int = 0


@dataclass
class AdamMiniState:
    m: np.ndarray
    v_rows: np.ndarray  # (r,), one second-moment scalar per row block
    step_count: int = 0


@dataclass
class MomentumState:
    m_lr: np.ndarray  # (r, n) momentum in subspace coordinates
    step_count: int = 0


def _coords(projector: Projector, g: np.ndarray) -> np.ndarray:
    if projector.dim != g.shape[0]:
        raise matcore.ShapeMismatchError(
            f"projector dim {projector.dim} does not match gradient rows {g.shape[0]}"
        )
    return matmul(projector.basis.T, g)


def _check_state_shape(arr: np.ndarray, rank: int, n: int, what: str) -> None:
    if arr.shape != (rank, n):
        raise matcore.ShapeMismatchError(f"{what} has shape {arr.shape}, expected {(rank, n)}")


def full_adam_step(x, g, state: AdamState, hp: HyperParams) -> np.ndarray:
    """Full-rank baseline: the projected recursions with P = I."""
    x = matcore.as_matrix(x, "x")
    g = matcore.as_matrix(g, "g")
    if x.shape != g.shape:
        raise matcore.ShapeMismatchError(f"x {x.shape} vs g {g.shape}")
    _check_state_shape(state.m, x.shape[0], x.shape[1], "M")
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * (g * g)
    state.step_count += 1
    update = hp.alpha * (state.m / (np.sqrt(state.v) + hp.xi))
    return x - hp.eta * update


def galore_adam_step(x, g, projector: Projector, state: AdamState, hp: HyperParams) -> np.ndarray:
    x = matcore.as_matrix(x, "x")
    g = matcore.as_matrix(g, "g")
    if x.shape != g.shape:
        raise matcore.ShapeMismatchError(f"x {x.shape} vs g {g.shape}")
    r = _coords(projector, g)
    _check_state_shape(state.m, projector.rank, x.shape[1], "M")
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * r
    state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * (r * r)
    state.step_count += 1
    processed = state.m / (np.sqrt(state.v) + hp.xi)
    return x - hp.eta * hp.alpha * matmul(projector.basis, processed)


def fira_adam_step(x, g, projector: Projector, state: AdamState, hp: HyperParams) -> np.ndarray:
    """Adds the out-of-subspace residual, scaled by the ratio of the processed
    low-rank update magnitude to the raw low-rank coordinate magnitude."""
    x = matcore.as_matrix(x, "x")
    g = matcore.as_matrix(g, "g")
    if x.shape != g.shape:
        raise matcore.ShapeMismatchError(f"x {x.shape} vs g {g.shape}")
    r = _coords(projector, g)
    residual = g - matmul(projector.basis, r)
    _check_state_shape(state.m, projector.rank, x.shape[1], "M")
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * r
    state.v = hp.beta2 * state.v + (1.0 - hp.beta2) * (r * r)
    state.step_count += 1
    processed = state.m / (np.sqrt(state.v) + hp.xi)
    update = hp.alpha * matmul(projector.basis, processed)
    scale = matcore.frobenius_norm(update) / (matcore.frobenius_norm(processed) + hp.xi)
    return x - hp.eta * update - hp.eta * scale * residual


def galore_adafactor_step(
    x, g, projector: Projector, state: AdafactorState, hp: HyperParams
) -> np.ndarray:
    """Second moment kept as row/column accumulators whose rank-1 outer product
    (normalized by total row mass) stands in for V."""
    x = matcore.as_matrix(x, "x")
    g = matcore.as_matrix(g, "g")
    if x.shape != g.shape:
        raise matcore.ShapeMismatchError(f"x {x.shape} vs g {g.shape}")
    r = _coords(projector, g)
    _check_state_shape(state.m, projector.rank, x.shape[1], "M")
    rsq = r * r
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * r
    state.row_acc = hp.beta2 * state.row_acc + (1.0 - hp.beta2) * rsq.sum(axis=1)
    state.col_acc = hp.beta2 * state.col_acc + (1.0 - hp.beta2) * rsq.sum(axis=0)
    state.step_count += 1
    total = float(state.row_acc.sum())
    if total > 0.0:
        v_hat = np.outer(state.row_acc, state.col_acc) / total
    else:
        v_hat = np.zeros_like(state.m)
    processed = state.m / (np.sqrt(v_hat) + hp.xi)
    return x - hp.eta * hp.alpha * matmul(projector.basis, processed)


def galore_adam_mini_step(
    x, g, projector: Projector, state: AdamMiniState, hp: HyperParams
) -> np.ndarray:
    """One second-moment scalar per row of the projected gradient."""
    x = matcore.as_matrix(x, "x")
    g = matcore.as_matrix(g, "g")
    if x.shape != g.shape:
        raise matcore.ShapeMismatchError(f"x {x.shape} vs g {g.shape}")
    r = _coords(projector, g)
    _check_state_shape(state.m, projector.rank, x.shape[1], "M")
    state.m = hp.beta1 * state.m + (1.0 - hp.beta1) * r
    state.v_rows = hp.beta2 * state.v_rows + (1.0 - hp.beta2) * (r * r).mean(axis=1)
    state.step_count += 1
    processed = state.m / (np.sqrt(state.v_rows)[:, None] + hp.xi)
    return x - hp.eta * hp.alpha * matmul(projector.basis, processed)


def msgd_step(
    x,
    g,
    projector: Projector,
    state: MomentumState,
    eta: float,
    beta1: float,
    prev_projector: Optional[Projector] = None,
    refreshed: bool = False,
) -> np.ndarray:
    """Momentum SGD in subspace coordinates with re-projection at refreshes.

    On a refresh the stored momentum is expanded through the old basis and
    compressed through the new one before the usual recursion
    m <- (1 - b1) m + b1 P'G; the update is x <- x - eta * P m.
    """
    x = matcore.as_matrix(x, "x")
    g = matcore.as_matrix(g, "g")
    if x.shape != g.shape:
        raise matcore.ShapeMismatchError(f"x {x.shape} vs g {g.shape}")
    if refreshed:
        if prev_projector is None:
            raise ValueError("momentum re-projection needs the previous projector")
        carried = matmul(prev_projector.basis, state.m_lr)
        state.m_lr = matmul(projector.basis.T, carried)
    _check_state_shape(state.m_lr, projector.rank, x.shape[1], "momentum")
    state.m_lr = (1.0 - beta1) * state.m_lr + beta1 * _coords(projector, g)
    state.step_count += 1
    return x - eta * matmul(projector.basis, state.m_lr)


# ---------------------------------------------------------------------------
# 8-bit state storage: blockwise symmetric absmax over 256-element blocks
# ---------------------------------------------------------------------------

QUANT_BLOCK = 256


@dataclass
class Quantized8State:
    codes: np.ndarray  # int8, flat, row-major
    scales: np.ndarray  # float64, one per block
    shape: tuple[int, int]


def _round_half_away(y: np.ndarray) -> np.ndarray:
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize_state(a) -> Quantized8State:
    a = matcore.as_matrix(a, "state")
    flat = a.ravel()
    n = flat.size
    nblocks = (n + QUANT_BLOCK - 1) // QUANT_BLOCK
    padded = np.zeros(nblocks * QUANT_BLOCK)
    padded[:n] = flat
    blocks = padded.reshape(nblocks, QUANT_BLOCK)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    codes = _round_half_away(blocks / safe[:, None] * 127.0)
    codes[scales == 0] = 0.0
    codes = np.clip(codes, -127, 127).astype(np.int8)
    return Quantized8State(codes.ravel()[:n].copy(), scales, a.shape)


def dequantize_state(q: Quantized8State) -> np.ndarray:
    n = q.shape[0] * q.shape[1]
    nblocks = q.scales.size
    padded = np.zeros(nblocks * QUANT_BLOCK)
    padded[:n] = q.codes.astype(np.float64)
    values = padded.reshape(nblocks, QUANT_BLOCK) / 127.0 * q.scales[:, None]
    return values.ravel()[:n].reshape(q.shape)


@dataclass
class QuantizedAdamState:
    m_q: Quantized8State
    v_q: Quantized8State
    step_count: int = 0


def galore_adam_8bit_step(
    x, g, projector: Projector, state: QuantizedAdamState, hp: HyperParams
) -> np.ndarray:
    """Dequantize moments, take an exact projected-Adam step, requantize."""
    work = AdamState(dequantize_state(state.m_q), dequantize_state(state.v_q), state.step_count)
    x_new = galore_adam_step(x, g, projector, work, hp)
    state.m_q = quantize_state(work.m)
    state.v_q = quantize_state(work.v)
    state.step_count = work.step_count
    return x_new


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def init_state(kind: str, shape: tuple[int, int], rank: int):
    m, n = shape
    if kind == "full-adam":
        return AdamState(np.zeros((m, n)), np.zeros((m, n)))
    if kind in ("galore-adam", "fira-adam"):
        return AdamState(np.zeros((rank, n)), np.zeros((rank, n)))
    if kind == "galore-adafactor":
        return AdafactorState(np.zeros((rank, n)), np.zeros(rank), np.zeros(n))
    if kind == "galore-adam-mini":
        return AdamMiniState(np.zeros((rank, n)), np.zeros(rank))
    if kind == "galore-adam-8bit":
        zero = np.zeros((rank, n))
        return QuantizedAdamState(quantize_state(zero), quantize_state(zero))
    if kind == "msgd":
        return MomentumState(np.zeros((rank, n)))
    raise ValueError(f"unknown optimizer kind {kind!r}")


def step_dispatch(
    kind: str,
    x,
    g,
    projector: Optional[Projector],
    state,
    hp: HyperParams,
    *,
    prev_projector: Optional[Projector] = None,
    refreshed: bool = False,
) -> np.ndarray:
    if kind not in OPTIMIZER_KINDS:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if kind == "full-adam":
        return full_adam_step(x, g, state, hp)
    if projector is None:
        raise ValueError(f"optimizer {kind!r} needs a projector")
    if kind == "galore-adam":
        return galore_adam_step(x, g, projector, state, hp)
    if kind == "fira-adam":
        return fira_adam_step(x, g, projector, state, hp)
    if kind == "galore-adafactor":
        return galore_adafactor_step(x, g, projector, state, hp)
    if kind == "galore-adam-mini":
        return galore_adam_mini_step(x, g, projector, state, hp)
    if kind == "galore-adam-8bit":
        return galore_adam_8bit_step(x, g, projector, state, hp)
    if kind == "msgd":
        return msgd_step(
            x, g, projector, state, hp.eta, hp.beta1,
            prev_projector=prev_projector, refreshed=refreshed,
        )
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints: per-layer binaries plus a JSON manifest
# ---------------------------------------------------------------------------


@dataclass
class LayerSnapshot:
    x: np.ndarray
    state: object = None
    projector: Optional[Projector] = None


def _save_state(dirpath: str, layer: str, state) -> dict:
    def mat(tag, arr):
        rel = f"{layer}.{tag}.mat"
        matcore.save_matrix(os.path.join(dirpath, rel), np.atleast_2d(arr))
        return rel

    if state is None:
        return {"type": "none"}
    if isinstance(state, AdamState):
        return {"type": "adam", "m": mat("m", state.m), "v": mat("v", state.v),
                "step_count": state.step_count}
    if isinstance(state, AdafactorState):
        return {"type": "adafactor", "m": mat("m", state.m), "row_acc": mat("row", state.row_acc),
                "col_acc": mat("col", state.col_acc), "step_count": state.step_count}
    if isinstance(state, AdamMiniState):
        return {"type": "adam-mini", "m": mat("m", state.m), "v_rows": mat("vrows", state.v_rows),
                "step_count": state.step_count}
    if isinstance(state, MomentumState):
        return {"type": "momentum", "m_lr": mat("mlr", state.m_lr), "step_count": state.step_count}
    if isinstance(state, QuantizedAdamState):
        rels = {}
        for tag, q in (("m", state.m_q), ("v", state.v_q)):
            code_rel = f"{layer}.{tag}.codes.i8"
            with open(os.path.join(dirpath, code_rel), "wb") as f:
                f.write(q.codes.tobytes())
            rels[tag] = {"codes": code_rel, "scales": mat(f"{tag}scales", q.scales),
                         "shape": list(q.shape)}
        return {"type": "adam-8bit", "step_count": state.step_count, **rels}
    raise TypeError(f"unknown state type {type(state).__name__}")


def _load_state(dirpath: str, entry: dict):
    def mat(rel, flat=False):
        arr = matcore.load_matrix(os.path.join(dirpath, rel))
        return arr.ravel() if flat else arr

    kind = entry["type"]
    if kind == "none":
        return None
    if kind == "adam":
        return AdamState(mat(entry["m"]), mat(entry["v"]), entry["step_count"])
    if kind == "adafactor":
        return AdafactorState(mat(entry["m"]), mat(entry["row_acc"], flat=True),
                              mat(entry["col_acc"], flat=True), entry["step_count"])
    if kind == "adam-mini":
        return AdamMiniState(mat(entry["m"]), mat(entry["v_rows"], flat=True), entry["step_count"])
    if kind == "momentum":
        return MomentumState(mat(entry["m_lr"]), entry["step_count"])
    if kind == "adam-8bit":
        def quant(tag):
            e = entry[tag]
            with open(os.path.join(dirpath, e["codes"]), "rb") as f:
                codes = np.frombuffer(f.read(), dtype=np.int8).copy()
            return Quantized8State(codes, mat(e["scales"], flat=True), tuple(e["shape"]))
        return QuantizedAdamState(quant("m"), quant("v"), entry["step_count"])
    raise ValueError(f"unknown state type {kind!r} in manifest")


def save_checkpoint(
    dirpath,
    kind: str,
    hp: HyperParams,
    step_count: int,
    layers: dict[str, LayerSnapshot],
) -> None:
    dirpath = str(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "optimizer": kind,
        "hyperparams": {
            "eta": hp.eta, "rank": hp.rank, "refresh_period": hp.refresh_period,
            "alpha": hp.alpha, "beta1": hp.beta1, "beta2": hp.beta2, "xi": hp.xi,
        },
        "step_count": int(step_count),
        "layers": {},
    }
    for name, snap in layers.items():
        x_rel = f"{name}.x.mat"
        matcore.save_matrix(os.path.join(dirpath, x_rel), snap.x)
        proj = None
        if snap.projector is not None:
            p_rel = f"{name}.projector.mat"
            matcore.save_matrix(os.path.join(dirpath, p_rel), snap.projector.basis)
            proj = {
                "basis": p_rel,
                "source_indices": None if snap.projector.source_indices is None
                else list(snap.projector.source_indices),
                "created_at_step": snap.projector.created_at_step,
            }
        manifest["layers"][name] = {
            "x": x_rel,
            "state": _save_state(dirpath, name, snap.state),
            "projector": proj,
        }
    with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(dirpath) -> tuple[str, HyperParams, int, dict[str, LayerSnapshot]]:
    dirpath = str(dirpath)
    path = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    hp = HyperParams(**manifest["hyperparams"])
    layers = {}
    for name, entry in manifest["layers"].items():
        x = matcore.load_matrix(os.path.join(dirpath, entry["x"]))
        proj = None
        if entry["projector"] is not None:
            pe = entry["projector"]
            basis = matcore.load_matrix(os.path.join(dirpath, pe["basis"]))
            src = None if pe["source_indices"] is None else tuple(pe["source_indices"])
            proj = Projector(basis, src, pe["created_at_step"])
        layers[name] = LayerSnapshot(x, _load_state(dirpath, entry["state"]), proj)
    return manifest["optimizer"], hp, manifest["step_count"], layers
