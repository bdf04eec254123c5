"""Gradient oracles at desk scale.

Two objective families over lists of per-layer weight matrices (each stored
with rows <= cols):

* a layered least-squares quadratic with analytically known smoothness
  constant, minimum value and exact gradients, plus a bounded-noise sampler,
* a two-layer ReLU perceptron on seeded Gaussian blobs with hand-derived
  backpropagation; mini-batch resampling supplies its stochasticity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import matcore
from .matcore import RngStream, matmul

__all__ = [
    "NoiseSpec",
    "GradientSample",
    "validate_params",
    "QuadraticObjective",
    "random_quadratic",
    "MlpObjective",
    "noisy_grad",
    "finite_difference_grad",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Per-layer almost-sure Frobenius bounds on gradient noise."""

    sigmas: tuple[float, ...]

    def __post_init__(self):
        if any((not np.isfinite(s)) or s < 0 for s in self.sigmas):
            raise ValueError(f"sigmas must be finite and >= 0, got {self.sigmas}")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))

    @classmethod
    def uniform(cls, sigma: float, n_layers: int) -> "NoiseSpec":
        return cls((float(sigma),) * n_layers)

    @property
    def sigma_sq(self) -> float:
        return float(sum(s * s for s in self.sigmas))


@dataclass
class GradientSample:
    """One stochastic gradient draw across all layers."""

    grads: list[np.ndarray]
    loss: float
    noise_norms: list[float]


def validate_params(params: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Check the layered-parameter convention: 2-D, finite, rows <= cols."""
    out = []
    for l, p in enumerate(params):
        p = matcore.as_matrix(p, f"layer {l}")
        if p.shape[0] > p.shape[1]:
            raise ValueError(f"layer {l} has shape {p.shape}; store it with rows <= cols")
        out.append(p)
    return out


class QuadraticObjective:
    """f(x) = 0.5 * sum_l ||A_l x_l - B_l||_F^2.

    grad_l = A_l' (A_l x_l - B_l); the gradient map is Lipschitz with constant
    max_l sigma_max(A_l)^2, reported by smoothness().
    """

    def __init__(self, a_mats, b_mats, layer_names: Optional[Sequence[str]] = None):
        if len(a_mats) != len(b_mats) or not a_mats:
            raise ValueError("need equally many (nonzero) A and B matrices")
        self.a_mats = [matcore.as_matrix(a, f"A[{l}]") for l, a in enumerate(a_mats)]
        self.b_mats = [matcore.as_matrix(b, f"B[{l}]") for l, b in enumerate(b_mats)]
        for l, (a, b) in enumerate(zip(self.a_mats, self.b_mats)):
            if a.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: A rows {a.shape[0]} != B rows {b.shape[0]}")
            if a.shape[1] > b.shape[1]:
                raise ValueError(f"layer {l}: x shape {(a.shape[1], b.shape[1])} violates rows <= cols")
        self.layer_names = list(layer_names) if layer_names else [f"layer{l}" for l in range(len(a_mats))]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(a.shape[1], b.shape[1]) for a, b in zip(self.a_mats, self.b_mats)]

    def init_params(self, rng: RngStream, scale: float = 1.0) -> list[np.ndarray]:
        return [
            matcore.gaussian_matrix(rng.child(name), m, n) * scale
            for name, (m, n) in zip(self.layer_names, self.shapes)
        ]

    def _check(self, params) -> list[np.ndarray]:
        params = validate_params(params)
        if len(params) != len(self.a_mats):
            raise ValueError(f"expected {len(self.a_mats)} layers, got {len(params)}")
        for l, (p, (m, n)) in enumerate(zip(params, self.shapes)):
            if p.shape != (m, n):
                raise matcore.ShapeMismatchError(f"layer {l}: expected {(m, n)}, got {p.shape}")
        return params

    def eval(self, params) -> float:
        params = self._check(params)
        total = 0.0
        for a, b, x in zip(self.a_mats, self.b_mats, params):
            res = matmul(a, x) - b
            total += 0.5 * float(np.sum(res * res))
        return total

    def true_grad(self, params) -> list[np.ndarray]:
        params = self._check(params)
        return [
            matmul(a.T, matmul(a, x) - b)
            for a, b, x in zip(self.a_mats, self.b_mats, params)
        ]

    def smoothness(self) -> float:
        return max(matcore.spectral_norm(a) ** 2 for a in self.a_mats)

    def min_value(self) -> float:
        """inf f, from per-layer least-squares residuals."""
        total = 0.0
        for a, b in zip(self.a_mats, self.b_mats):
            x_star, *_ = np.linalg.lstsq(a, b, rcond=None)
            res = a @ x_star - b
            total += 0.5 * float(np.sum(res * res))
        return total


def random_quadratic(shapes, data_seed: int, layer_names=None, a_cond=None) -> QuadraticObjective:
    """Seeded instance with square A_l (m x m) and dense B_l (m x n).

    With a_cond set, each A_l gets singular values linspace(1, sqrt(a_cond))
    on random orthogonal factors, so the per-layer curvature spans exactly
    [1, a_cond] and the minimum sits at a seeded x*: B_l = A_l x*_l. A raw
    Gaussian A (a_cond=None) can be arbitrarily ill conditioned.
    """
    root = RngStream(data_seed).child("quadratic")
    a_mats, b_mats = [], []
    names = list(layer_names) if layer_names else [f"layer{l}" for l in range(len(shapes))]
    for name, (m, n) in zip(names, shapes):
        layer_rng = root.child(name)
        if a_cond is None:
            a = matcore.gaussian_matrix(layer_rng.child("A"), m, m)
            b = matcore.gaussian_matrix(layer_rng.child("B"), m, n)
        else:
            if a_cond < 1:
                raise ValueError("a_cond must be >= 1")
            u = matcore.qr_orthonormal(matcore.gaussian_matrix(layer_rng.child("U"), m, m))
            v = matcore.qr_orthonormal(matcore.gaussian_matrix(layer_rng.child("V"), m, m))
            spectrum = np.linspace(1.0, np.sqrt(a_cond), m)
            a = u @ np.diag(spectrum) @ v.T
            x_star = matcore.gaussian_matrix(layer_rng.child("xstar"), m, n)
            b = a @ x_star
        a_mats.append(a)
        b_mats.append(b)
    return QuadraticObjective(a_mats, b_mats, names)


class MlpObjective:
    """linear -> ReLU -> linear -> softmax cross-entropy on Gaussian blobs.

    Weights are stored oriented rows <= cols: w1 is (d, h) and the output
    layer is kept transposed as w2t with shape (c, h). Mini-batch selection is
    a pure function of (dataset_seed, step), so runs replay exactly.
    """

    layer_names = ("w1", "w2t")

    def __init__(
        self,
        layer_sizes: Sequence[int] = (32, 64, 32),
        n_samples: int = 512,
        batch_size: int = 64,
        dataset_seed: int = 0,
        center_spread: float = 2.0,
    ):
        d, h, c = (int(v) for v in layer_sizes)
        if c < 2:
            raise ValueError("need at least 2 classes")
        if n_samples < 2 or batch_size < 1 or batch_size > n_samples:
            raise ValueError(f"bad sample/batch sizes ({n_samples}, {batch_size})")
        if d > h or c > h:
            raise ValueError(f"layer sizes {layer_sizes} violate the rows <= cols orientation")
        self.d, self.h, self.c = d, h, c
        self.n_samples = int(n_samples)
        self.batch_size = int(batch_size)
        self.dataset_seed = int(dataset_seed)
        data_rng = RngStream(self.dataset_seed).child("dataset")
        centers = data_rng.child("centers").gen.standard_normal((c, d)) * center_spread
        self.labels = np.arange(self.n_samples) % c
        if np.unique(self.labels).size < 2:
            raise ValueError("degenerate dataset: fewer than 2 classes present")
        self.features = centers[self.labels] + data_rng.child("points").gen.standard_normal(
            (self.n_samples, d)
        )

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(self.d, self.h), (self.c, self.h)]

    def init_params(self, rng: RngStream) -> list[np.ndarray]:
        w1 = matcore.gaussian_matrix(rng.child("w1"), self.d, self.h) / np.sqrt(self.d)
        w2t = matcore.gaussian_matrix(rng.child("w2t"), self.c, self.h) / np.sqrt(self.h)
        return [w1, w2t]

    def minibatch(self, step: int) -> np.ndarray:
        """Row indices for the given step; pure in (dataset_seed, step)."""
        rng = RngStream(self.dataset_seed).child("batch").child(step)
        return np.sort(rng.gen.choice(self.n_samples, size=self.batch_size, replace=False))

    def _forward(self, params, rows):
        w1, w2t = params
        x = self.features[rows]
        z1 = matmul(x, w1)
        a1 = np.maximum(z1, 0.0)
        logits = matmul(a1, w2t.T)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        y = self.labels[rows]
        loss = float(-np.mean(np.log(probs[np.arange(len(rows)), y])))
        return x, z1, a1, probs, y, loss

    def _rows(self, indices) -> np.ndarray:
        return np.arange(self.n_samples) if indices is None else np.asarray(indices, dtype=int)

    def eval(self, params, indices=None) -> float:
        params = self._check(params)
        return self._forward(params, self._rows(indices))[-1]

    def grad(self, params, indices=None) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy and its gradient over the given rows (all by default)."""
        params = self._check(params)
        rows = self._rows(indices)
        x, z1, a1, probs, y, loss = self._forward(params, rows)
        dz2 = probs.copy()
        dz2[np.arange(len(rows)), y] -= 1.0
        dz2 /= len(rows)
        g_w2t = matmul(dz2.T, a1)
        da1 = matmul(dz2, params[1])
        dz1 = da1 * (z1 > 0.0)
        g_w1 = matmul(x.T, dz1)
        return loss, [g_w1, g_w2t]

    def true_grad(self, params) -> list[np.ndarray]:
        return self.grad(params)[1]

    def sample_gradient(self, params, step: int) -> GradientSample:
        loss, grads = self.grad(params, self.minibatch(step))
        return GradientSample(grads=grads, loss=loss, noise_norms=[])

    def _check(self, params) -> list[np.ndarray]:
        params = validate_params(params)
        expected = self.shapes
        if len(params) != 2 or [p.shape for p in params] != expected:
            raise matcore.ShapeMismatchError(
                f"expected layer shapes {expected}, got {[p.shape for p in params]}"
            )
        return params


def noisy_grad(objective, params, spec: NoiseSpec, rng: RngStream) -> GradientSample:
    """Exact gradient plus mean-zero noise with an almost-sure Frobenius bound.

    Noise = Gaussian direction scaled to radius min(|z| * sigma / 3, sigma);
    symmetric, hence unbiased, and never exceeds sigma.
    """
    grads = objective.true_grad(params)
    if len(spec.sigmas) != len(grads):
        raise ValueError(f"NoiseSpec has {len(spec.sigmas)} sigmas for {len(grads)} layers")
    out, norms = [], []
    for g, sigma in zip(grads, spec.sigmas):
        if sigma == 0.0:
            out.append(g)
            norms.append(0.0)
            continue
        direction = rng.gen.standard_normal(g.shape)
        z = rng.gen.standard_normal()
        radius = min(abs(float(z)) * sigma / 3.0, sigma)
        scale = radius / matcore.frobenius_norm(direction)
        out.append(g + direction * scale)
        norms.append(radius)
    return GradientSample(grads=out, loss=float(objective.eval(params)), noise_norms=norms)


def finite_difference_grad(objective, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of objective.eval, per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for l, p in enumerate(params):
        g = np.zeros_like(p)
        for i in range(p.shape[0]):
            for j in range(p.shape[1]):
                orig = p[i, j]
                p[i, j] = orig + h
                f_plus = objective.eval(params)
                p[i, j] = orig - h
                f_minus = objective.eval(params)
                p[i, j] = orig
                g[i, j] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads
