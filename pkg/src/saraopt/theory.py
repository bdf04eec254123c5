"""Executable pieces of the convergence analysis.

* the admissible-horizon check and the closed-form (beta1, tau, eta) schedule
  for momentum SGD with re-projection,
* a Monte-Carlo verifier for the projection-error bound
  E ||(I - PP')G||_F^2 <= (1 - delta) ||G||_F^2, where delta is the minimum
  index-inclusion probability of the selector,
* the comparison of that delta against the uniform-selection floor r/m.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import matcore, subspace
from .matcore import RngStream
from .subspace import SelectorKind

__all__ = [
    "TheoryParams",
    "Schedule",
    "horizon_threshold",
    "admissible_horizon",
    "convergence_schedule",
    "eta_caps",
    "BoundReport",
    "verify_projection_bound",
    "DeltaComparison",
    "compare_delta",
    "schedule_report_json",
    "bound_report_json",
]


@dataclass(frozen=True)
class TheoryParams:
    L: float  # gradient Lipschitz constant
    Delta: float  # initial suboptimality f(x0) - inf f
    sigma_sq: float  # total squared noise bound, summed over layers
    delta: float  # minimum index-inclusion probability
    T: int  # step budget

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be > 0")
        if self.Delta < 0 or self.sigma_sq < 0:
            raise ValueError("Delta and sigma_sq must be >= 0")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass(frozen=True)
class Schedule:
    beta1: float
    tau: int
    eta: float

    def __post_init__(self):
        if not 0 < self.beta1 <= 1:
            raise ValueError("beta1 must lie in (0, 1]")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")


def horizon_threshold(p: TheoryParams) -> float:
    """Minimum admissible step budget: 2 + 128/(3 delta) + (128 sigma)^2 / (9 sqrt(delta) L Delta)."""
    base = 2.0 + 128.0 / (3.0 * p.delta)
    if p.sigma_sq == 0.0:
        return base
    if p.Delta == 0.0:
        raise ValueError("Delta = 0 with positive noise makes the horizon bound undefined")
    return base + (128.0**2) * p.sigma_sq / (9.0 * math.sqrt(p.delta) * p.L * p.Delta)


def admissible_horizon(p: TheoryParams) -> bool:
    return p.T >= horizon_threshold(p)


def convergence_schedule(p: TheoryParams) -> Schedule:
    """Closed-form schedule, evaluated left to right:

        beta1 = (1 + sqrt(delta^1.5 sigma^2 T / (L Delta)))^-1
        tau   = ceil(64 / (3 delta beta1))
        eta   = (4L + sqrt(80L^2/(3 delta beta1^2) + 80 tau^2 L^2/(3 delta))
                    + sqrt(16 tau L^2 / (3 beta1)))^-1
    """
    if not admissible_horizon(p):
        raise ValueError(
            f"step budget T={p.T} is below the admissible threshold {horizon_threshold(p):.3f}"
        )
    if p.sigma_sq == 0.0:
        beta1 = 1.0
    else:
        beta1 = 1.0 / (1.0 + math.sqrt(p.delta**1.5 * p.sigma_sq * p.T / (p.L * p.Delta)))
    tau = math.ceil(64.0 / (3.0 * p.delta * beta1))
    inner = 80.0 * p.L**2 / (3.0 * p.delta * beta1**2) + 80.0 * tau**2 * p.L**2 / (3.0 * p.delta)
    eta = 1.0 / (4.0 * p.L + math.sqrt(inner) + math.sqrt(16.0 * tau * p.L**2 / (3.0 * beta1)))
    return Schedule(beta1=beta1, tau=tau, eta=eta)


def eta_caps(L: float, delta: float, beta1: float, tau: int) -> list[float]:
    """The four step-size caps the schedule's eta must stay below."""
    return [
        1.0 / (4.0 * L),
        math.sqrt(3.0 * delta * beta1**2 / (80.0 * L**2)),
        math.sqrt(3.0 * delta / (80.0 * tau**2 * L**2)),
        math.sqrt(3.0 * beta1 / (16.0 * tau * L**2)),
    ]


# ---------------------------------------------------------------------------
# projection-error bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    selector: str
    rank: int
    shape: tuple[int, int]
    trials: int
    lhs_mean: float
    lhs_stderr: float
    rhs: float
    delta: float
    delta_stderr: Optional[float]
    passed: bool


MIN_BOUND_TRIALS = 10_000


def verify_projection_bound(
    selector: SelectorKind,
    g,
    trials: int,
    rng: RngStream,
    *,
    mc_trials: int = 200_000,
) -> BoundReport:
    """Monte-Carlo check of E ||(I - PP')G||_F^2 <= (1 - delta) ||G||_F^2 at a
    fixed gradient, over fresh projector draws.

    Only randomized selectors have a sampling distribution; the dominant
    selector is rejected.
    """
    if selector.kind == "dominant":
        raise ValueError("the projection bound concerns randomized selectors only")
    if trials < MIN_BOUND_TRIALS:
        raise ValueError(f"need at least {MIN_BOUND_TRIALS} trials, got {trials}")
    g = matcore.as_matrix(g, "gradient")
    m = g.shape[0]
    r = selector.rank
    g_norm_sq = matcore.frobenius_norm(g) ** 2

    delta_stderr = None
    if selector.kind == "sara":
        weights = subspace.singular_weights(matcore.svd(g).S)
        if weights.size <= subspace.EXACT_MAX_DIM:
            delta = subspace.min_inclusion_probability(weights, r, "exact")
        else:
            probs = subspace.inclusion_probabilities(
                weights, r, "monte-carlo", trials=mc_trials, rng=rng.child("delta-mc")
            )
            delta = float(np.min(probs))
            delta_stderr = math.sqrt(max(delta * (1 - delta), 0.0) / mc_trials)
    else:  # random
        delta = r / m

    draw_rng = rng.child("projectors")
    residuals = np.empty(trials)
    for i in range(trials):
        if selector.kind == "sara":
            proj = subspace.select_sara(g, r, draw_rng)
        else:
            proj = subspace.select_random(m, r, draw_rng)
        res = g - matcore.matmul(proj.basis, matcore.matmul(proj.basis.T, g))
        residuals[i] = float(np.sum(res * res))

    lhs_mean = float(residuals.mean())
    lhs_stderr = float(residuals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    rhs = (1.0 - delta) * g_norm_sq
    # a projection computed in floats leaves a residual of order eps*||G||
    # even when it is exactly zero in reals; ignore that much, squared
    float_slack = (m * np.finfo(np.float64).eps) ** 2 * g_norm_sq
    return BoundReport(
        selector=selector.kind,
        rank=r,
        shape=(g.shape[0], g.shape[1]),
        trials=trials,
        lhs_mean=lhs_mean,
        lhs_stderr=lhs_stderr,
        rhs=rhs,
        delta=delta,
        delta_stderr=delta_stderr,
        passed=bool(lhs_mean <= rhs + 3.0 * lhs_stderr + float_slack),
    )


# ---------------------------------------------------------------------------
# delta vs the uniform floor r/m
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaComparison:
    delta_sara: float
    delta_uniform: float
    gap: float
    mc_stderr: Optional[float] = None


def compare_delta(
    weights,
    r: int,
    method: str = "exact",
    *,
    trials: int = 100_000,
    rng: Optional[RngStream] = None,
) -> DeltaComparison:
    """Importance-sampled minimum inclusion probability against r/m."""
    w = subspace.validate_weights(weights)
    delta_sara = subspace.min_inclusion_probability(w, r, method, trials=trials, rng=rng)
    delta_uniform = r / w.size
    stderr = None
    if method == "monte-carlo":
        stderr = math.sqrt(max(delta_sara * (1 - delta_sara), 0.0) / trials)
    return DeltaComparison(delta_sara, delta_uniform, delta_uniform - delta_sara, stderr)


# ---------------------------------------------------------------------------
# JSON reports
# ---------------------------------------------------------------------------


def schedule_report_json(p: TheoryParams, schedule: Schedule) -> str:
    report = {
        "inputs": asdict(p),
        "threshold": horizon_threshold(p),
        "schedule": asdict(schedule),
        "eta_caps": eta_caps(p.L, p.delta, schedule.beta1, schedule.tau),
    }
    return json.dumps(report, sort_keys=True, indent=1)


def bound_report_json(reports: list[BoundReport]) -> str:
    return json.dumps([asdict(r) for r in reports], sort_keys=True, indent=1)
