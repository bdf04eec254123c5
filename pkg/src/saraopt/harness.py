"""Experiment harness: configuration, the training loop, artifacts, and run
comparison.

A run executes exactly ``total_steps`` optimizer steps over per-layer weight
matrices. Projectors refresh whenever ``step % refresh_period == 0`` (step 0
included, so a projector exists before the first update). All randomness is
drawn from streams addressed by (master seed, purpose, layer, step), so a
repeated run replays byte-identically and adding a diagnostic never perturbs
the trajectory.

Artifacts written to the output directory:

    config.json        resolved configuration (canonical JSON)
    metrics.csv        step,layer,metric,value rows
    timing.csv         wall-clock sidecar, excluded from the determinism contract
    projectors.jsonl   one record per refresh, bases in projector_bases/
    checkpoints/       step_NNNNNNNN/ directories (weights, states, projector)
    summary.json       derived statistics, recomputable from the above
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import matcore, metrics, objectives, optimizers, subspace
from .matcore import RngStream
from .objectives import MlpObjective, NoiseSpec, QuadraticObjective, random_quadratic
from .optimizers import HyperParams, LayerSnapshot
from .subspace import SelectorKind

__all__ = [
    "ObjectiveSpec",
    "RunConfig",
    "build_objective",
    "lr_multiplier",
    "run_experiment",
    "summarize_run",
    "compare_runs",
    "checkpoint_diff",
    "load_config",
]

#: Monte-Carlo draws for the per-refresh delta diagnostic when exact
#: enumeration is out of reach (layer dimension above the exact cap).
DELTA_MC_TRIALS = 4096


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str  # "quadratic" | "mlp"
    data_seed: int = 0
    shapes: tuple[tuple[int, int], ...] = ()  # quadratic
    init_scale: float = 1.0  # quadratic
    layer_sizes: tuple[int, int, int] = (32, 64, 32)  # mlp
    n_samples: int = 512  # mlp
    batch_size: int = 64  # mlp

    def __post_init__(self):
        if self.kind not in ("quadratic", "mlp"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == "quadratic" and not self.shapes:
            raise ValueError("quadratic objective needs layer shapes")
        object.__setattr__(self, "shapes", tuple(tuple(int(v) for v in s) for s in self.shapes))
        object.__setattr__(self, "layer_sizes", tuple(int(v) for v in self.layer_sizes))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "data_seed": self.data_seed}
        if self.kind == "quadratic":
            d["shapes"] = [list(s) for s in self.shapes]
            d["init_scale"] = self.init_scale
        else:
            d["layer_sizes"] = list(self.layer_sizes)
            d["n_samples"] = self.n_samples
            d["batch_size"] = self.batch_size
        return d


def build_objective(spec: ObjectiveSpec):
    if spec.kind == "quadratic":
        return random_quadratic(spec.shapes, spec.data_seed)
    return MlpObjective(spec.layer_sizes, spec.n_samples, spec.batch_size, spec.data_seed)


@dataclass(frozen=True)
class RunConfig:
    objective: ObjectiveSpec
    optimizer: str
    selector: str
    rank: int
    refresh_period: int
    eta: float
    total_steps: int
    master_seed: int
    out_dir: str
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    xi: float = 1e-8
    noise_sigmas: tuple[float, ...] = ()  # quadratic only; empty = noiseless
    metric_cadence: int = 200
    anchor_step: Optional[int] = None
    checkpoint_steps: tuple[int, ...] = ()
    deterministic: bool = True
    warmup_steps: int = 0
    scheduler: str = "constant"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in optimizers.OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        SelectorKind(self.selector, self.rank, self.refresh_period)  # validates
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.metric_cadence < 1:
            raise ValueError("metric_cadence must be >= 1")
        if any(s < 0 or s > self.total_steps for s in self.checkpoint_steps):
            raise ValueError("checkpoint steps must lie in [0, total_steps]")
        if self.scheduler not in ("constant", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.weight_decay != 0.0:
            raise ValueError("decoupled weight decay is unsupported; set weight_decay = 0")
        object.__setattr__(self, "checkpoint_steps", tuple(int(s) for s in self.checkpoint_steps))
        object.__setattr__(self, "noise_sigmas", tuple(float(s) for s in self.noise_sigmas))

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            eta=self.eta, rank=self.rank, refresh_period=self.refresh_period,
            alpha=self.alpha, beta1=self.beta1, beta2=self.beta2, xi=self.xi,
        )

    def to_dict(self) -> dict:
        d = {
            "objective": self.objective.to_dict(),
            "run": {
                "optimizer": self.optimizer,
                "selector": self.selector,
                "rank": self.rank,
                "refresh_period": self.refresh_period,
                "total_steps": self.total_steps,
                "master_seed": self.master_seed,
                "out_dir": self.out_dir,
                "noise_sigmas": list(self.noise_sigmas),
                "metric_cadence": self.metric_cadence,
                "anchor_step": self.anchor_step,
                "checkpoint_steps": list(self.checkpoint_steps),
                "deterministic": self.deterministic,
            },
            "hyperparams": {
                "eta": self.eta, "alpha": self.alpha, "beta1": self.beta1,
                "beta2": self.beta2, "xi": self.xi,
            },
            "schedule": {
                "warmup_steps": self.warmup_steps,
                "scheduler": self.scheduler,
                "weight_decay": self.weight_decay,
            },
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        obj = dict(d.get("objective", {}))
        run = dict(d.get("run", {}))
        hyper = dict(d.get("hyperparams", {}))
        sched = dict(d.get("schedule", {}))
        spec = ObjectiveSpec(
            kind=obj.get("kind", "quadratic"),
            data_seed=int(obj.get("data_seed", 0)),
            shapes=tuple(tuple(s) for s in obj.get("shapes", ())),
            init_scale=float(obj.get("init_scale", 1.0)),
            layer_sizes=tuple(obj.get("layer_sizes", (32, 64, 32))),
            n_samples=int(obj.get("n_samples", 512)),
            batch_size=int(obj.get("batch_size", 64)),
        )
        sigmas = run.get("noise_sigmas", ())
        if isinstance(sigmas, (int, float)):
            sigmas = (float(sigmas),)
        return cls(
            objective=spec,
            optimizer=run["optimizer"],
            selector=run.get("selector", "sara"),
            rank=int(run["rank"]),
            refresh_period=int(run.get("refresh_period", 200)),
            eta=float(hyper.get("eta", 0.01)),
            total_steps=int(run["total_steps"]),
            master_seed=int(run.get("master_seed", 0)),
            out_dir=run.get("out_dir", "run_out"),
            alpha=float(hyper.get("alpha", 1.0)),
            beta1=float(hyper.get("beta1", 0.9)),
            beta2=float(hyper.get("beta2", 0.999)),
            xi=float(hyper.get("xi", 1e-8)),
            noise_sigmas=tuple(float(s) for s in sigmas),
            metric_cadence=int(run.get("metric_cadence", 200)),
            anchor_step=run.get("anchor_step"),
            checkpoint_steps=tuple(run.get("checkpoint_steps", ())),
            deterministic=bool(run.get("deterministic", True)),
            warmup_steps=int(sched.get("warmup_steps", 0)),
            scheduler=sched.get("scheduler", "constant"),
            weight_decay=float(sched.get("weight_decay", 0.0)),
        )

    def config_hash(self) -> str:
        return _hash_dict(self.to_dict())

    def objective_hash(self) -> str:
        return _hash_dict(self.objective.to_dict())


def _hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    """Read a TOML or JSON run configuration."""
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as f:
            data = tomllib.load(f)
    else:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    return RunConfig.from_dict(data)


def lr_multiplier(step: int, total_steps: int, warmup_steps: int = 0, scheduler: str = "constant") -> float:
    """Warmup/cosine hook mirroring the usual experiment tables; defaults off."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    if scheduler == "cosine":
        span = max(total_steps - warmup_steps, 1)
        progress = (step - warmup_steps) / span
        return 0.5 * (1.0 + math.cos(math.pi * min(max(progress, 0.0), 1.0)))
    return 1.0


# ---------------------------------------------------------------------------
# the run loop
# ---------------------------------------------------------------------------


class _Run:
    def __init__(self, config: RunConfig):
        self.config = config
        self.objective = build_objective(config.objective)
        self.names = list(self.objective.layer_names)
        self.shapes = self.objective.shapes
        for name, (m, n) in zip(self.names, self.shapes):
            if config.rank > min(m, n):
                raise ValueError(f"rank {config.rank} exceeds min dim of layer {name!r} ({m}x{n})")
        if config.objective.kind == "quadratic":
            sigmas = config.noise_sigmas
            if len(sigmas) == 1:
                sigmas = sigmas * len(self.names)
            elif not sigmas:
                sigmas = (0.0,) * len(self.names)
            self.noise = NoiseSpec(sigmas)
        else:
            self.noise = None
        self.kind = SelectorKind(config.selector, config.rank, config.refresh_period)
        self.hp = config.hyperparams()
        self.master = RngStream(config.master_seed)
        self.rows: list[tuple] = []
        self.timing: list[tuple] = []

    # -- gradient sampling ---------------------------------------------------

    def sample_gradient(self, params, step: int) -> objectives.GradientSample:
        if self.noise is not None:
            rng = self.master.child("noise").child(step)
            return objectives.noisy_grad(self.objective, params, self.noise, rng)
        return self.objective.sample_gradient(params, step)

    # -- diagnostics ----------------------------------------------------------

    def refresh_delta(self, g, step: int, layer: str) -> Optional[float]:
        if self.kind.kind == "random":
            return self.kind.rank / g.shape[0]
        if self.kind.kind != "sara":
            return None
        weights = subspace.singular_weights(matcore.svd(g).S)
        if weights.size <= subspace.EXACT_MAX_DIM:
            return subspace.min_inclusion_probability(weights, self.kind.rank, "exact")
        rng = self.master.child("delta").child(layer).child(step)
        return subspace.min_inclusion_probability(
            weights, self.kind.rank, "monte-carlo", trials=DELTA_MC_TRIALS, rng=rng
        )

    def record_metrics(self, t, params, sample, projectors, prev_dom, prev_active, t0):
        loss = self.objective.eval(params)
        true_grads = self.objective.true_grad(params)
        gnorm = sum(matcore.frobenius_norm(g) ** 2 for g in true_grads)
        self.rows.append((t, "", "loss", loss))
        self.rows.append((t, "", "grad_norm_sq", gnorm))
        for l, name in enumerate(self.names):
            if sample is not None:
                dom = subspace.select_dominant(sample.grads[l], self.kind.rank, t).basis
                if prev_dom[l] is not None:
                    self.rows.append(
                        (t, name, "grad_dominant_overlap", metrics.subspace_overlap(prev_dom[l], dom))
                    )
                prev_dom[l] = dom
                if self.noise is None:
                    noise_norm = matcore.frobenius_norm(sample.grads[l] - true_grads[l])
                    self.rows.append((t, name, "noise_norm", noise_norm))
            if projectors[l] is not None:
                if prev_active[l] is not None:
                    self.rows.append(
                        (t, name, "projector_overlap",
                         metrics.subspace_overlap(prev_active[l], projectors[l].basis))
                    )
                prev_active[l] = projectors[l].basis
        self.timing.append((t, time.perf_counter() - t0))

    # -- checkpoints ----------------------------------------------------------

    def write_checkpoint(self, t, params, states, projectors):
        path = os.path.join(self.config.out_dir, "checkpoints", f"step_{t:08d}")
        layers = {
            name: LayerSnapshot(params[l], states[l], projectors[l])
            for l, name in enumerate(self.names)
        }
        optimizers.save_checkpoint(path, self.config.optimizer, self.hp, t, layers)


def run_experiment(config: RunConfig) -> dict:
    """Execute a configured run, write its artifacts, and return the summary."""
    run = _Run(config)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    with matcore.deterministic_mode(config.deterministic):
        init_rng = run.master.child("init")
        if config.objective.kind == "quadratic":
            params = run.objective.init_params(init_rng, config.objective.init_scale)
        else:
            params = run.objective.init_params(init_rng)
        states = [
            optimizers.init_state(config.optimizer, shape, config.rank) for shape in run.shapes
        ]
        n_layers = len(run.names)
        projectors: list[Optional[subspace.Projector]] = [None] * n_layers
        prev_projectors: list[Optional[subspace.Projector]] = [None] * n_layers
        prev_dom = [None] * n_layers
        prev_active = [None] * n_layers
        checkpoint_at = set(config.checkpoint_steps)
        t0 = time.perf_counter()
        writer = subspace.ProjectorLogWriter(os.path.join(out, "projectors.jsonl"))
        step = 0
        try:
            for step in range(config.total_steps):
                if step in checkpoint_at:
                    run.write_checkpoint(step, params, states, projectors)
                sample = run.sample_gradient(params, step)
                refreshed = step % config.refresh_period == 0
                if refreshed:
                    for l, name in enumerate(run.names):
                        rng_sel = run.master.child("select").child(name).child(step)
                        prev_projectors[l] = projectors[l]
                        projectors[l] = subspace.refresh_projector(
                            run.kind, sample.grads[l], projectors[l], step, rng_sel
                        )
                        writer.append(step, name, config.selector, projectors[l])
                        delta = run.refresh_delta(sample.grads[l], step, name)
                        if delta is not None:
                            run.rows.append((step, name, "refresh_delta", delta))
                if step % config.metric_cadence == 0:
                    run.record_metrics(step, params, sample, projectors, prev_dom, prev_active, t0)
                mult = lr_multiplier(step, config.total_steps, config.warmup_steps, config.scheduler)
                hp_t = run.hp if mult == 1.0 else dataclasses.replace(run.hp, eta=run.hp.eta * mult)
                for l in range(n_layers):
                    params[l] = optimizers.step_dispatch(
                        config.optimizer, params[l], sample.grads[l], projectors[l],
                        states[l], hp_t,
                        prev_projector=prev_projectors[l],
                        refreshed=refreshed and step > 0,
                    )
        except Exception as e:
            stub = {"failed_step": step, "failed_layer": None, "error": f"{type(e).__name__}: {e}"}
            with open(os.path.join(out, "summary_stub.json"), "w", encoding="utf-8") as f:
                json.dump(stub, f, sort_keys=True, indent=1)
            writer.close()
            raise
        if config.total_steps in checkpoint_at:
            run.write_checkpoint(config.total_steps, params, states, projectors)
        run.record_metrics(config.total_steps, params, None, projectors, prev_dom, prev_active, t0)
        writer.close()
        metrics.write_metric_rows(os.path.join(out, "metrics.csv"), run.rows)
        with open(os.path.join(out, "timing.csv"), "w", encoding="utf-8") as f:
            f.write("step,wall_time\n")
            for t, wall in run.timing:
                f.write(f"{t},{wall!r}\n")
        with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as f:
            json.dump(config.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")
        summary = summarize_run(out)
        with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, sort_keys=True, indent=1)
            f.write("\n")
    return summary


# ---------------------------------------------------------------------------
# summaries (recomputable from artifacts alone)
# ---------------------------------------------------------------------------


def read_metric_rows(path) -> list[tuple[int, str, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        if header.strip() != "step,layer,metric,value":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            step, layer, metric, value = line.rstrip("\n").split(",")
            rows.append((int(step), layer, metric, float(value)))
    return rows


def checkpoint_weights(run_dir, step: int) -> dict[str, np.ndarray]:
    path = os.path.join(str(run_dir), "checkpoints", f"step_{step:08d}")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no checkpoint directory at {path}")
    _, _, _, layers = optimizers.load_checkpoint(path)
    return {name: snap.x for name, snap in layers.items()}


def summarize_run(run_dir) -> dict:
    """Derive the run summary purely from the artifacts on disk.

    Always computed under deterministic reductions so the result is identical
    no matter where or when it is re-derived.
    """
    with matcore.deterministic_mode(True):
        return _summarize_run(str(run_dir))


def _summarize_run(run_dir: str) -> dict:
    with open(os.path.join(run_dir, "config.json"), encoding="utf-8") as f:
        config = RunConfig.from_dict(json.load(f))
    rows = read_metric_rows(os.path.join(run_dir, "metrics.csv"))
    losses = [(step, value) for step, _, metric, value in rows if metric == "loss"]
    grad_sq = [value for _, _, metric, value in rows if metric == "grad_norm_sq"]
    deltas = [value for _, _, metric, value in rows if metric == "refresh_delta"]
    entries = subspace.read_projector_log(os.path.join(run_dir, "projectors.jsonl"))
    adjacency = metrics.adjacent_overlap(entries)
    mean_overlap: dict[str, float] = {}
    for layer in sorted({p.layer for p in adjacency}):
        vals = [p.value for p in adjacency if p.layer == layer]
        mean_overlap[layer] = sum(vals) / len(vals)
    refresh_counts: dict[str, int] = {}
    for e in entries:
        refresh_counts[e.layer] = refresh_counts.get(e.layer, 0) + 1
    stable_ranks: dict[str, dict[str, float]] = {}
    steps = sorted(config.checkpoint_steps)
    for a, b in zip(steps, steps[1:]):
        reports = metrics.update_spectrum(
            checkpoint_weights(run_dir, a), checkpoint_weights(run_dir, b)
        )
        stable_ranks[f"{a}->{b}"] = {r.layer: r.stable_rank for r in reports}
    return {
        "config_hash": config.config_hash(),
        "objective_hash": config.objective_hash(),
        "optimizer": config.optimizer,
        "selector": config.selector,
        "master_seed": config.master_seed,
        "total_steps": config.total_steps,
        "final_loss": max(losses)[1] if losses else None,
        "min_grad_norm_sq": min(grad_sq) if grad_sq else None,
        "mean_grad_norm_sq": sum(grad_sq) / len(grad_sq) if grad_sq else None,
        "realized_delta": min(deltas) if deltas else None,
        "mean_adjacent_overlap": mean_overlap,
        "refresh_counts": refresh_counts,
        "stable_ranks": stable_ranks,
        "checkpoint_steps": list(steps),
    }


# ---------------------------------------------------------------------------
# run comparison and checkpoint diffs
# ---------------------------------------------------------------------------

_COMPARE_COLUMNS = (
    "run", "optimizer", "selector", "seed", "final_loss",
    "mean_adjacent_overlap", "realized_delta", "mean_stable_rank", "flags",
)


def compare_runs(summary_paths) -> tuple[list[dict], str, str]:
    """Align summaries side by side. Returns (rows, csv_text, table_text)."""
    if len(summary_paths) < 2:
        raise ValueError("need at least two summaries to compare")
    summaries = []
    for path in summary_paths:
        path = str(path)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing summary file: {path}")
        with open(path, encoding="utf-8") as f:
            summaries.append((path, json.load(f)))
    reference_obj = summaries[0][1].get("objective_hash")
    rows = []
    for path, s in summaries:
        overlaps = list(s.get("mean_adjacent_overlap", {}).values())
        ranks = s.get("stable_ranks", {})
        last_pair = sorted(ranks)[-1] if ranks else None
        rank_vals = list(ranks[last_pair].values()) if last_pair else []
        flags = []
        if s.get("objective_hash") != reference_obj:
            flags.append("objective-mismatch")
        rows.append({
            "run": os.path.basename(os.path.dirname(path)) or path,
            "optimizer": s.get("optimizer"),
            "selector": s.get("selector"),
            "seed": s.get("master_seed"),
            "final_loss": s.get("final_loss"),
            "mean_adjacent_overlap": sum(overlaps) / len(overlaps) if overlaps else None,
            "realized_delta": s.get("realized_delta"),
            "mean_stable_rank": sum(rank_vals) / len(rank_vals) if rank_vals else None,
            "flags": ";".join(flags),
        })

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    csv_lines = [",".join(_COMPARE_COLUMNS)]
    for row in rows:
        csv_lines.append(",".join(fmt(row[c]) for c in _COMPARE_COLUMNS))
    csv_text = "\n".join(csv_lines) + "\n"
    widths = [
        max(len(c), max(len(fmt(row[c])) for row in rows)) for c in _COMPARE_COLUMNS
    ]
    table_lines = ["  ".join(c.ljust(w) for c, w in zip(_COMPARE_COLUMNS, widths))]
    for row in rows:
        table_lines.append("  ".join(fmt(row[c]).ljust(w) for c, w in zip(_COMPARE_COLUMNS, widths)))
    return rows, csv_text, "\n".join(table_lines) + "\n"


def checkpoint_diff(run_dir, step_a: int, step_b: int) -> list[metrics.SpectrumReport]:
    """Per-layer spectrum of the weight change between two checkpoints; also
    writes checkpoint_diff_<a>_<b>.csv inside the run directory."""
    run_dir = str(run_dir)
    with matcore.deterministic_mode(True):
        reports = metrics.update_spectrum(
            checkpoint_weights(run_dir, step_a), checkpoint_weights(run_dir, step_b)
        )
    out_path = os.path.join(run_dir, f"checkpoint_diff_{step_a}_{step_b}.csv")
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("layer,metric,index,value\n")
        for rep in reports:
            for i, v in enumerate(rep.normalized):
                f.write(f"{rep.layer},normalized_sv,{i},{float(v)!r}\n")
            f.write(f"{rep.layer},stable_rank,,{rep.stable_rank!r}\n")
    return reports
