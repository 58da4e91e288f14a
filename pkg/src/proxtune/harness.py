"""Pretrain -> snapshot -> fine-tune pipelines, ablations and sweeps.

Every source of randomness is a named :class:`~proxtune.rng.Stream` keyed on the
run seed, so a config plus seed fixes every byte of output.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import models, tasks
from .models import ModelSpec
from .optim import AdamState, Mode, ProximityPolicy, Schedule, StepReport, optimizer_step
from .param_store import (
    ConfigurationError,
    FreezeMask,
    ModelParameters,
    apply_freeze_mask,
    module_deviations,
    snapshot_pretrained,
)
from .rng import Stream

log = logging.getLogger(__name__)

# lambda_max values reported for the full-scale runs, keyed (benchmark, backbone).
REFERENCE_LAMBDA_MAX = {
    ("LIBERO", "MiniVLA-VQ"): 0.5,
    ("LIBERO", "MiniVLA-OFT"): 3.2,
    ("LIBERO", "VLA-Adapter"): 0.5,
    ("LIBERO", "OpenVLA-OFT"): 1.0,
    ("CALVIN", "MiniVLA-OFT"): 2.5,
    ("CALVIN", "OpenVLA-OFT"): 1.5,
    ("SimplerEnv", "MiniVLA-VQ"): 0.5,
    ("SimplerEnv", "MiniVLA-OFT"): 3.0,
    ("SimplerEnv", "OpenVLA-OFT"): 0.8,
    ("Franka", "MiniVLA-OFT"): 1.5,
}

SCHEDULER_GRID = [(kind, v) for kind in (Schedule.CONSTANT, Schedule.COSINE, Schedule.LINEAR) for v in (0.5, 2.0, 3.0)]


class DivergenceError(RuntimeError):
    """Non-finite loss; ``records`` holds the metrics logged before the blow-up."""

    def __init__(self, message: str, records: list | None = None):
        super().__init__(message)
        self.records = records or []


@dataclass(frozen=True)
class TaskConfig:
    base_seed: int = 0
    noise_std: float = 0.05
    finetune_shift: float = 1.5
    finetune_scale: float = 1.2
    finetune_offset: float = 0.3
    heldout_shift: float = -1.0
    n_samples: int = 8192
    eval_samples: int = 2048

    def triple(self, input_dim: int, output_dim: int) -> tasks.TaskTriple:
        return tasks.make_task_triple(
            self.base_seed,
            input_dim=input_dim,
            output_dim=output_dim,
            noise_std=self.noise_std,
            finetune_shift=self.finetune_shift,
            finetune_scale=self.finetune_scale,
            finetune_offset=self.finetune_offset,
            heldout_shift=self.heldout_shift,
        )


@dataclass(frozen=True)
class AdamSettings:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.new_state()

    def new_state(self, alpha: float | None = None) -> AdamState:
        return AdamState(
            alpha=self.alpha if alpha is None else alpha,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weight_decay=self.weight_decay,
        )


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=models.default_model_spec)
    task: TaskConfig = field(default_factory=TaskConfig)
    policy: ProximityPolicy = field(default_factory=ProximityPolicy)
    adam: AdamSettings = field(default_factory=AdamSettings)
    freeze: FreezeMask = field(default_factory=FreezeMask)
    pretrain_steps: int = 3000
    finetune_steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    log_every: int = 20
    pretrain_alpha: float = 1e-3

    def __post_init__(self):
        for name in ("pretrain_steps", "finetune_steps"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.batch_size <= 0 or self.log_every <= 0:
            raise ConfigurationError("batch_size and log_every must be positive")
        if self.finetune_steps and self.log_every > self.finetune_steps:
            raise ConfigurationError("log_every must not exceed finetune_steps")
        self.freeze.validate(len(self.model.module_layout))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with run, init and teacher seeds all set to ``seed``."""
        return self.replace(
            seed=seed,
            model=dataclasses.replace(self.model, init_seed=seed),
            task=dataclasses.replace(self.task, base_seed=seed),
        )

    @property
    def module_names(self) -> list[str]:
        return [m.name for m in self.model.module_layout]

    def to_dict(self) -> dict:
        p = self.policy
        return {
            "model": self.model.to_dict(),
            "task": dataclasses.asdict(self.task),
            "policy": {
                "mode": p.mode.value,
                "lambda_reg": p.lambda_reg,
                "gamma": p.gamma,
                "lambda": p.lam,
                "lambda_max": p.lambda_max,
                "schedule": p.schedule.value,
                **dataclasses.asdict(self.adam),
            },
            "freeze": {"modules": sorted(self.freeze.frozen_modules)},
            "run": {
                "pretrain_steps": self.pretrain_steps,
                "finetune_steps": self.finetune_steps,
                "batch_size": self.batch_size,
                "seed": self.seed,
                "log_every": self.log_every,
                "pretrain_alpha": self.pretrain_alpha,
            },
        }


@dataclass
class MetricsRecord:
    step: int
    deviations: dict[str, float]
    projection_rate: float
    train_loss: float
    retention_loss: float
    shift_loss: float


@dataclass
class Splits:
    pretrain: tasks.Dataset
    finetune: tasks.Dataset
    finetune_probe: tasks.Dataset
    retention: tasks.Dataset
    shift: tasks.Dataset


def make_splits(config: ExperimentConfig) -> Splits:
    spec = config.model
    tri = config.task.triple(spec.input_dim, spec.output_dim)
    n, ne = config.task.n_samples, config.task.eval_samples
    base = 1000 * config.seed
    ft = tasks.generate(tri.finetune, base + 2, n)
    return Splits(
        pretrain=tasks.generate(tri.pretrain, base + 1, n),
        finetune=ft,
        finetune_probe=ft.subset(min(ne, n)),
        retention=tasks.generate(tri.ood_eval.retention, base + 3, ne),
        shift=tasks.generate(tri.ood_eval.shift, base + 4, ne),
    )


def evaluate(model: ModelParameters, spec: ModelSpec, data: tasks.Dataset) -> float:
    return models.loss_mse(models.predict(model, spec, data.inputs), data.targets)[0]


def _train_step(model, spec, data, idx, state, policy) -> tuple[float, StepReport]:
    out, cache = models.forward(model, spec, data.inputs[idx])
    loss, dout = models.loss_mse(out, data.targets[idx])
    if not math.isfinite(loss):
        return loss, StepReport(state.t)
    grads = models.backward(model, spec, cache, dout)
    return loss, optimizer_step(model, grads, state, policy)


def run_pretrain(config: ExperimentConfig, splits: Splits | None = None) -> ModelParameters:
    """Plain Adam on the pretraining task; the snapshot is left untaken."""
    spec = config.model
    splits = splits or make_splits(config)
    model = models.build_model(spec)
    state = dataclasses.replace(config.adam, weight_decay=0.0).new_state(alpha=config.pretrain_alpha)
    policy = ProximityPolicy(Mode.NONE)
    batches = Stream(config.seed, "pretrain-batches")
    n = len(splits.pretrain)
    for step in range(1, config.pretrain_steps + 1):
        loss, _ = _train_step(model, spec, splits.pretrain, batches.integers(n, config.batch_size), state, policy)
        if not math.isfinite(loss):
            raise DivergenceError(f"pretraining diverged at step {step} (loss={loss})")
    return model


def _record(step, model, spec, splits, names, rate) -> MetricsRecord:
    devs = module_deviations(model)
    return MetricsRecord(
        step=step,
        deviations=dict(zip(names, devs)),
        projection_rate=rate,
        train_loss=evaluate(model, spec, splits.finetune_probe),
        retention_loss=evaluate(model, spec, splits.retention),
        shift_loss=evaluate(model, spec, splits.shift),
    )


def run_finetune(
    model: ModelParameters,
    config: ExperimentConfig,
    splits: Splits | None = None,
    stop_at_loss: float | None = None,
) -> tuple[ModelParameters, list[MetricsRecord]]:
    """Snapshot ``model`` and fine-tune it in place under ``config.policy``.

    A record is logged at step 0, every ``log_every`` steps, and at the final
    step. With ``stop_at_loss`` the run ends at the first logged step whose
    train loss is at or below that value.
    """
    spec = config.model
    splits = splits or make_splits(config)
    snapshot_pretrained(model)
    apply_freeze_mask(model, config.freeze)
    state = config.adam.new_state()
    batches = Stream(config.seed, "finetune-batches")
    names = config.module_names
    n = len(splits.finetune)
    records = [_record(0, model, spec, splits, names, 0.0)]
    for step in range(1, config.finetune_steps + 1):
        idx = batches.integers(n, config.batch_size)
        loss, report = _train_step(model, spec, splits.finetune, idx, state, config.policy)
        if not math.isfinite(loss):
            raise DivergenceError(f"fine-tuning diverged at step {step} (loss={loss})", records)
        if step % config.log_every == 0 or step == config.finetune_steps:
            rec = _record(step, model, spec, splits, names, report.projection_rate)
            if not math.isfinite(rec.train_loss):
                raise DivergenceError(f"fine-tuning diverged at step {step}", records)
            records.append(rec)
            if stop_at_loss is not None and rec.train_loss <= stop_at_loss:
                break
    return model, records


def run_experiment(config: ExperimentConfig, stop_at_loss: float | None = None):
    splits = make_splits(config)
    model = run_pretrain(config, splits)
    return run_finetune(model, config, splits, stop_at_loss=stop_at_loss)


# -- comparison tables ------------------------------------------------------


@dataclass
class ComparisonTable:
    key: str
    module_names: list[str]
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return [self.key, "train_loss", "retention_loss", "shift_loss", "total_deviation"] + [
            f"dev:{m}" for m in self.module_names
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([row[self.key]] + [_fmt(row[c]) for c in self.columns[1:]])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _row(label_key: str, label: str, records: list[MetricsRecord]) -> dict:
    last = records[-1]
    devs = list(last.deviations.values())
    row = {
        label_key: label,
        "train_loss": last.train_loss,
        "retention_loss": last.retention_loss,
        "shift_loss": last.shift_loss,
        "total_deviation": math.sqrt(sum(d * d for d in devs)),
    }
    row.update({f"dev:{m}": d for m, d in last.deviations.items()})
    return row


def _finetune_copy(args):
    pretrained, config, label = args
    _, records = run_finetune(pretrained.copy(), config)
    return label, records


def _fan_out(jobs: int, work: list) -> list:
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_finetune_copy, work))
    return [_finetune_copy(w) for w in work]


def mask_label(mask: FreezeMask, names: Sequence[str]) -> str:
    if not mask.frozen_modules:
        return "none"
    return "+".join(names[k - 1] for k in sorted(mask.frozen_modules))


def run_freeze_ablation(
    base_config: ExperimentConfig,
    masks: Iterable[FreezeMask | tuple[str, FreezeMask]],
    pretrained: ModelParameters | None = None,
    jobs: int = 1,
) -> ComparisonTable:
    """One fine-tune per mask, all starting from the same pretrained weights."""
    names = base_config.module_names
    labelled = [m if isinstance(m, tuple) else (mask_label(m, names), m) for m in masks]
    if not labelled:
        raise ConfigurationError("freeze ablation needs at least one mask")
    for _, m in labelled:
        m.validate(len(names))
    if pretrained is None:
        pretrained = run_pretrain(base_config)
    work = [(pretrained, base_config.replace(freeze=m), label) for label, m in labelled]
    table = ComparisonTable("mask", names)
    for label, records in _fan_out(jobs, work):
        table.rows.append(_row("mask", label, records))
    return table


def run_scheduler_sweep(
    base_config: ExperimentConfig,
    schedules: Iterable[tuple[Schedule | str, float]] = SCHEDULER_GRID,
    pretrained: ModelParameters | None = None,
    jobs: int = 1,
) -> ComparisonTable:
    """One MAPS fine-tune per (schedule, lambda_max), shared seeds and pretrained weights."""
    grid = [(Schedule(k), float(v)) for k, v in schedules]
    if not grid:
        raise ConfigurationError("scheduler sweep needs at least one (schedule, lambda_max) pair")
    if pretrained is None:
        pretrained = run_pretrain(base_config)
    work = []
    for kind, v in grid:
        policy = dataclasses.replace(base_config.policy, mode=Mode.MAPS, schedule=kind, lambda_max=v)
        work.append((pretrained, base_config.replace(policy=policy), f"{kind.value}:{v:g}"))
    table = ComparisonTable("schedule", base_config.module_names)
    for label, records in _fan_out(jobs, work):
        table.rows.append(_row("schedule", label, records))
    return table


def standard_freeze_masks(config: ExperimentConfig | None = None) -> list[tuple[str, FreezeMask]]:
    """The six freeze configurations, mapped onto the default six-module stack.

    vision_early stands in for the geometric encoder, vision_late for the
    vision-language aligned encoder, lang_early/lang_late for the language
    backbone halves. "all" freezes every pretrained module; the head still trains.
    """
    names = (config or ExperimentConfig()).module_names
    idx = {n: i + 1 for i, n in enumerate(names)}

    def of(*mods):
        return FreezeMask.of(*(idx[m] for m in mods))

    return [
        ("freeze_vision", of("vision_early", "vision_late")),
        ("freeze_language", of("lang_early", "lang_late")),
        ("freeze_all", of("vision_early", "vision_late", "bridge", "lang_early", "lang_late")),
        ("freeze_vision_early", of("vision_early")),
        ("freeze_vision_late", of("vision_late")),
        ("freeze_lang_early", of("lang_early")),
    ]


# -- metrics files ----------------------------------------------------------


def metrics_header(module_names: Sequence[str]) -> list[str]:
    return ["step"] + [f"dev:{m}" for m in module_names] + ["projection_rate", "train_loss", "retention_loss", "shift_loss"]


def metrics_to_csv(records: Sequence[MetricsRecord]) -> str:
    if not records:
        raise ValueError("no metrics records to write")
    names = list(records[0].deviations)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(names))
    for r in records:
        w.writerow(
            [str(r.step)]
            + [_fmt(r.deviations[m]) for m in names]
            + [_fmt(r.projection_rate), _fmt(r.train_loss), _fmt(r.retention_loss), _fmt(r.shift_loss)]
        )
    return buf.getvalue()


def emit_metrics(records: Sequence[MetricsRecord], destination: str | Path) -> Path:
    """Write records as CSV: step, dev:<module>..., projection_rate, train_loss, retention_loss, shift_loss."""
    text = metrics_to_csv(records)
    path = Path(destination)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc.strerror or exc}") from exc
    return path


class MetricsFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_metrics(text: str) -> list[MetricsRecord]:
    lines = text.splitlines()
    if not lines:
        raise MetricsFormatError("empty metrics file", 1)
    header = lines[0].split(",")
    tail = ["projection_rate", "train_loss", "retention_loss", "shift_loss"]
    if header[0] != "step" or header[-4:] != tail or not all(h.startswith("dev:") for h in header[1:-4]):
        raise MetricsFormatError("unexpected header", 1)
    names = [h[4:] for h in header[1:-4]]
    if not names:
        raise MetricsFormatError("no module deviation columns", 1)
    if len(lines) < 2:
        raise MetricsFormatError("no data rows", 2)
    if not text.endswith("\n"):
        raise MetricsFormatError("file is truncated (missing final newline)", len(lines))
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise MetricsFormatError(f"expected {len(header)} fields, got {len(fields)}", lineno)
        try:
            step = int(fields[0])
            vals = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise MetricsFormatError(str(exc), lineno) from exc
        k = len(names)
        records.append(MetricsRecord(step, dict(zip(names, vals[:k])), *vals[k:]))
    return records


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    return parse_metrics(Path(path).read_text())


# -- multi-seed comparisons -------------------------------------------------


def retention_comparison(
    base_config: ExperimentConfig,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    lambda_grid: Sequence[float] = (0.5, 1.0, 2.0),
    tolerance: float = 1.1,
) -> dict:
    """Retention of vanilla vs MAPS-linear fine-tuning at matched train loss.

    Per seed, vanilla runs the full budget; its final train loss times
    ``tolerance`` becomes the stopping threshold for both a re-run of vanilla
    and every MAPS candidate. A candidate that never reaches the threshold is
    scored +inf for that seed. The best lambda_max is the one with the lowest
    median retention loss.
    """
    vanilla = []
    maps = {lam: [] for lam in lambda_grid}
    for seed in seeds:
        cfg = base_config.with_seed(seed).replace(policy=ProximityPolicy(Mode.NONE))
        splits = make_splits(cfg)
        pretrained = run_pretrain(cfg, splits)
        _, full = run_finetune(pretrained.copy(), cfg, splits)
        threshold = tolerance * full[-1].train_loss
        _, stopped = run_finetune(pretrained.copy(), cfg, splits, stop_at_loss=threshold)
        vanilla.append(stopped[-1].retention_loss)
        for lam in lambda_grid:
            mcfg = cfg.replace(policy=ProximityPolicy(Mode.MAPS, lambda_max=lam, schedule=Schedule.LINEAR))
            _, recs = run_finetune(pretrained.copy(), mcfg, splits, stop_at_loss=threshold)
            hit = recs[-1].train_loss <= threshold
            maps[lam].append(recs[-1].retention_loss if hit else math.inf)
        log.info("seed %d: vanilla %.5f, maps %s", seed, vanilla[-1], {k: v[-1] for k, v in maps.items()})
    medians = {lam: float(np.median(v)) for lam, v in maps.items()}
    best = min(medians, key=lambda lam: (medians[lam], lam))
    return {
        "vanilla": vanilla,
        "maps": maps,
        "vanilla_median": float(np.median(vanilla)),
        "maps_medians": medians,
        "best_lambda_max": best,
        "best_median": medians[best],
    }
