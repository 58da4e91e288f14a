"""Synthetic teacher-regression tasks with controlled distribution shift.

All three tasks of a triple share one fixed random teacher. Pretraining sees
unshifted standard-normal inputs and raw teacher targets; fine-tuning moves the
inputs and applies an affine map to the targets. The retention probe is the
pretraining distribution itself, and a held-out shift probes the fine-tuned
task away from its training inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .param_store import ConfigurationError
from .rng import Stream

TEACHER_WIDTH = 64


@dataclass(frozen=True)
class TargetTransform:
    kind: str = "identity"
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "affine"):
            raise ConfigurationError(f"unknown target transform {self.kind!r}")

    @classmethod
    def affine(cls, a: float, b: float) -> "TargetTransform":
        return cls("affine", float(a), float(b))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return y
        return self.a * y + self.b


@dataclass(frozen=True)
class Shift:
    input_mean_shift: float | tuple[float, ...] = 0.0
    target_transform: TargetTransform = TargetTransform()


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int
    output_dim: int
    teacher_seed: int
    shift: Shift = Shift()
    noise_std: float = 0.0

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigurationError("task dimensions must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        mu = self.shift.input_mean_shift
        if isinstance(mu, (tuple, list)) and len(mu) != self.input_dim:
            raise ConfigurationError("per-coordinate input shift must have input_dim entries")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    seed: int

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.targets[:n], self.seed)


class OODEval(NamedTuple):
    retention: TaskSpec
    shift: TaskSpec


class TaskTriple(NamedTuple):
    pretrain: TaskSpec
    finetune: TaskSpec
    ood_eval: OODEval


def teacher_weights(teacher_seed: int, input_dim: int, output_dim: int):
    """Two-layer tanh teacher, width 64, Gaussian weights scaled by 1/sqrt(fan_in)."""
    s = Stream(teacher_seed, "teacher")
    w1 = s.normal(input_dim * TEACHER_WIDTH).reshape(input_dim, TEACHER_WIDTH) / math.sqrt(input_dim)
    b1 = 0.1 * s.normal(TEACHER_WIDTH)
    w2 = s.normal(TEACHER_WIDTH * output_dim).reshape(TEACHER_WIDTH, output_dim) / math.sqrt(TEACHER_WIDTH)
    b2 = 0.1 * s.normal(output_dim)
    return w1, b1, w2, b2


def teacher(spec: TaskSpec, inputs: np.ndarray) -> np.ndarray:
    w1, b1, w2, b2 = teacher_weights(spec.teacher_seed, spec.input_dim, spec.output_dim)
    return np.tanh(inputs @ w1 + b1) @ w2 + b2


def generate(spec: TaskSpec, seed: int, n: int) -> Dataset:
    """Draw ``n`` samples; deterministic in ``(spec, seed, n)``.

    Inputs are standard normal plus the mean shift; targets are the teacher
    evaluated at those (shifted) inputs, mapped through the target transform,
    plus Gaussian noise.
    """
    if n <= 0:
        raise ConfigurationError("n must be positive")
    x = Stream(seed, "task-inputs").normal(n * spec.input_dim).reshape(n, spec.input_dim)
    x = x + np.asarray(spec.shift.input_mean_shift, dtype=np.float64)
    y = spec.shift.target_transform(teacher(spec, x))
    if spec.noise_std > 0:
        y = y + spec.noise_std * Stream(seed, "task-noise").normal(n * spec.output_dim).reshape(n, spec.output_dim)
    return Dataset(x, y, seed)


def make_task_triple(
    base_seed: int,
    input_dim: int = 8,
    output_dim: int = 4,
    noise_std: float = 0.05,
    finetune_shift: float = 1.5,
    finetune_scale: float = 1.2,
    finetune_offset: float = 0.3,
    heldout_shift: float = -1.0,
) -> TaskTriple:
    """Pretrain / fine-tune / OOD-eval specs sharing the teacher ``base_seed``.

    The held-out shift keeps the fine-tune target map and moves the inputs to
    ``heldout_shift``.
    """
    pretrain = TaskSpec(input_dim, output_dim, base_seed, Shift(), noise_std)
    ft_map = TargetTransform.affine(finetune_scale, finetune_offset)
    finetune = TaskSpec(input_dim, output_dim, base_seed, Shift(finetune_shift, ft_map), noise_std)
    held = TaskSpec(input_dim, output_dim, base_seed, Shift(heldout_shift, ft_map), noise_std)
    return TaskTriple(pretrain, finetune, OODEval(retention=pretrain, shift=held))


def export_csv(dataset: Dataset, path: str | Path) -> Path:
    """Header ``x0..x{d-1},y0..y{k-1}``; floats written with shortest round-trip repr."""
    path = Path(path)
    d, k = dataset.inputs.shape[1], dataset.targets.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + [f"y{j}" for j in range(k)])
        for xi, yi in zip(dataset.inputs, dataset.targets):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])
    return path


def import_csv(path: str | Path, seed: int = -1) -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = sum(1 for h in header if h.startswith("x"))
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    return Dataset(data[:, :d], data[:, d:], seed)
