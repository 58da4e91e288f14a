"""Bias-corrected Adam with pretrained-proximity regimes.

Regimes, selected by :class:`Mode`:

* ``NONE``  plain Adam.
* ``L2SP``  adds ``lambda_reg * (theta - theta0)`` to the task gradient.
* ``TPGM``  projects every proposal onto the ball ``||theta - theta0|| <= gamma``.
* ``SPD``   conditional pull-back ``theta~ - lam * r_t * (theta~ - theta0)`` with
  one global ``lam``, applied only when ``c_t = -g_t . (theta_{t-1} - theta0) < 0``.
* ``MAPS``  the SPD rule with a per-module strength ``lambda_k`` from a schedule.

All norms and the c_t test are evaluated per parameter group.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .param_store import ContractViolation, ConfigurationError, ModelParameters, ParameterGroup


class Mode(str, enum.Enum):
    NONE = "none"
    L2SP = "l2sp"
    TPGM = "tpgm"
    SPD = "spd"
    MAPS = "maps"


class Schedule(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    COSINE = "cosine"


@dataclass
class ProximityPolicy:
    mode: Mode = Mode.NONE
    lambda_reg: float = 0.0
    gamma: float = 1.0
    lam: float = 0.0
    lambda_max: float = 0.0
    schedule: Schedule = Schedule.LINEAR

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.schedule = Schedule(self.schedule)
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        for name in ("lambda_reg", "lam", "lambda_max"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    @property
    def conditional(self) -> bool:
        return self.mode in (Mode.SPD, Mode.MAPS)


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ConfigurationError("alpha and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")

    def moments(self, group: ParameterGroup) -> tuple[np.ndarray, np.ndarray]:
        if group.name not in self.m:
            self.m[group.name] = np.zeros(group.size)
            self.v[group.name] = np.zeros(group.size)
        return self.m[group.name], self.v[group.name]


@dataclass
class GroupStep:
    name: str
    module_index: int
    prev_radius: float
    proposed_radius: float
    c_t: float
    projected: bool
    lambda_k: float


@dataclass
class StepReport:
    t: int
    entries: list[GroupStep] = field(default_factory=list)

    @property
    def projection_rate(self) -> float:
        if not self.entries:
            return 0.0
        return sum(e.projected for e in self.entries) / len(self.entries)


def _norm(x: np.ndarray) -> float:
    return math.sqrt(float(np.dot(x, x)))


def adam_propose(group: ParameterGroup, grad: np.ndarray, state: AdamState, decay: bool = True) -> np.ndarray:
    """Update the moments for ``group`` and return the unconstrained proposal.

    ``state.t`` must already count the current step. Group values are not
    written. Decoupled weight decay, when configured, is applied here unless
    ``decay`` is false.
    """
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if grad.shape != group.values.shape:
        raise ContractViolation(f"gradient for {group.name!r} has length {grad.size}, expected {group.size}")
    if state.t < 1:
        raise ContractViolation("AdamState.t must be incremented before proposing")
    m, v = state.moments(group)
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**state.t)
    v_hat = v / (1.0 - state.beta2**state.t)
    proposed = group.values - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if decay and state.weight_decay:
        proposed -= state.alpha * state.weight_decay * group.values
    return proposed


def l2sp_gradient(group: ParameterGroup, lambda_reg: float) -> np.ndarray:
    """Gradient of ``lambda_reg / 2 * ||theta - theta0||^2``."""
    return lambda_reg * group.displacement()


def project_l2_ball(proposed: np.ndarray, snapshot: np.ndarray, gamma: float) -> np.ndarray:
    """Euclidean projection of ``proposed`` onto the ball of radius ``gamma`` around ``snapshot``."""
    if gamma <= 0:
        raise ContractViolation("gamma must be positive")
    proposed = np.asarray(proposed, dtype=np.float64)
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if proposed.shape != snapshot.shape:
        raise ContractViolation("proposed and snapshot lengths differ")
    d = proposed - snapshot
    radius = _norm(d.reshape(-1))
    if radius <= gamma:
        return proposed
    return snapshot + (gamma / radius) * d


def spd_condition(grad: np.ndarray, current: np.ndarray, snapshot: np.ndarray) -> float:
    """``c_t = -grad . (current - snapshot)``; a pull-back is due when negative."""
    return -float(np.dot(grad, current - snapshot))


def deviation_ratio(proposed_radius: float, previous_radius: float) -> float:
    """Fraction of the proposed radius gained this step, clamped at 0."""
    if proposed_radius <= previous_radius or proposed_radius == 0.0:
        return 0.0
    return (proposed_radius - previous_radius) / proposed_radius


def assign_lambda(module_index: int, module_count: int, policy: ProximityPolicy, group: ParameterGroup | None = None) -> float:
    """Pull-back strength for one group.

    MAPS: scheduled from ``lambda_max`` at module 1 down to 0 at the last module,
    and always 0 for from-scratch groups. SPD: the global ``lam``. Other modes
    never consult it and get 0.
    """
    if not 1 <= module_index <= module_count:
        raise ContractViolation(f"module index {module_index} outside 1..{module_count}")
    if policy.mode == Mode.SPD:
        return policy.lam
    if policy.mode != Mode.MAPS:
        return 0.0
    if group is not None and group.from_scratch:
        return 0.0
    lmax = policy.lambda_max
    if policy.schedule == Schedule.CONSTANT or module_count == 1:
        return lmax
    frac = (module_index - 1) / (module_count - 1)
    if policy.schedule == Schedule.LINEAR:
        return lmax * (1.0 - frac)
    # cos(pi) is -1 + 1.2e-16 in floating point; pin the last module to exactly 0.
    if module_index == module_count:
        return 0.0
    return lmax * (1.0 + math.cos(math.pi * frac)) / 2.0


def proximal_step(
    group: ParameterGroup,
    grad: np.ndarray,
    proposed: np.ndarray,
    lambda_k: float,
    policy: ProximityPolicy,
) -> tuple[np.ndarray, GroupStep]:
    """Decide the accepted values for ``group`` given the Adam proposal.

    ``group.values`` must still hold theta_{t-1}; nothing is written here.
    """
    theta0 = group.snapshot
    if theta0 is None:
        # plain Adam before any snapshot exists (pretraining)
        if policy.mode == Mode.NONE:
            nan = float("nan")
            return proposed, GroupStep(group.name, group.module_index, nan, nan, nan, False, lambda_k)
        raise ContractViolation(f"group {group.name!r} has no snapshot")
    prev = group.values - theta0
    prev_radius = _norm(prev)
    step_disp = proposed - theta0
    radius = _norm(step_disp)
    c_t = -float(np.dot(grad, prev))
    projected = False
    new = proposed

    if policy.conditional:
        if c_t < 0 and lambda_k != 0.0:
            r_t = deviation_ratio(radius, prev_radius)
            if r_t > 0.0:
                new = proposed - (lambda_k * r_t) * step_disp
                projected = True
    elif policy.mode == Mode.TPGM:
        if radius > policy.gamma:
            new = project_l2_ball(proposed, theta0, policy.gamma)
            projected = True

    entry = GroupStep(group.name, group.module_index, prev_radius, radius, c_t, projected, lambda_k)
    return new, entry


def optimizer_step(
    model: ModelParameters,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    policy: ProximityPolicy,
) -> StepReport:
    """One global step over every trainable group in declaration order."""
    state.t += 1
    report = StepReport(state.t)
    decay = not policy.conditional
    for group in model.groups:
        if group.frozen:
            continue
        if group.name not in grads:
            raise ContractViolation(f"missing gradient for trainable group {group.name!r}")
        grad = np.asarray(grads[group.name], dtype=np.float64).reshape(-1)
        if policy.mode == Mode.L2SP and policy.lambda_reg:
            grad = grad + l2sp_gradient(group, policy.lambda_reg)
        proposed = adam_propose(group, grad, state, decay=decay)
        lam = assign_lambda(group.module_index, model.module_count, policy, group)
        new, entry = proximal_step(group, grad, proposed, lam, policy)
        group.assign(new)
        report.entries.append(entry)
    model.bump_version()
    return report
