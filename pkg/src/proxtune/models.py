"""Dense feed-forward networks organised as an ordered stack of named modules.

Each module holds one or more dense layers. Every layer contributes two
parameter groups, ``<module>.<i>.weight`` (fan_in x fan_out) and
``<module>.<i>.bias``. The activation is applied after every layer except the
network's final one, which stays linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .param_store import ConfigurationError, ContractViolation, ModelParameters, ParameterGroup
from .rng import Stream

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class ModuleLayout:
    name: str
    widths: tuple[int, ...]
    from_scratch: bool = False


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    output_dim: int
    module_layout: tuple[ModuleLayout, ...]
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "module_layout", tuple(self.module_layout))
        self.validate()

    def validate(self) -> None:
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigurationError("input_dim and output_dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        layout = self.module_layout
        if len(layout) < 2:
            raise ConfigurationError("a model needs at least two modules")
        names = [m.name for m in layout]
        if len(set(names)) != len(names):
            raise ConfigurationError("module names must be unique")
        if any(m.from_scratch for m in layout[:-1]):
            raise ConfigurationError("only the last module may be flagged from_scratch")
        for m in layout:
            if not m.widths or any(w <= 0 for w in m.widths):
                raise ConfigurationError(f"module {m.name!r} needs positive layer widths")
        if layout[-1].widths[-1] != self.output_dim:
            raise ConfigurationError(
                f"last layer width {layout[-1].widths[-1]} does not match output_dim {self.output_dim}"
            )

    def layers(self) -> list[tuple[int, str, int, int]]:
        """(module_index, layer name, fan_in, fan_out) for every dense layer in order."""
        out = []
        fan_in = self.input_dim
        for k, m in enumerate(self.module_layout, start=1):
            for i, w in enumerate(m.widths):
                out.append((k, f"{m.name}.{i}", fan_in, w))
                fan_in = w
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "activation": self.activation,
            "init_seed": self.init_seed,
            "modules": [[m.name, list(m.widths), m.from_scratch] for m in self.module_layout],
        }


def default_model_spec(input_dim: int = 8, output_dim: int = 4, init_seed: int = 0, activation: str = "tanh") -> ModelSpec:
    """Six-module desk-scale stack: vision_early, vision_late, bridge, lang_early, lang_late, head."""
    return ModelSpec(
        input_dim=input_dim,
        output_dim=output_dim,
        module_layout=(
            ModuleLayout("vision_early", (32, 32)),
            ModuleLayout("vision_late", (32, 32)),
            ModuleLayout("bridge", (16,)),
            ModuleLayout("lang_early", (32, 32)),
            ModuleLayout("lang_late", (32, 32)),
            ModuleLayout("head", (output_dim,), from_scratch=True),
        ),
        activation=activation,
        init_seed=init_seed,
    )


def build_model(spec: ModelSpec) -> ModelParameters:
    """Glorot-uniform weights, zero biases, drawn from one stream keyed on ``init_seed``."""
    spec.validate()
    stream = Stream(spec.init_seed, "model-init")
    groups = []
    scratch = {k for k, m in enumerate(spec.module_layout, start=1) if m.from_scratch}
    for k, name, fan_in, fan_out in spec.layers():
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = (2.0 * stream.uniform(fan_in * fan_out) - 1.0) * bound
        groups.append(ParameterGroup(f"{name}.weight", w, k, (fan_in, fan_out), from_scratch=k in scratch))
        groups.append(ParameterGroup(f"{name}.bias", np.zeros(fan_out), k, (fan_out,), from_scratch=k in scratch))
    return ModelParameters(groups, [m.name for m in spec.module_layout])


def _act(kind: str, h: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(h)
    if kind == "relu":
        return np.maximum(h, 0.0)
    return h


def _act_grad(kind: str, h: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    return np.ones_like(h)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    version: int = -1


def _layer_params(model: ModelParameters, spec: ModelSpec):
    for _, name, _, _ in spec.layers():
        yield name, model[f"{name}.weight"].tensor, model[f"{name}.bias"].tensor


def forward(model: ModelParameters, spec: ModelSpec, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ContractViolation(f"inputs must be (N, {spec.input_dim}), got {x.shape}")
    cache = ForwardCache(inputs=x, version=model.version)
    layers = list(_layer_params(model, spec))
    a = x
    for i, (_, w, b) in enumerate(layers):
        h = a @ w + b
        a = h if i == len(layers) - 1 else _act(spec.activation, h)
        cache.pre.append(h)
        cache.post.append(a)
    return a, cache


def predict(model: ModelParameters, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    return forward(model, spec, inputs)[0]


def backward(
    model: ModelParameters, spec: ModelSpec, cache: ForwardCache, output_grad: np.ndarray
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients (flat) for every non-frozen group."""
    if cache.version != model.version:
        raise ContractViolation("forward cache is stale: parameters changed since it was computed")
    layers = list(_layer_params(model, spec))
    delta = np.asarray(output_grad, dtype=np.float64)
    if delta.shape != cache.post[-1].shape:
        raise ContractViolation(f"output gradient shape {delta.shape} != outputs {cache.post[-1].shape}")
    grads: dict[str, np.ndarray] = {}
    for i in range(len(layers) - 1, -1, -1):
        name, w, _ = layers[i]
        if i != len(layers) - 1:
            delta = delta * _act_grad(spec.activation, cache.pre[i], cache.post[i])
        a_in = cache.post[i - 1] if i > 0 else cache.inputs
        wg, bg = model[f"{name}.weight"], model[f"{name}.bias"]
        if not wg.frozen:
            grads[wg.name] = (a_in.T @ delta).reshape(-1)
        if not bg.frozen:
            grads[bg.name] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ w.T
    return grads


def loss_mse(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all N*d entries and its gradient w.r.t. ``outputs``."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ContractViolation(f"outputs {outputs.shape} and targets {targets.shape} differ")
    resid = outputs - targets
    return float(np.mean(resid * resid)), (2.0 / resid.size) * resid
