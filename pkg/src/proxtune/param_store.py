"""Trainable parameter groups, pretrained snapshots and freeze masks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

ARCHIVE_MAGIC = b"PXTARCH1"


class ConfigurationError(ValueError):
    """Invalid model, mask or experiment configuration."""


class ContractViolation(ValueError):
    """A caller broke an operation's preconditions (shapes, stale caches, missing inputs)."""


@dataclass(eq=False)
class ParameterGroup:
    """One named tensor, stored flat, with its pretrained snapshot.

    ``shape`` is the tensor shape the model sees; ``values`` is always the flat
    float64 buffer and ``tensor`` is a reshaped view of it, so in-place writes
    through either are shared.
    """

    name: str
    values: np.ndarray
    module_index: int
    shape: tuple[int, ...] = ()
    snapshot: np.ndarray | None = None
    frozen: bool = False
    from_scratch: bool = False

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size == 0:
            raise ConfigurationError(f"group {self.name!r} is empty")
        if not self.shape:
            self.shape = (self.values.size,)
        if math.prod(self.shape) != self.values.size:
            raise ConfigurationError(f"group {self.name!r}: shape {self.shape} does not match length {self.values.size}")
        if self.snapshot is not None:
            self.snapshot = np.array(self.snapshot, dtype=np.float64).reshape(-1)
            if self.snapshot.shape != self.values.shape:
                raise ConfigurationError(f"group {self.name!r}: snapshot length differs from values")

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tensor(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def displacement(self) -> np.ndarray:
        if self.snapshot is None:
            raise ContractViolation(f"group {self.name!r} has no snapshot")
        return self.values - self.snapshot

    def assign(self, new_values: np.ndarray) -> None:
        """Overwrite values in place (keeps tensor views valid)."""
        if self.frozen:
            raise ContractViolation(f"group {self.name!r} is frozen")
        self.values[...] = new_values


class ModelParameters:
    """Ordered parameter groups spread over a stack of ``module_count`` modules.

    ``version`` counts in-place updates; forward caches record it so a stale
    cache can be detected in backward.
    """

    def __init__(self, groups: Iterable[ParameterGroup], module_names: list[str] | None = None):
        self.groups: list[ParameterGroup] = list(groups)
        if not self.groups:
            raise ConfigurationError("a model needs at least one parameter group")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigurationError("group names must be unique")
        observed = sorted({g.module_index for g in self.groups})
        if observed != list(range(1, len(observed) + 1)):
            raise ConfigurationError(f"module indices must form 1..K, got {observed}")
        self.module_count = len(observed)
        if module_names is None:
            module_names = [f"module{k}" for k in range(1, self.module_count + 1)]
        if len(module_names) != self.module_count:
            raise ConfigurationError("one module name per module index is required")
        self.module_names = list(module_names)
        self._by_name = {g.name: g for g in self.groups}
        self.version = 0

    def __iter__(self) -> Iterator[ParameterGroup]:
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, name: str) -> ParameterGroup:
        return self._by_name[name]

    def module_groups(self, k: int) -> list[ParameterGroup]:
        return [g for g in self.groups if g.module_index == k]

    def trainable(self) -> list[ParameterGroup]:
        return [g for g in self.groups if not g.frozen]

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "ModelParameters":
        clone = ModelParameters(
            [
                ParameterGroup(
                    name=g.name,
                    values=g.values.copy(),
                    module_index=g.module_index,
                    shape=g.shape,
                    snapshot=None if g.snapshot is None else g.snapshot.copy(),
                    frozen=g.frozen,
                    from_scratch=g.from_scratch,
                )
                for g in self.groups
            ],
            self.module_names,
        )
        return clone

    def layout(self) -> list[tuple[str, int, tuple[int, ...], bool]]:
        """(name, module_index, shape, from_scratch) per group; used to check archive compatibility."""
        return [(g.name, g.module_index, tuple(g.shape), g.from_scratch) for g in self.groups]


@dataclass(frozen=True)
class FreezeMask:
    frozen_modules: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def of(cls, *indices: int) -> "FreezeMask":
        return cls(frozenset(int(i) for i in indices))

    def validate(self, module_count: int) -> None:
        bad = sorted(i for i in self.frozen_modules if not 1 <= i <= module_count)
        if bad:
            raise ConfigurationError(f"freeze mask indices {bad} outside 1..{module_count}")


def snapshot_pretrained(model: ModelParameters) -> ModelParameters:
    """Record the current values of every group as its pretrained anchor."""
    for g in model.groups:
        g.snapshot = g.values.copy()
    return model


def l2_deviation(group: ParameterGroup) -> float:
    """Euclidean distance between current values and the snapshot."""
    d = group.displacement()
    return math.sqrt(float(np.dot(d, d)))


def module_deviations(model: ModelParameters) -> list[float]:
    """Per-module deviation: root-sum-of-squares of member group deviations."""
    out = []
    for k in range(1, model.module_count + 1):
        out.append(math.sqrt(sum(l2_deviation(g) ** 2 for g in model.module_groups(k))))
    return out


def apply_freeze_mask(model: ModelParameters, mask: FreezeMask) -> ModelParameters:
    mask.validate(model.module_count)
    for g in model.groups:
        g.frozen = g.module_index in mask.frozen_modules
    return model


# -- archives ---------------------------------------------------------------
#
# Layout: magic, u64 little-endian header length, UTF-8 JSON header (sorted keys,
# no whitespace), then per group the float64 little-endian values followed by
# the snapshot (if present).


def archive_bytes(model: ModelParameters, meta: dict | None = None) -> bytes:
    header = {
        "module_names": model.module_names,
        "meta": meta or {},
        "groups": [
            {
                "name": g.name,
                "module_index": g.module_index,
                "shape": list(g.shape),
                "frozen": g.frozen,
                "from_scratch": g.from_scratch,
                "length": g.size,
                "has_snapshot": g.snapshot is not None,
            }
            for g in model.groups
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [ARCHIVE_MAGIC, struct.pack("<Q", len(blob)), blob]
    for g in model.groups:
        parts.append(g.values.astype("<f8").tobytes())
        if g.snapshot is not None:
            parts.append(g.snapshot.astype("<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> tuple[ModelParameters, dict]:
    if not data.startswith(ARCHIVE_MAGIC):
        raise ConfigurationError("not a parameter archive (bad magic)")
    offset = len(ARCHIVE_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        header = json.loads(data[offset : offset + hlen].decode("utf-8"))
        offset += hlen
        groups = []
        for spec in header["groups"]:
            n = spec["length"]
            values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
            offset += 8 * n
            snapshot = None
            if spec["has_snapshot"]:
                snapshot = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
                offset += 8 * n
            groups.append(
                ParameterGroup(
                    name=spec["name"],
                    values=values,
                    module_index=spec["module_index"],
                    shape=tuple(spec["shape"]),
                    snapshot=snapshot,
                    frozen=spec["frozen"],
                    from_scratch=spec["from_scratch"],
                )
            )
    except (struct.error, ValueError, KeyError) as exc:
        raise ConfigurationError(f"corrupt parameter archive: {exc}") from exc
    if offset != len(data):
        raise ConfigurationError("corrupt parameter archive: trailing bytes")
    return ModelParameters(groups, header["module_names"]), header["meta"]


def save_archive(model: ModelParameters, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(archive_bytes(model, meta))
    return path


def load_archive(path: str | Path) -> tuple[ModelParameters, dict]:
    return model_from_bytes(Path(path).read_bytes())
