"""INI experiment files.

Sections and keys (all optional; anything not listed is rejected)::

    [model]  input_dim output_dim activation init_seed layout
    [task]   base_seed noise_std finetune_shift finetune_scale finetune_offset
             heldout_shift n_samples eval_samples
    [policy] mode lambda_reg gamma lambda lambda_max schedule
             alpha beta1 beta2 epsilon weight_decay
    [freeze] modules
    [run]    pretrain_steps finetune_steps batch_size seed log_every
             pretrain_alpha out_dir
    [sweep]  schedules values masks

``layout`` is a comma list of ``name:width[xwidth...][:scratch]``, e.g.
``vision_early:32x32, bridge:16, head:4:scratch``. ``freeze.modules`` takes
module names or 1-based indices. ``sweep.masks`` is ``standard`` or a ``;``-list of
``label: module module ...`` entries.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .harness import AdamSettings, ExperimentConfig, TaskConfig, standard_freeze_masks
from .models import ModelSpec, ModuleLayout, default_model_spec
from .optim import Mode, ProximityPolicy, Schedule
from .param_store import ConfigurationError, FreezeMask

SECTIONS = {
    "model": {"input_dim", "output_dim", "activation", "init_seed", "layout"},
    "task": {f.name for f in dataclasses.fields(TaskConfig)},
    "policy": {"mode", "lambda_reg", "gamma", "lambda", "lambda_max", "schedule", "alpha", "beta1", "beta2", "epsilon", "weight_decay"},
    "freeze": {"modules"},
    "run": {"pretrain_steps", "finetune_steps", "batch_size", "seed", "log_every", "pretrain_alpha", "out_dir"},
    "sweep": {"schedules", "values", "masks"},
}


class ConfigFileError(ConfigurationError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key:
            where.append(f"key {key!r}")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass
class LoadedConfig:
    experiment: ExperimentConfig
    base_dir: Path
    out_dir: Path | None = None
    schedules: list[tuple[Schedule, float]] = field(default_factory=list)
    masks: list[tuple[str, FreezeMask]] = field(default_factory=list)
    sweep_declared: set[str] = field(default_factory=set)


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", line):
            return i
    return None


def parse_layout(text: str) -> tuple[ModuleLayout, ...]:
    mods = []
    for item in [p.strip() for p in text.split(",") if p.strip()]:
        parts = [p.strip() for p in item.split(":")]
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "scratch"):
            raise ValueError(f"bad module entry {item!r}")
        widths = tuple(int(w) for w in parts[1].split("x"))
        mods.append(ModuleLayout(parts[0], widths, len(parts) == 3))
    return tuple(mods)


def format_layout(layout) -> str:
    return ", ".join(
        f"{m.name}:{'x'.join(str(w) for w in m.widths)}" + (":scratch" if m.from_scratch else "") for m in layout
    )


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _module_indices(tokens: list[str], names: list[str]) -> FreezeMask:
    idx = []
    for tok in tokens:
        if tok.isdigit():
            idx.append(int(tok))
        elif tok in names:
            idx.append(names.index(tok) + 1)
        else:
            raise ValueError(f"unknown module {tok!r}")
    mask = FreezeMask.of(*idx)
    mask.validate(len(names))
    return mask


def load_config(path: str | Path) -> LoadedConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, path.parent.resolve())


def parse_config(text: str, base_dir: Path | str = ".") -> LoadedConfig:
    base_dir = Path(base_dir)
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigFileError(f"malformed config: {exc}", line=getattr(exc, "lineno", None)) from exc

    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigFileError(f"unknown section [{section}]", key=section, line=_line_of(text, section))
        for key in cp[section]:
            if key not in SECTIONS[section]:
                raise ConfigFileError(f"unknown key in [{section}]", key=key, line=_line_of(text, section, key))

    def get(section, key, conv, default):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, ConfigurationError) as exc:
            raise ConfigFileError(f"invalid value {raw!r}: {exc}", key=key, line=_line_of(text, section, key)) from exc

    defaults = ExperimentConfig()
    input_dim = get("model", "input_dim", int, defaults.model.input_dim)
    output_dim = get("model", "output_dim", int, defaults.model.output_dim)
    activation = get("model", "activation", str, "tanh")
    init_seed = get("model", "init_seed", int, 0)
    base_layout = default_model_spec(input_dim, output_dim).module_layout
    layout = get("model", "layout", parse_layout, base_layout)
    try:
        spec = ModelSpec(input_dim, output_dim, layout, activation, init_seed)
    except ConfigurationError as exc:
        key = "layout" if cp.has_option("model", "layout") else "activation"
        raise ConfigFileError(str(exc), key=key, line=_line_of(text, "model", key)) from exc

    tdef = TaskConfig()
    task_kwargs = {}
    for f in dataclasses.fields(TaskConfig):
        conv = int if isinstance(getattr(tdef, f.name), int) else float
        task_kwargs[f.name] = get("task", f.name, conv, getattr(tdef, f.name))
    task = TaskConfig(**task_kwargs)

    pol_fields = {
        "mode": ("mode", Mode),
        "lambda_reg": ("lambda_reg", float),
        "gamma": ("gamma", float),
        "lambda": ("lam", float),
        "lambda_max": ("lambda_max", float),
        "schedule": ("schedule", Schedule),
    }
    pdef = ProximityPolicy()
    pkw = {attr: get("policy", key, conv, getattr(pdef, attr)) for key, (attr, conv) in pol_fields.items()}
    try:
        policy = ProximityPolicy(**pkw)
    except ValueError as exc:
        raise ConfigFileError(f"invalid policy: {exc}", line=_line_of(text, "policy")) from exc
    adef = AdamSettings()
    akw = {f.name: get("policy", f.name, float, getattr(adef, f.name)) for f in dataclasses.fields(AdamSettings)}
    try:
        adam = AdamSettings(**akw)
    except ConfigurationError as exc:
        raise ConfigFileError(f"invalid optimizer settings: {exc}", line=_line_of(text, "policy")) from exc

    names = [m.name for m in spec.module_layout]
    freeze = get("freeze", "modules", lambda s: _module_indices(_split(s), names), FreezeMask())

    run = {}
    for key in ("pretrain_steps", "finetune_steps", "batch_size", "seed", "log_every"):
        run[key] = get("run", key, int, getattr(defaults, key))
    run["pretrain_alpha"] = get("run", "pretrain_alpha", float, defaults.pretrain_alpha)
    out_dir = get("run", "out_dir", lambda s: (base_dir / s).resolve(), None)

    try:
        experiment = ExperimentConfig(model=spec, task=task, policy=policy, adam=adam, freeze=freeze, **run)
    except ConfigurationError as exc:
        raise ConfigFileError(str(exc), line=_line_of(text, "run")) from exc

    loaded = LoadedConfig(experiment, base_dir, out_dir)
    if cp.has_section("sweep"):
        loaded.sweep_declared = set(cp["sweep"].keys())
        kinds = get("sweep", "schedules", lambda s: [Schedule(v) for v in _split(s)], [])
        values = get("sweep", "values", lambda s: [float(v) for v in _split(s)], [])
        loaded.schedules = [(k, v) for k in kinds for v in values]
        loaded.masks = get("sweep", "masks", lambda s: parse_masks(s, names, experiment), [])
    return loaded


def parse_masks(text: str, names: list[str], experiment: ExperimentConfig) -> list[tuple[str, FreezeMask]]:
    if text.strip() == "standard":
        return standard_freeze_masks(experiment)
    masks = []
    for entry in [e.strip() for e in text.split(";") if e.strip()]:
        label, _, mods = entry.partition(":")
        if not _:
            raise ValueError(f"mask entry {entry!r} needs 'label: modules'")
        masks.append((label.strip(), _module_indices(mods.replace(",", " ").split(), names)))
    return masks


def config_to_ini(experiment: ExperimentConfig) -> str:
    """Render a resolved config back to INI (all defaults materialised)."""
    d = experiment.to_dict()
    lines = ["[model]"]
    m = d["model"]
    lines += [f"input_dim = {m['input_dim']}", f"output_dim = {m['output_dim']}", f"activation = {m['activation']}"]
    lines += [f"init_seed = {m['init_seed']}", f"layout = {format_layout(experiment.model.module_layout)}", "", "[task]"]
    lines += [f"{k} = {v!r}" for k, v in d["task"].items()]
    lines += ["", "[policy]"] + [f"{k} = {v if isinstance(v, str) else repr(v)}" for k, v in d["policy"].items()]
    lines += ["", "[freeze]", "modules = " + ", ".join(str(i) for i in d["freeze"]["modules"])]
    lines += ["", "[run]"] + [f"{k} = {v!r}" for k, v in d["run"].items()]
    return "\n".join(lines) + "\n"
