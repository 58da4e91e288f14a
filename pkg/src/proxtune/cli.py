"""Command line: ``proxtune {pretrain,finetune,sweep,report}``.

Exit codes: 0 success, 2 configuration or input-format error, 3 divergence,
4 I/O failure, 5 archive does not match the configured model.

Outputs go to ``--out-dir``, else ``$PROXTUNE_OUT_ROOT``, else ``[run] out_dir``
from the config (relative to the config file), else ``runs/`` next to the config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import LoadedConfig, config_to_ini, load_config
from .harness import DivergenceError, MetricsFormatError
from .models import build_model
from .param_store import ConfigurationError, archive_bytes, model_from_bytes

OUT_ROOT_ENV = "PROXTUNE_OUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_MISMATCH = 0, 2, 3, 4, 5

log = logging.getLogger("proxtune")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args, cfg: LoadedConfig | None, fallback: Path) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    elif os.environ.get(OUT_ROOT_ENV):
        out = Path(os.environ[OUT_ROOT_ENV])
    elif cfg is not None and cfg.out_dir is not None:
        out = cfg.out_dir
    else:
        out = fallback
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}", EXIT_IO) from exc
    return out


def _load(args) -> LoadedConfig:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except ConfigurationError as exc:
        raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from exc
    if args.seed_override is not None:
        cfg.experiment = cfg.experiment.with_seed(args.seed_override)
    return cfg


def _write(path: Path, data: bytes | str) -> Path:
    try:
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_IO) from exc
    return path


def _manifest(out: Path, name: str, command: str, cfg: LoadedConfig, outputs: list[Path], extra: dict | None = None):
    doc = {
        "command": command,
        "config": cfg.experiment.to_dict(),
        "outputs": sorted(p.name for p in outputs),
        **(extra or {}),
    }
    _write(out / f"{name}.manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(out / f"{name}.resolved.ini", config_to_ini(cfg.experiment))


def _pretrained_from(path: str, cfg: LoadedConfig):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read archive {path}: {exc.strerror}", EXIT_IO) from exc
    try:
        model, _ = model_from_bytes(data)
    except ConfigurationError as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISMATCH) from exc
    expected = build_model(cfg.experiment.model)
    if model.layout() != expected.layout() or model.module_names != expected.module_names:
        raise CliError(f"{path}: archive layout does not match the configured model", EXIT_MISMATCH)
    return model, hashlib.sha256(data).hexdigest()


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg, cfg.base_dir / "runs")
    try:
        model = harness.run_pretrain(cfg.experiment)
    except DivergenceError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    archive = _write(out / "pretrain.ptar", archive_bytes(model, {"stage": "pretrain"}))
    _manifest(out, "pretrain", "pretrain", cfg, [archive])
    print(f"wrote {archive}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load(args)
    model, digest = _pretrained_from(args.pretrained, cfg)
    out = _out_dir(args, cfg, cfg.base_dir / "runs")
    metrics_path = out / "metrics.csv"
    try:
        model, records = harness.run_finetune(model, cfg.experiment)
    except DivergenceError as exc:
        if exc.records:
            _write(metrics_path, harness.metrics_to_csv(exc.records))
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    _write(metrics_path, harness.metrics_to_csv(records))
    archive = _write(out / "finetune.ptar", archive_bytes(model, {"stage": "finetune"}))
    _manifest(out, "finetune", "finetune", cfg, [metrics_path, archive], {"pretrained_sha256": digest})
    print(f"wrote {metrics_path} and {archive}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.kind == "scheduler":
        if not cfg.schedules:
            raise CliError(f"{args.config}: [sweep] schedules x values grid is empty", EXIT_CONFIG)
    elif not cfg.masks:
        raise CliError(f"{args.config}: [sweep] masks is empty", EXIT_CONFIG)
    extra = {}
    pretrained = None
    if args.pretrained:
        pretrained, extra["pretrained_sha256"] = _pretrained_from(args.pretrained, cfg)
    out = _out_dir(args, cfg, cfg.base_dir / "runs")
    try:
        if args.kind == "scheduler":
            table = harness.run_scheduler_sweep(cfg.experiment, cfg.schedules, pretrained, jobs=args.jobs)
        else:
            table = harness.run_freeze_ablation(cfg.experiment, cfg.masks, pretrained, jobs=args.jobs)
    except DivergenceError as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    path = _write(out / f"sweep_{args.kind}.csv", table.to_csv())
    _manifest(out, f"sweep_{args.kind}", f"sweep {args.kind}", cfg, [path], extra)
    print(f"wrote {path} ({len(table.rows)} rows)")
    return EXIT_OK


SPARK = "▁▂▃▄▅▆▇█"


def sparkline(values: list[float], width: int = 40) -> str:
    if len(values) > width:
        # evenly spaced picks, always keeping the last value
        values = [values[round(i * (len(values) - 1) / (width - 1))] for i in range(width)]
    lo, hi = min(values), max(values)
    if hi == lo:
        return SPARK[0] * len(values)
    return "".join(SPARK[min(len(SPARK) - 1, int((v - lo) / (hi - lo) * len(SPARK)))] for v in values)


def render_report(records: list[harness.MetricsRecord]) -> str:
    names = list(records[0].deviations)
    width = max(len("module"), *(len(n) for n in names))
    lines = [f"{'module':<{width}}  {'final_dev':>12}  {'max_dev':>12}  trend"]
    for n in names:
        series = [r.deviations[n] for r in records]
        lines.append(f"{n:<{width}}  {series[-1]:>12.6g}  {max(series):>12.6g}  {sparkline(series)}")
    last = records[-1]
    lines.append("")
    lines.append(f"steps {records[0].step}..{last.step} ({len(records)} records)")
    for label, attr in (("train_loss", "train_loss"), ("retention_loss", "retention_loss"), ("shift_loss", "shift_loss")):
        series = [getattr(r, attr) for r in records]
        lines.append(f"{label:<15} {series[0]:>12.6g} -> {series[-1]:>12.6g}  {sparkline(series)}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    path = Path(args.metrics)
    try:
        records = harness.read_metrics(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_IO) from exc
    except MetricsFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from exc
    out = _out_dir(args, None, path.parent)
    text = render_report(records)
    _write(out / f"{path.stem}.report.txt", text)
    for name in records[0].deviations:
        rows = "".join(f"{r.step} {r.deviations[name]!r}\n" for r in records)
        _write(out / f"{path.stem}.dev_{name}.dat", "# step deviation\n" + rows)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxtune", description="Proximity-constrained fine-tuning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="INI experiment file")
            sp.add_argument("--seed-override", type=int, default=None, help="replace run, init and teacher seeds")
        sp.add_argument("--out-dir", default=None)

    sp = sub.add_parser("pretrain", help="pretrain and save a parameter archive")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune a pretrained archive and log metrics")
    common(sp)
    sp.add_argument("--pretrained", required=True, help="archive written by 'pretrain'")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("sweep", help="freeze ablation or scheduler sweep")
    common(sp)
    sp.add_argument("--kind", choices=("freeze", "scheduler"), required=True)
    sp.add_argument("--pretrained", default=None, help="reuse an archive instead of pretraining")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="summarise a metrics file")
    sp.add_argument("metrics")
    common(sp, config=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"proxtune: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
