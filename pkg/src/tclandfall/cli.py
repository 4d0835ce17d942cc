"""``tclandfall`` command line.

Every command writes into a fresh ``--out`` directory (built in a staging
directory and moved into place only on success) together with the effective
``run_config.json``. Failures print ``error: <ErrorClass>: <message>`` on
stderr and exit with 2 (usage), 3 (data format) or 4 (numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from tclandfall.checkpoint import load_checkpoint, save_checkpoint
from tclandfall.errors import DataFormatError, LandfallError, NotFoundError, UsageError
from tclandfall.ingest import (
    BASINS,
    check_archive,
    extract_cyclone_units,
    fill_missing_sst,
    load_units,
    parse_tracks,
    read_fields,
    write_fields,
    write_tracks,
)
from tclandfall.metrics import REPORT_COLUMNS, read_report_csv, report_row, report_rows_csv
from tclandfall.nn import LandfallModel, ModelConfig
from tclandfall.synth import write_synthetic
from tclandfall.training import (
    TRACE_COLUMNS,
    TrainConfig,
    derive_seed,
    evaluate,
    evaluate_kfold,
    persistence_report,
    trace_cyclone,
    train,
)
from tclandfall.scaling import fit_scaler
from tclandfall.windowing import (
    load_dataset,
    prepare_dataset,
    save_dataset,
    steps_to_window_hours,
    window_hours_to_steps,
)

log = logging.getLogger("tclandfall")

@dataclass
class RunConfig:
    basin: str = "NI"
    window_hours: int = 21
    target: str = "location"
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 32
    seed: int = 0
    split: str = "kfold"
    fold: int = 0
    n_cyclones: int = 40
    scale_latlon: bool = True
    tracks: str | None = None
    fields: str | None = None
    dataset: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    window: str | None = None
    unit: str | None = None
    inputs: list[str] = field(default_factory=list)
    out: str | None = None

    @property
    def n_steps(self) -> int:
        return window_hours_to_steps(self.window_hours)

    def validate(self) -> None:
        if self.basin not in BASINS:
            raise UsageError(f"unknown basin {self.basin!r}; expected one of {', '.join(BASINS)}")
        window_hours_to_steps(self.window_hours)
        if self.target not in ("location", "time"):
            raise UsageError(f"target must be location or time, got {self.target!r}")
        if self.split not in ("kfold", "holdout"):
            raise UsageError(f"split must be kfold or holdout, got {self.split!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise UsageError("epochs and lr must be >= 0 and batch size >= 1")
        if self.n_cyclones < 1:
            raise UsageError(f"n_cyclones must be >= 1, got {self.n_cyclones}")

    def resolved(self) -> "RunConfig":
        def res(p):
            return None if p is None else str(Path(p).expanduser().resolve())
        d = asdict(self)
        for k in ("tracks", "fields", "dataset", "window", "out"):
            d[k] = res(d[k])
        d["checkpoints"] = [res(p) for p in self.checkpoints]
        d["inputs"] = [res(p) for p in self.inputs]
        return RunConfig(**d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
                           scale_latlon=self.scale_latlon)


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < command-line flags."""
    values = asdict(RunConfig())
    if args.config:
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and v != []:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg.resolved()


# ---------------------------------------------------------------- output handling

class OutputDir:
    """Stage outputs next to the target and move them into place on success."""

    def __init__(self, target):
        if target is None:
            raise UsageError("--out is required")
        self.target = Path(target)
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.path: Path | None = None

    def __enter__(self) -> Path:
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        if self.target.exists():
            shutil.rmtree(self.target)
        self.path.rename(self.target)
        return False


def _write_config(out: Path, cfg: RunConfig, command: str) -> None:
    payload = {"command": command, **asdict(cfg)}
    (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def _history_csv(history) -> str:
    rows = []
    for i, tr in enumerate(history.train_mse):
        rows.append({"epoch": i + 1, "train_mse": tr,
                     "val_mse": history.val_mse[i] if i < len(history.val_mse) else float("nan")})
    text = _csv_text(("epoch", "train_mse", "val_mse"), rows)
    return f"# initial_train_mse={history.initial_train_mse:.6f}\n" + text


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, out: Path) -> None:
    track_path, archive = write_synthetic(out, cfg.seed, cfg.n_cyclones, cfg.basin)
    print(f"wrote {cfg.n_cyclones} synthetic {cfg.basin} cyclones to {track_path.name} and {archive.name}/")


def cmd_ingest(cfg: RunConfig, out: Path) -> None:
    tracks = parse_tracks(_require(cfg.tracks, "--tracks"))
    archive = _require(cfg.fields, "--fields")
    units = [u for tr in tracks for u in extract_cyclone_units(tr)]
    write_tracks(out / "tracks.csv", tracks)
    rows = []
    for u in units:
        snaps = fill_missing_sst(read_fields(archive, u.id, u))
        write_fields(out / "fields", u.id, snaps, u)
        rows.append({"unit_id": u.id, "basin": u.basin, "n_ocean": u.n_ocean,
                     "duration_hours": u.duration_hours,
                     "landfall_lat": u.landfall.position.lat, "landfall_lon": u.landfall.position.lon})
    (out / "units.csv").write_text(_csv_text(
        ("unit_id", "basin", "n_ocean", "duration_hours", "landfall_lat", "landfall_lon"), rows))
    print(f"validated {len(tracks)} tracks, {len(units)} cyclone units")


def cmd_prepare(cfg: RunConfig, out: Path) -> None:
    units = [u for u in load_units(_require(cfg.tracks, "--tracks")) if u.basin == cfg.basin]
    if not units:
        raise DataFormatError(f"no cyclone units for basin {cfg.basin}")
    archive = _require(cfg.fields, "--fields")
    check_archive(archive, units)
    snaps = {u.id: read_fields(archive, u.id, u) for u in units}
    ds = prepare_dataset(units, snaps, cfg.n_steps, cfg.split, cfg.seed)
    save_dataset(out / "dataset.tcds", ds)
    (out / "split.json").write_text(json.dumps(ds.split.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"T={ds.n_steps} ({steps_to_window_hours(ds.n_steps)}h): {len(ds.samples)} samples "
          f"from {len(units)} units, {ds.dropped} dropped by the lead-time guard")


def _dataset_for(cfg: RunConfig):
    ds = load_dataset(_require(cfg.dataset, "--dataset"))
    if ds.n_steps != cfg.n_steps:
        raise UsageError(f"dataset was prepared for T={ds.n_steps} "
                         f"({steps_to_window_hours(ds.n_steps)}h), not {cfg.window_hours}h")
    if not 0 <= cfg.fold < len(ds.split.folds):
        raise UsageError(f"fold {cfg.fold} out of range 0..{len(ds.split.folds) - 1}")
    return ds


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ds = _dataset_for(cfg)
    tr, va = ds.bucket("train", cfg.fold), ds.bucket("val", cfg.fold)
    stats = fit_scaler(tr, scale_latlon=cfg.scale_latlon)
    comp = 0 if cfg.target == "location" else 1
    mcfg = ModelConfig(n_steps=ds.n_steps, head_width=2 if cfg.target == "location" else 1)
    model = LandfallModel(mcfg, seed=derive_seed(cfg.seed, cfg.fold, comp, 0))
    tcfg = cfg.train_config()
    tcfg.seed = derive_seed(cfg.seed, cfg.fold, comp, 1)
    model, history = train(model, tr, va, stats, tcfg)
    meta = {"basin": ds.basin, "fold": cfg.fold, "target": cfg.target, "epochs": cfg.epochs,
            "train_mse": history.train_mse, "val_mse": history.val_mse}
    save_checkpoint(out / f"model_{cfg.target}.tcck", model, stats, meta)
    (out / "history.csv").write_text(_history_csv(history))
    print(f"trained {cfg.target} model ({model.n_params()} parameters), final train MSE "
          f"{history.train_mse[-1] if history.train_mse else history.initial_train_mse:.6g}")


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    ds = _dataset_for(cfg)
    basin = ds.basin or cfg.basin
    if cfg.checkpoints:
        te = ds.bucket("test", cfg.fold)
        report = None
        for path in cfg.checkpoints:
            model, stats, _ = load_checkpoint(path)
            if stats is None:
                raise DataFormatError(f"checkpoint {path} carries no scaler statistics")
            r = evaluate(model, te, stats)
            report = r if report is None else report.merged(r)
        rows = [report_row(report, basin, ds.n_steps, "cnn_lstm"),
                report_row(persistence_report(te), basin, ds.n_steps, "persistence")]
        (out / "metrics.csv").write_text(report_rows_csv(rows))
    else:
        result = evaluate_kfold(ds, cfg.train_config())
        fold_rows = []
        for f in result.folds:
            fold_rows.append({**report_row(f.model, basin, ds.n_steps, "cnn_lstm"), "fold": f.fold})
            fold_rows.append({**report_row(f.baseline, basin, ds.n_steps, "persistence"), "fold": f.fold})
        (out / "folds.csv").write_text(report_rows_csv(fold_rows, ("fold",) + REPORT_COLUMNS))
        rows = [report_row(result.model, basin, ds.n_steps, "cnn_lstm"),
                report_row(result.baseline, basin, ds.n_steps, "persistence")]
        (out / "metrics.csv").write_text(report_rows_csv(rows))
        for f in result.folds:
            (out / f"history_fold{f.fold}_location.csv").write_text(_history_csv(f.location_history))
            (out / f"history_fold{f.fold}_time.csv").write_text(_history_csv(f.time_history))
    print((out / "metrics.csv").read_text(), end="")


def _load_pair(paths):
    models = {}
    for path in paths:
        model, stats, _ = load_checkpoint(path)
        if stats is None:
            raise DataFormatError(f"checkpoint {path} carries no scaler statistics")
        models[model.config.target] = (model, stats)
    return models


def cmd_predict(cfg: RunConfig, out: Path | None) -> None:
    if not cfg.checkpoints:
        raise UsageError("--checkpoint is required")
    path = _require(cfg.window, "--window")
    try:
        window = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read window {path} ({exc})") from None
    models = _load_pair(cfg.checkpoints)
    for target, (model, stats) in sorted(models.items()):
        mc = model.config
        expected = (mc.n_steps, mc.in_channels, mc.grid_size, mc.grid_size)
        if window.shape != expected:
            raise UsageError(f"{target} checkpoint expects a window of {mc.n_steps} frames "
                             f"shaped {expected}, got {window.shape}")
        y = model.predict(stats.transform(window)[None])[0]
        if target == "location":
            lat, lon = stats.unscale_targets(y)
            print(f"landfall_lat={lat:.4f} landfall_lon={lon:.4f}")
        else:
            print(f"hours_to_landfall={y[0]:.2f}")


def cmd_trace(cfg: RunConfig, out: Path) -> None:
    ds = _dataset_for(cfg)
    models = _load_pair(cfg.checkpoints)
    if set(models) != {"location", "time"}:
        raise UsageError("trace needs one location and one time checkpoint")
    uid = _require(cfg.unit, "--unit")
    try:
        unit = ds.unit(uid)
    except KeyError:
        raise NotFoundError(f"unit {uid} not in dataset") from None
    (loc, stats), (tm, _) = models["location"], models["time"]
    snaps = ds.frames[uid][:, 2:]
    rows = trace_cyclone(loc, tm, stats, unit, snaps, ds.n_steps)
    (out / "trace.csv").write_text(_csv_text(TRACE_COLUMNS, rows))
    print(f"{len(rows)} trace rows for {uid}")


SUMMARY_COLUMNS = REPORT_COLUMNS


def cmd_report(cfg: RunConfig, out: Path) -> None:
    if not cfg.inputs:
        raise UsageError("report needs one or more metrics.csv inputs")
    rows = []
    for p in cfg.inputs:
        path = Path(p)
        if path.is_dir():
            path = path / "metrics.csv"
        if not path.exists():
            raise NotFoundError(f"{path} not found")
        for row in read_report_csv(path):
            if set(REPORT_COLUMNS) - set(row):
                raise DataFormatError(f"{path} lacks report columns")
            rows.append(row)
    rows.sort(key=lambda r: (r["basin"], int(r["T"]), r["model"]))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    (out / "summary.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "trace": cmd_trace,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--basin", choices=BASINS)
    common.add_argument("--window-hours", dest="window_hours", type=int, choices=(9, 15, 21))
    common.add_argument("--target", choices=("location", "time"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (replaced on success)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tclandfall", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic basin")
    p.add_argument("--n-cyclones", dest="n_cyclones", type=int)

    p = sub.add_parser("ingest", parents=[common], help="validate and convert track/field files")
    p.add_argument("--tracks")
    p.add_argument("--fields")

    p = sub.add_parser("prepare", parents=[common], help="window units into a dataset with a split plan")
    p.add_argument("--tracks")
    p.add_argument("--fields")
    p.add_argument("--split", choices=("kfold", "holdout"))

    for name, help_ in (("train", "train one model on a fold"), ("evaluate", "k-fold train/evaluate or score checkpoints")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--dataset")
        p.add_argument("--fold", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--no-scale-latlon", dest="scale_latlon", action="store_const", const=False)
        if name == "evaluate":
            p.add_argument("--checkpoint", dest="checkpoints", action="append", default=[])

    p = sub.add_parser("predict", parents=[common], help="predict landfall for one window (.npy)")
    p.add_argument("--checkpoint", dest="checkpoints", action="append", default=[])
    p.add_argument("--window")

    p = sub.add_parser("trace", parents=[common], help="per-time predictions for one cyclone")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", dest="checkpoints", action="append", default=[])
    p.add_argument("--unit")
    p.add_argument("--fold", type=int)

    p = sub.add_parser("report", parents=[common], help="collect metrics.csv files into one table")
    p.add_argument("inputs", nargs="+")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = build_config(args)
        if args.command == "predict" and cfg.out is None:
            cmd_predict(cfg, None)
            return 0
        with OutputDir(cfg.out) as out:
            _write_config(out, cfg, args.command)
            HANDLERS[args.command](cfg, out)
        return 0
    except LandfallError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: NumericalError: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
