"""Command-line entry point: preprocess, synth, train, eval and compare.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime
import hashlib
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    POOLING_KEYS, ModelConfig, PipelineConfig, TrainConfig, apply_overrides, from_dict,
    parse_config_text, read_config_file, to_dict,
)
from .dataset import (
    class_histogram, load_tracks, read_sample_fields, read_samples, segment_scenes, split_dataset,
    split_manifest, write_samples, write_tracks_csv,
)
from .errors import DataError, ManeuverPoolingError, TrainingDiverged, UsageError
from .model import ManeuverModel
from .nn import ParamStore
from .synth import SynthConfig, synth_generate
from .train_eval import evaluate_by_maneuver, format_comparison, format_report, reports_to_json, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SPLITS = ("train", "val", "test")
SAMPLE_SUFFIX = ".mpss"
CHECKPOINT_MAGIC = b"MPCK"
SPEED_LIMIT = 60.0  # m/s; faster tracks usually mean a unit mix-up


# helpers

def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc) if epoch
            else datetime.datetime.now(datetime.timezone.utc))
    return when.replace(microsecond=0).isoformat()


def _write_json(path, data):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _relative(path, base) -> str:
    try:
        return Path(path).resolve().relative_to(Path(base).resolve()).as_posix()
    except ValueError:
        return str(path)


def write_manifest(path, command, config, seed, inputs, artifacts):
    """Run manifest: config snapshot, seed, input hashes, time and artifact paths.

    Artifact paths are relative to the manifest's directory so a moved
    output directory keeps a valid manifest.
    """
    base = Path(path).parent
    _write_json(path, {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _hash_file(p) for p in inputs},
        "artifacts": {_relative(p, base): _hash_file(p) for p in artifacts},
        "created": _timestamp(),
    })


def thread_count(arg) -> int | None:
    if arg is not None:
        return arg
    raw = os.environ.get("MP_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MP_THREADS must be >= 1")
    return n


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def load_overrides(config_file, pairs) -> dict:
    out = read_config_file(config_file) if config_file else {}
    for pair in pairs or []:
        out.update(parse_config_text(pair))
    return out


def _split_keys(overrides, *classes):
    """Restrict ``overrides`` to keys known by each config class."""
    import typing
    hints = [typing.get_type_hints(c) for c in classes]
    unknown = [k for k in overrides if not any(k in h for h in hints)]
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return [{k: v for k, v in overrides.items() if k in h} for h in hints]


# checkpoints

def save_checkpoint(path, model: ManeuverModel, train_cfg: TrainConfig | None = None):
    """Byte-stable checkpoint: magic, JSON header, then raw little-endian arrays."""
    names = list(model.params)
    header = {
        "format": 1,
        "model": to_dict(model.cfg),
        "train": to_dict(train_cfg) if train_cfg is not None else None,
        "dtype": np.dtype(model.dtype).str,
        "params": [[n, list(model.params[n].data.shape)] for n in names],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dtype = np.dtype(model.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype=dtype).tobytes())
    _write_json(str(path) + ".json", {"model": header["model"], "train": header["train"]})


def load_checkpoint(path) -> ManeuverModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    cfg = from_dict(ModelConfig, header["model"])
    dtype = np.dtype(header["dtype"])
    model = ManeuverModel(cfg, seed=0, dtype=dtype.newbyteorder("="))
    store = ParamStore(dtype=model.dtype)
    pos = 8 + hlen
    expected = list(model.params)
    if [n for n, _ in header["params"]] != expected:
        raise DataError(f"{path}: parameter layout does not match the {cfg.pooling} model")
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += count * dtype.itemsize
        store.add(name, values.astype(model.dtype))
    model.params = store
    return model


# data directories

def _sample_path(data_dir, split) -> Path:
    return Path(data_dir) / f"{split}{SAMPLE_SUFFIX}"


def write_dataset(out_dir, samples, pipe: PipelineConfig, with_polar: bool):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = split_dataset(samples, pipe)
    fields = ("cartesian", "polar") if with_polar else ("cartesian",)
    paths = []
    for name, part in zip(SPLITS, splits):
        path = _sample_path(out, name)
        write_samples(path, part, fields)
        paths.append(path)
    _write_json(out / "splits.json", split_manifest(splits, pipe))
    paths.append(out / "splits.json")
    return splits, paths


def read_split(data_dir, split, required=True):
    path = _sample_path(data_dir, split)
    if not path.exists():
        if required:
            raise DataError(f"{path}: sample file not found")
        return [], None
    return read_samples(path), path


def check_compatible(model: ManeuverModel, sample_path):
    fields = read_sample_fields(sample_path)
    if model.cfg.pooling in ("polar", "polar_vr") and "polar" not in fields:
        raise DataError(f"{sample_path}: the {model.cfg.pooling} model needs polar features, "
                        f"file provides only {', '.join(fields)}")


# commands

def cmd_preprocess(args) -> int:
    overrides = load_overrides(args.config, args.set)
    (pipe_over,) = _split_keys(overrides, PipelineConfig)
    (pipe,) = apply_overrides(pipe_over, PipelineConfig())
    try:
        table = load_tracks(args.input, units=args.units)
    except (ManeuverPoolingError, ValueError) as exc:
        raise DataError(f"{args.input}: {exc}") from None
    speeds = np.concatenate([np.abs(t.v) for t in table.tracks.values()]) if table.tracks else np.zeros(0)
    fast = int(np.sum(speeds > SPEED_LIMIT))
    samples = segment_scenes(table, pipe, with_polar=not args.no_polar, workers=args.workers)
    if not samples:
        raise DataError(f"{args.input}: no track is long enough for a {pipe.segment_len} s segment")
    splits, paths = write_dataset(args.out, samples, pipe, not args.no_polar)
    warnings = []
    if fast:
        warnings.append(f"{fast} rows exceed {SPEED_LIMIT:g} m/s (max {speeds.max():.1f} m/s); "
                        f"check --units (now {args.units})")
    stats = {
        "input": str(args.input),
        "units": args.units,
        "vehicles": len(table.tracks),
        "samples": len(samples),
        "splits": {name: len(part) for name, part in zip(SPLITS, splits)},
        "class_histogram": class_histogram(samples),
        "max_speed": float(speeds.max()) if speeds.size else 0.0,
        "warnings": warnings,
    }
    stats_path = Path(args.out) / "stats.json"
    _write_json(stats_path, stats)
    paths.append(stats_path)
    write_manifest(Path(args.out) / "manifest.json", "preprocess", to_dict(pipe), pipe.seed,
                   [args.input], paths)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    hist = stats["class_histogram"]["eval_class"]
    print(f"{len(samples)} samples -> {args.out} "
          f"(train {stats['splits']['train']}, val {stats['splits']['val']}, test {stats['splits']['test']}); "
          + ", ".join(f"{k} {v}" for k, v in hist.items()))
    return EXIT_OK


def _parse_mix(text, n, name):
    parts = text.split(":")
    if len(parts) != n:
        raise UsageError(f"--{name} needs {n} colon-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--{name} values must be numbers, got {text!r}") from None


def cmd_synth(args) -> int:
    overrides = load_overrides(args.config, args.set)
    synth_over, pipe_over = _split_keys(overrides, SynthConfig, PipelineConfig)
    synth_cfg = SynthConfig(lanes=args.lanes, vehicles=args.vehicles, mix=_parse_mix(args.mix, 4, "mix"),
                            accel_mix=_parse_mix(args.accel_mix, 3, "accel-mix"), noise=args.noise,
                            seed=args.seed)
    synth_cfg, = apply_overrides(synth_over, synth_cfg)
    pipe, = apply_overrides({"seed": args.seed, "anchor_stride": args.anchor_stride, **pipe_over},
                            PipelineConfig())
    table = synth_generate(synth_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracks_path = out / "tracks.csv"
    write_tracks_csv(table, tracks_path)
    truth_path = out / "maneuvers.json"
    _write_json(truth_path, {str(k): v for k, v in table.meta["maneuvers"].items()})
    samples = segment_scenes(table, pipe, workers=args.workers)
    splits, paths = write_dataset(out, samples, pipe, with_polar=True)
    stats_path = out / "stats.json"
    _write_json(stats_path, {"vehicles": len(table.tracks), "samples": len(samples),
                             "splits": {n: len(p) for n, p in zip(SPLITS, splits)},
                             "class_histogram": class_histogram(samples)})
    config = {"synth": to_dict(synth_cfg), "pipeline": to_dict(pipe)}
    write_manifest(out / "manifest.json", "synth", config, args.seed, [],
                   [tracks_path, truth_path, stats_path, *paths])
    print(f"{len(table.tracks)} vehicles, {len(samples)} samples -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = load_overrides(args.config, args.set)
    model_over, train_over = _split_keys(overrides, ModelConfig, TrainConfig)
    model_cfg, = apply_overrides({**model_over, "pooling": args.pooling,
                                  "maneuvers": args.maneuvers == "on"}, ModelConfig())
    train_over = dict(train_over)
    for key in ("epochs", "seed", "lr", "batch_size", "max_steps"):
        value = getattr(args, key)
        if value is not None:
            train_over[key] = value
    train_cfg, = apply_overrides(train_over, TrainConfig())
    train_set, train_path = read_split(args.data, "train")
    val_set, val_path = read_split(args.data, "val", required=False)
    model = ManeuverModel(model_cfg, seed=train_cfg.seed, dtype=np.dtype(train_cfg.dtype))
    check_compatible(model, train_path)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(str(out) + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8", newline="\n") as sink:
        sink.write(json.dumps({"provenance": "implementation choice", "train": to_dict(train_cfg),
                               "model": to_dict(model_cfg)}, sort_keys=True) + "\n")
        result = train(model, train_set, val_set, train_cfg, log_sink=sink)
    save_checkpoint(out, result.model, train_cfg)
    inputs = [p for p in (train_path, val_path) if p is not None]
    write_manifest(Path(str(out) + ".manifest.json"), "train",
                   {"model": to_dict(model_cfg), "train": to_dict(train_cfg)}, train_cfg.seed,
                   inputs, [out, Path(str(out) + ".json"), log_path])
    last = [r for r in result.log if r.get("split") == "train"][-1]
    print(f"trained {model_cfg.pooling} (maneuvers {args.maneuvers}) for {result.steps} steps, "
          f"final train loss {last['loss']:.4f} -> {out}")
    return EXIT_OK


def _report_paths(path):
    path = Path(path)
    if path.suffix == ".json":
        return path.with_suffix(".txt"), path
    return path, Path(str(path) + ".json")


def _evaluate(args, compare: bool) -> int:
    samples, sample_path = read_split(args.data, args.split)
    if not samples:
        raise DataError(f"{sample_path}: no samples")
    reports, models = [], []
    for ckpt in args.ckpt:
        model = load_checkpoint(ckpt)
        check_compatible(model, sample_path)
        models.append(model)
    for model in models:
        reports.append(evaluate_by_maneuver(model, samples))
    if compare or len(reports) > 1:
        text = format_comparison(reports, reference=not args.no_reference)
    else:
        text = format_report(reports[0], reference=not args.no_reference)
    data = reports_to_json(reports, reference=not args.no_reference)
    data["checkpoints"] = [str(c) for c in args.ckpt]
    data["maneuvers"] = [m.cfg.maneuvers for m in models]
    data["split"] = args.split
    if args.report:
        text_path, json_path = _report_paths(args.report)
        try:
            text_path.write_text(text, encoding="utf-8")
            _write_json(json_path, data)
        except OSError as exc:
            raise UsageError(f"cannot write report {args.report}: {exc.strerror or exc}") from None
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    return _evaluate(args, compare=False)


def cmd_compare(args) -> int:
    return _evaluate(args, compare=True)


# parser

def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maneuver-pooling", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="cap BLAS/worker threads (default: $MP_THREADS or library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")

    p = sub.add_parser("preprocess", help="turn an NGSIM-format CSV into split sample files")
    p.add_argument("--input", required=True)
    p.add_argument("--units", choices=("feet", "meters"), default="feet")
    p.add_argument("--out", required=True)
    p.add_argument("--no-polar", action="store_true", help="store Cartesian features only")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a labeled synthetic highway dataset")
    p.add_argument("--lanes", type=int, default=3)
    p.add_argument("--vehicles", type=int, default=20)
    p.add_argument("--mix", default="1:0:0:0", help="keep:left:right:merge fractions or counts")
    p.add_argument("--accel-mix", default="0.6:0.2:0.2", help="const:speed:slow fractions or counts")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anchor-stride", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one pooling strategy")
    p.add_argument("--data", required=True)
    p.add_argument("--pooling", required=True, choices=POOLING_KEYS)
    p.add_argument("--maneuvers", choices=("on", "off"), default="on")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--max-steps", dest="max_steps", type=_positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    for name, func, nargs in (("eval", cmd_eval, 1), ("compare", cmd_compare, "+")):
        p = sub.add_parser(name, help="RMSE by maneuver class" if name == "eval"
                           else "side-by-side RMSE of several checkpoints")
        p.add_argument("--ckpt", required=True, nargs=nargs)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=SPLITS, default="test")
        p.add_argument("--report", help="text report path; JSON goes next to it")
        p.add_argument("--no-reference", action="store_true", help="omit published NGSIM reference rows")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = thread_count(args.threads)
        args.workers = threads or 1
        with _thread_limit(threads):
            return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManeuverPoolingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
