"""Command-line entry point: ``sense gen-data | train | eval | stream``.

Configuration is merged from built-in defaults, an optional YAML file
(``--config``), ``SENSE_`` environment variables (``__`` separates nesting,
e.g. ``SENSE_TRAIN__LR=1e-3``) and command-line flags, in that order. The
merged result is validated before any work starts and written next to the
outputs as ``config.effective.yaml``.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as ev
from .config import ModelConfig, profile
from .datagen import (
    TAIWAN_THRESHOLDS,
    DatasetError,
    GeneratorConfig,
    generate_catalog,
    read_dataset,
    split_catalog,
    write_dataset,
)
from .heads import level_index
from .model import SenseModel
from .training import (
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    build_schedule,
    load_checkpoint,
    run_schedule,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ENV_PREFIX = "SENSE_"
EFFECTIVE_CONFIG = "config.effective.yaml"

DEFAULTS: dict = {
    "seed": 0,
    "out": None,
    "thresholds": list(TAIWAN_THRESHOLDS),
    "data": {
        "path": None,
        "n_stations": 16,
        "n_events": 200,
        "region": [121.0, 121.6, 23.8, 24.4],
        "magnitude_range": [4.0, 7.0],
        "depth_range": [5.0, 40.0],
        "station_height_range": [0.0, 500.0],
        "duration": 30.0,
        "sample_rate": 100.0,
        "mean_interevent_s": 86400.0,
        "split": [0.6, 0.1, 0.3],
    },
    "model": {"profile": "desk"},
    "train": {
        "schedule": "test",
        "epochs": [5, 2, 2],
        "lr": 1e-4,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "clip_norm": 1.0,
        "draws_per_event": 4,
        "resume": None,
    },
    "eval": {
        "checkpoint": None,
        "split": "test",
        "cadence": ev.DEFAULT_CADENCE,
        "tau": None,
        "grid": list(ev.DEFAULT_GRID),
        "event_id": None,
    },
}
MODEL_KEYS = {"profile"} | {f.name for f in dataclasses.fields(ModelConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration ----------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if path == "model." and k in MODEL_KEYS:
            out[k] = v
            continue
        if k not in base:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def env_overrides(environ) -> dict:
    over: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
        node = over
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _scalar(raw)
    return over


def _scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def load_config(path=None, environ=None, flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a mapping")
        cfg = _merge(cfg, loaded)
    cfg = _merge(cfg, env_overrides(os.environ if environ is None else environ))
    if flags:
        cfg = _merge(cfg, flags)
    validate_config(cfg)
    return cfg


def generator_config(cfg: dict) -> GeneratorConfig:
    d = cfg["data"]
    return GeneratorConfig(
        n_stations=int(d["n_stations"]),
        n_events=int(d["n_events"]),
        region=tuple(float(x) for x in d["region"]),
        magnitude_range=tuple(float(x) for x in d["magnitude_range"]),
        depth_range=tuple(float(x) for x in d["depth_range"]),
        seed=int(cfg["seed"]),
        sample_rate=float(d["sample_rate"]),
        duration=float(d["duration"]),
        thresholds=tuple(float(x) for x in cfg["thresholds"]),
        station_height_range=tuple(float(x) for x in d["station_height_range"]),
        mean_interevent_s=float(d["mean_interevent_s"]),
    )


def model_config(cfg: dict, n_stations: int | None = None, sample_rate: float | None = None) -> ModelConfig:
    m = dict(cfg["model"])
    name = m.pop("profile")
    th = tuple(float(x) for x in cfg["thresholds"])
    base = {"thresholds": th, "n_levels": len(th)}
    if n_stations is not None:
        base["n_stations"] = n_stations
    if sample_rate is not None:
        base["sample_rate"] = sample_rate
    for k in ("n_stations", "sample_rate"):
        if k in m and k in base and m[k] != base[k]:
            raise UsageError(f"model.{k}={m[k]} conflicts with the dataset ({base[k]})")
    return profile(name, **{**base, **m})


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lr=float(t["lr"]), betas=tuple(float(b) for b in t["betas"]), eps=float(t["eps"]),
                       clip_norm=float(t["clip_norm"]), draws_per_event=int(t["draws_per_event"]),
                       seed=int(cfg["seed"]))


def validate_config(cfg: dict) -> None:
    """Build every typed config once so bad values fail before any work."""
    try:
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ValueError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
        generator_config(cfg).validate()
        model_config(cfg)
        train_config(cfg)
        t = cfg["train"]
        build_schedule(t["schedule"], t["epochs"] if t["schedule"] == "test" else None)
        split = [float(x) for x in cfg["data"]["split"]]
        if len(split) != 3 or abs(sum(split) - 1) > 1e-9 or min(split) <= 0:
            raise ValueError(f"data.split must be three positive ratios summing to 1, got {split}")
        e = cfg["eval"]
        if e["split"] not in ("train", "val", "test"):
            raise ValueError(f"eval.split must be train, val or test, got {e['split']!r}")
        if not float(e["cadence"]) > 0:
            raise ValueError(f"eval.cadence must be positive, got {e['cadence']}")
        if e["tau"] is not None:
            taus = np.atleast_1d(np.asarray(e["tau"], dtype=float))
            if np.any((taus <= 0) | (taus >= 1)) or taus.size not in (1, len(cfg["thresholds"])):
                raise ValueError(f"eval.tau must be one value or one per level, each in (0, 1), got {e['tau']}")
        if not e["grid"] or any(not 0 < float(g) < 1 for g in e["grid"]):
            raise ValueError("eval.grid must be non-empty with values in (0, 1)")
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _yaml_ready(x):
    if isinstance(x, dict):
        return {k: _yaml_ready(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_yaml_ready(v) for v in x]
    return x


def echo_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(yaml.safe_dump(_yaml_ready(cfg), sort_keys=True))


# -- commands ---------------------------------------------------------------------

def _require(cfg: dict, dotted: str) -> str:
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    if node is None:
        raise UsageError(f"{dotted} is required (flag or config)")
    return node


def _out_dir(cfg: dict, force: bool) -> Path:
    out = Path(_require(cfg, "out"))
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    return out


def _clear_dataset(out: Path) -> None:
    # only files a previous gen-data run could have written
    for p in (out / "events").glob("*") if (out / "events").is_dir() else []:
        if p.suffix in (".json", ".f32"):
            p.unlink()
    for name in ("manifest.json", EFFECTIVE_CONFIG):
        if (out / name).exists():
            (out / name).unlink()


def level_histogram(catalog) -> dict[str, int]:
    idx = np.concatenate([level_index(e.max_pga, catalog.thresholds) for e in catalog.events])
    labels = ["below"] + [f">={t:g}" for t in catalog.thresholds]
    return {lab: int(np.sum(idx == i - 1)) for i, lab in enumerate(labels)}


def cmd_gen_data(cfg: dict, force: bool) -> int:
    out = _out_dir(cfg, force)
    if force and out.exists():
        _clear_dataset(out)
    catalog = generate_catalog(generator_config(cfg))
    write_dataset(catalog, out)
    echo_config(cfg, out)
    hist = level_histogram(catalog)
    print(f"events: {len(catalog.events)}  stations: {catalog.n_stations}  "
          f"samples: {catalog.n_samples} @ {catalog.sample_rate:g} Hz")
    print("station-events by PGA level (%g): " + "  ".join(f"{k}: {v}" for k, v in hist.items()))
    return EXIT_OK


def _dataset(cfg: dict):
    path = Path(_require(cfg, "data.path"))
    if not (path / "manifest.json").exists():
        raise UsageError(f"no dataset at {path} (manifest.json missing)")
    return read_dataset(path)


def cmd_train(cfg: dict, force: bool) -> int:
    data = _dataset(cfg)
    train, _, _ = split_catalog(data, tuple(cfg["data"]["split"]))
    tcfg = train_config(cfg)
    t = cfg["train"]
    schedule = build_schedule(t["schedule"], t["epochs"] if t["schedule"] == "test" else None)
    resume = t["resume"]
    out = Path(_require(cfg, "out"))
    if resume is None:
        out = _out_dir(cfg, force)
        mcfg = model_config(cfg, n_stations=data.n_stations, sample_rate=data.sample_rate)
        model, opt, start = SenseModel(mcfg, seed=tcfg.seed), None, 1
    else:
        ck = load_checkpoint(resume)
        _check_compatible(ck.model.cfg, data)
        if ck.seed != tcfg.seed:
            raise UsageError(f"checkpoint was trained with seed {ck.seed}, config says {tcfg.seed}")
        model, opt, start = ck.model, ck.optimizer, ck.cursor[0] + 1
    echo_config(cfg, out)

    def report(rec):
        print(f"epoch {rec.epoch} phase {rec.phase} loss {rec.loss:.6f} ({rec.wall_seconds:.1f}s)", file=sys.stderr)

    try:
        run_schedule(model, train, schedule, tcfg, out_dir=out, opt=opt, start_phase=start, on_epoch=report)
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}; last completed checkpoint kept in {out}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"checkpoints written to {out}")
    return EXIT_OK


def _check_compatible(mcfg: ModelConfig, data) -> None:
    if mcfg.n_stations != data.n_stations:
        raise CheckpointError(f"checkpoint expects {mcfg.n_stations} stations, dataset has {data.n_stations}")
    if list(mcfg.thresholds) != list(data.thresholds):
        raise CheckpointError(f"checkpoint thresholds {list(mcfg.thresholds)} != dataset {list(data.thresholds)}")
    if abs(mcfg.sample_rate - data.sample_rate) > 1e-9:
        raise CheckpointError(f"checkpoint sample rate {mcfg.sample_rate} != dataset {data.sample_rate}")


def _load_model(cfg: dict, explicit_model: bool, data) -> SenseModel:
    ckpt = _require(cfg, "eval.checkpoint")
    expected = model_config(cfg, n_stations=data.n_stations, sample_rate=data.sample_rate) if explicit_model else None
    model = load_checkpoint(ckpt, expected=expected).model
    _check_compatible(model.cfg, data)
    return model


def cmd_eval(cfg: dict, force: bool, explicit_model: bool = False) -> int:
    data = _dataset(cfg)
    model = _load_model(cfg, explicit_model, data)
    out = _out_dir(cfg, force)
    echo_config(cfg, out)
    parts = dict(zip(("train", "val", "test"), split_catalog(data, tuple(cfg["data"]["split"]))))
    e = cfg["eval"]
    cadence = float(e["cadence"])
    if e["tau"] is None:
        val_streams = ev.stream_catalog(model, parts["val"], cadence)
        tau, table = ev.sweep_thresholds(val_streams, parts["val"], e["grid"])
        (out / "sweep.json").write_text(json.dumps(
            {"grid": [float(g) for g in e["grid"]], "tau": tau.tolist(),
             "f1": [[ev.UNDEFINED if f is None else f for f in row] for row in table]}, indent=1, sort_keys=True))
    else:
        tau = np.broadcast_to(np.asarray(e["tau"], dtype=float), (len(data.thresholds),)).copy()
    target = parts[e["split"]]
    result = ev.score_streams(ev.stream_catalog(model, target, cadence), target, tau, cadence)
    (out / "metrics.csv").write_text(result.to_csv())
    summary = {"split": e["split"], **result.to_json()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    sys.stdout.write(result.to_csv())
    return EXIT_OK


def cmd_stream(cfg: dict, force: bool, explicit_model: bool = False) -> int:
    data = _dataset(cfg)
    model = _load_model(cfg, explicit_model, data)
    event_id = _require(cfg, "eval.event_id")
    try:
        event = data.event(int(event_id))
    except KeyError:
        raise UsageError(f"unknown event id {event_id}") from None
    tau = 0.5 if cfg["eval"]["tau"] is None else cfg["eval"]["tau"]
    timeline = ev.stream_predict(model, data, event, tau, float(cfg["eval"]["cadence"]))
    lines = ev.format_alarm_stream(timeline, data.thresholds)
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        echo_config(cfg, out)
        (out / f"alarms_{int(event_id)}.tsv").write_text("\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="allow writing into a non-empty output directory")

    p = _Parser(prog="sense", description="Multistation earthquake early-warning model", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--stations", type=int)
    g.add_argument("--events", type=int)

    t = sub.add_parser("train", parents=[common], help="run the three-phase schedule")
    t.add_argument("--data")
    t.add_argument("--resume", help="boundary checkpoint to continue from")
    t.add_argument("--schedule", choices=("japan-like", "taiwan-like", "test"))
    t.add_argument("--epochs", help="comma-separated epoch counts for the test schedule")
    t.add_argument("--head", choices=("discrete", "continuous"))
    t.add_argument("--profile")

    for name, help_ in (("eval", "score a checkpoint on a split"), ("stream", "print alarms for one event")):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--checkpoint")
        e.add_argument("--data")
        e.add_argument("--cadence", type=float)
        e.add_argument("--tau", type=float)
        if name == "eval":
            e.add_argument("--split", choices=("train", "val", "test"))
        else:
            e.add_argument("--event-id", type=int, dest="event_id")
    return p


def _flags(args) -> dict:
    f: dict = {}
    if getattr(args, "seed", None) is not None:
        f["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        f["out"] = args.out

    def put(section, key, value):
        if value is not None:
            f.setdefault(section, {})[key] = value

    put("data", "n_stations", getattr(args, "stations", None))
    put("data", "n_events", getattr(args, "events", None))
    put("data", "path", getattr(args, "data", None))
    put("train", "resume", getattr(args, "resume", None))
    put("train", "schedule", getattr(args, "schedule", None))
    if getattr(args, "epochs", None) is not None:
        try:
            put("train", "epochs", [int(x) for x in args.epochs.split(",")])
        except ValueError:
            raise UsageError(f"--epochs must be comma-separated integers, got {args.epochs!r}") from None
    put("model", "head_kind", getattr(args, "head", None))
    put("model", "profile", getattr(args, "profile", None))
    put("eval", "checkpoint", getattr(args, "checkpoint", None))
    put("eval", "cadence", getattr(args, "cadence", None))
    put("eval", "tau", getattr(args, "tau", None))
    put("eval", "split", getattr(args, "split", None))
    put("eval", "event_id", getattr(args, "event_id", None))
    return f


def main(argv=None, environ=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags = _flags(args)
        cfg = load_config(getattr(args, "config", None), environ, flags)
        force = bool(getattr(args, "force", False))
        explicit_model = cfg["model"] != DEFAULTS["model"]
        if args.command == "gen-data":
            return cmd_gen_data(cfg, force)
        if args.command == "train":
            return cmd_train(cfg, force)
        if args.command == "eval":
            return cmd_eval(cfg, force, explicit_model)
        return cmd_stream(cfg, force, explicit_model)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
