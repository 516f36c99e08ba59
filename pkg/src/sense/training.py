"""Three-phase training with parameter-group freezing, Adam, and checkpoints.

Phase 1 trains everything except the early station table, with the fusion
weights pinned at 0.5. Phase 2 trains only the early station table (fusion
still pinned). Phase 3 trains every group with learnable fusion weights.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ModelConfig
from .datagen import Catalog, EventRecord, window_at
from .model import PARAM_GROUPS, SenseModel, param_group, param_shapes
from .numcore import Tensor

PINNED_ALPHA = 0.5

SCHEDULES = {
    "japan-like": (100, 40, 40),
    "taiwan-like": (50, 20, 20),
    "test": (5, 2, 2),
}


@dataclass(frozen=True)
class PhaseSpec:
    index: int
    epochs: int
    trainable: tuple[str, ...]
    alpha_pinned: float | None

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(g for g in PARAM_GROUPS if g not in self.trainable)

    def __post_init__(self):
        if self.index not in (1, 2, 3):
            raise ValueError(f"phase index must be 1, 2 or 3, got {self.index}")
        if self.epochs < 0:
            raise ValueError(f"phase {self.index}: negative epoch count {self.epochs}")
        unknown = set(self.trainable) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"phase {self.index}: unknown parameter groups {sorted(unknown)}")
        if "fusion" in self.trainable and self.alpha_pinned is not None:
            raise ValueError(f"phase {self.index}: fusion cannot be trainable while alpha is pinned")


def build_schedule(profile: str = "test", epochs: tuple[int, int, int] | None = None) -> list[PhaseSpec]:
    """Phase list for a named profile; ``epochs`` overrides the ``test`` counts."""
    if profile not in SCHEDULES:
        raise ValueError(f"unknown schedule profile {profile!r}; choose from {sorted(SCHEDULES)}")
    counts = SCHEDULES[profile]
    if epochs is not None:
        if profile != "test":
            raise ValueError("epoch counts are only configurable for the test profile")
        counts = tuple(int(e) for e in epochs)
        if len(counts) != 3:
            raise ValueError(f"need three epoch counts, got {counts}")
    everything_else = tuple(g for g in PARAM_GROUPS if g not in ("early_locality", "fusion"))
    return [
        PhaseSpec(1, counts[0], everything_else, PINNED_ALPHA),
        PhaseSpec(2, counts[1], ("early_locality",), PINNED_ALPHA),
        PhaseSpec(3, counts[2], PARAM_GROUPS, None),
    ]


# -- optimiser -----------------------------------------------------------------

@dataclass
class Adam:
    """Adam with a global gradient-norm clip.

    Moments and step counts are kept per parameter name, so a group that
    sits out a phase resumes with its own bias correction.
    """

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], names) -> float:
        """Update ``names`` from their ``.grad``; returns the pre-clip global norm."""
        names = [n for n in names if params[n].grad is not None]
        sq = sum(float(np.sum(np.square(params[n].grad, dtype=np.float64))) for n in names)
        norm = math.sqrt(sq)
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        b1, b2 = self.betas
        for n in names:
            p = params[n]
            g = p.grad.astype(np.float32) * np.float32(scale)
            if n not in self.m:
                self.m[n] = np.zeros_like(p.data)
                self.v[n] = np.zeros_like(p.data)
                self.steps[n] = 0
            self.steps[n] += 1
            t = self.steps[n]
            self.m[n] = (b1 * self.m[n] + (1 - b1) * g).astype(np.float32)
            self.v[n] = (b2 * self.v[n] + (1 - b2) * g * g).astype(np.float32)
            mhat = self.m[n] / (1 - b1 ** t)
            vhat = self.v[n] / (1 - b2 ** t)
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)
        return norm

    def hyper(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "clip_norm": self.clip_norm}


# -- training loop -------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    draws_per_event: int = 4
    before_p: float = 2.0
    after_s: float = 5.0
    seed: int = 0

    def make_optimizer(self) -> Adam:
        return Adam(lr=self.lr, betas=tuple(self.betas), eps=self.eps, clip_norm=self.clip_norm)


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, phase: int, epoch: int, event_id: int):
        super().__init__(f"non-finite loss in phase {phase}, epoch {epoch}, event {event_id}")
        self.phase, self.epoch, self.event_id = phase, epoch, event_id


@dataclass
class EpochRecord:
    epoch: int  # global, 1-based
    phase: int
    loss: float
    wall_seconds: float


def sample_t_now(event: EventRecord, duration: float, rng: np.random.Generator, n: int,
                 before_p: float = 2.0, after_s: float = 5.0) -> np.ndarray:
    """Uniform draws in [first P - before_p, first S + after_s], clipped to the record."""
    p = np.asarray(event.p_arrival, dtype=np.float64)
    s = np.asarray(event.s_arrival, dtype=np.float64)
    if np.isfinite(p).any() and np.isfinite(s).any():
        lo, hi = float(np.nanmin(p)) - before_p, float(np.nanmin(s)) + after_s
    else:
        lo, hi = 0.0, duration
    lo, hi = min(max(lo, 0.0), duration), min(max(hi, 0.0), duration)
    return rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, lo)


def _check_data(model: SenseModel, data: Catalog) -> None:
    if not data.events:
        raise ValueError("training data has no events")
    cfg = model.cfg
    if data.n_stations != cfg.n_stations:
        raise ValueError(f"dataset has {data.n_stations} stations, model expects {cfg.n_stations}")
    if abs(data.sample_rate - cfg.sample_rate) > 1e-9:
        raise ValueError(f"dataset sample rate {data.sample_rate} != model sample rate {cfg.sample_rate}")
    if list(data.thresholds) != list(cfg.thresholds):
        raise ValueError(f"dataset thresholds {list(data.thresholds)} != model thresholds {list(cfg.thresholds)}")


def _finite_output(out) -> bool:
    arrays = [out.probs] if out.probs is not None else [out.gmm.weights, out.gmm.means, out.gmm.stds]
    return all(np.isfinite(a.data).all() for a in arrays)


def set_trainable(model: SenseModel, phase: PhaseSpec) -> list[str]:
    """Flag parameters of the phase's groups as trainable; returns their names."""
    names = []
    for name, p in model.params.items():
        p.requires_grad = param_group(name) in phase.trainable
        p.grad = None
        if p.requires_grad:
            names.append(name)
    model.alpha_pinned = phase.alpha_pinned
    return names


def train_phase(model: SenseModel, data: Catalog, phase: PhaseSpec, opt: Adam, tcfg: TrainConfig,
                first_epoch: int = 1, on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Run ``phase.epochs`` epochs; one optimiser step per (event, window draw).

    Event order and window instants come from ``default_rng([seed, phase, epoch])``,
    so a resumed run draws exactly what an uninterrupted one would.
    """
    _check_data(model, data)
    names = set_trainable(model, phase)
    records = []
    for e in range(phase.epochs):
        epoch = first_epoch + e
        t0 = time.perf_counter()
        rng = np.random.default_rng([tcfg.seed, phase.index, epoch])
        order = rng.permutation(len(data.events))
        losses = []
        for k in order:
            ev = data.events[k]
            for t_now in sample_t_now(ev, data.duration, rng, tcfg.draws_per_event, tcfg.before_p, tcfg.after_s):
                batch = window_at(data, ev, float(t_now), model.cfg.window_seconds)
                out = model.forward(batch.waveforms[None], batch.coords, batch.station_ids)
                if not _finite_output(out):
                    raise NonFiniteLossError(phase.index, epoch, ev.event_id)
                loss = model.loss(out, ev.max_pga)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLossError(phase.index, epoch, ev.event_id)
                if names:
                    loss.backward()
                    opt.step(model.params, names)
                    for n in names:
                        model.params[n].grad = None
                losses.append(value)
        rec = EpochRecord(epoch, phase.index, float(np.mean(losses)), time.perf_counter() - t0)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    for p in model.params.values():
        p.requires_grad = True
    return records


def run_schedule(model: SenseModel, data: Catalog, schedule: list[PhaseSpec], tcfg: TrainConfig,
                 out_dir=None, opt: Adam | None = None, start_phase: int = 1,
                 on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[SenseModel, list[EpochRecord]]:
    """Execute the phases in order from ``start_phase``.

    With ``out_dir`` set, writes ``phase{k}.ckpt`` after each phase and
    appends epoch rows to ``metrics.csv``. A non-finite loss propagates
    before the current phase's checkpoint is written, so the files on disk
    are always from the last completed phase.
    """
    opt = opt if opt is not None else tcfg.make_optimizer()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.csv" if out is not None else None
    if log_path is not None and (start_phase == 1 or not log_path.exists()):
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "phase", "loss", "wall_seconds"])
    epoch = 1 + sum(p.epochs for p in schedule if p.index < start_phase)
    records: list[EpochRecord] = []

    def log(rec: EpochRecord) -> None:
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([rec.epoch, rec.phase, repr(rec.loss), f"{rec.wall_seconds:.3f}"])
        if on_epoch is not None:
            on_epoch(rec)

    for phase in schedule:
        if phase.index < start_phase:
            continue
        records += train_phase(model, data, phase, opt, tcfg, first_epoch=epoch, on_epoch=log)
        epoch += phase.epochs
        model.alpha_pinned = None
        if out is not None:
            save_checkpoint(out / f"phase{phase.index}.ckpt", model, opt, cursor=(phase.index, epoch - 1), seed=tcfg.seed)
    return model, records


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"SENSECKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for unusable checkpoint files."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: SenseModel
    optimizer: Adam
    cursor: tuple[int, int]  # (last completed phase, last completed global epoch)
    seed: int


def _sections(model: SenseModel, opt: Adam | None) -> list[tuple[str, np.ndarray]]:
    out = [(f"param.{n}", p.data) for n, p in sorted(model.params.items())]
    if opt is not None:
        for n in sorted(opt.m):
            out.append((f"adam.m.{n}", opt.m[n]))
            out.append((f"adam.v.{n}", opt.v[n]))
    return out


def save_checkpoint(path, model: SenseModel, opt: Adam | None = None, cursor=(0, 0), seed: int = 0) -> None:
    """Magic, u32 version, u64 header length, JSON header, then raw ``<f4`` sections."""
    sections = _sections(model, opt)
    meta, offset = [], 0
    for name, arr in sections:
        meta.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "format_version": CKPT_VERSION,
        "config": model.cfg.to_dict(),
        "sections": meta,
        "optimizer": None if opt is None else {**opt.hyper(), "steps": {n: opt.steps[n] for n in sorted(opt.steps)}},
        "cursor": list(cursor),
        "seed": int(seed),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, arr in sections:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` rejects a file written for another config."""
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {CKPT_VERSION}")
    pos += 12
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    body = raw[pos + hlen:]
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expected.to_dict().items() if cfg.to_dict().get(k) != v)
        raise ConfigMismatchError(f"{path}: checkpoint config differs from the requested one in {diff}")

    arrays = {}
    for sec in header["sections"]:
        shape = tuple(sec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start, stop = sec["offset"], sec["offset"] + 4 * n
        if stop > len(body):
            raise CheckpointFormatError(f"{path}: section {sec['name']} runs past the end of the file")
        arrays[sec["name"]] = np.frombuffer(body, dtype="<f4", count=n, offset=start).astype(np.float32).reshape(shape)

    expected_shapes = param_shapes(cfg)
    params = {}
    for name, shape in expected_shapes.items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointShapeError(f"{path}: missing parameter {name}")
        if arrays[key].shape != shape:
            raise CheckpointShapeError(f"{path}: parameter {name} has shape {arrays[key].shape}, config expects {shape}")
        params[name] = Tensor(arrays[key], requires_grad=True, name=name)
    extra = sorted(k[6:] for k in arrays if k.startswith("param.") and k[6:] not in expected_shapes)
    if extra:
        raise CheckpointShapeError(f"{path}: unexpected parameters {extra[:5]}")
    model = SenseModel(cfg, params=params)

    o = header.get("optimizer")
    if o is None:
        opt = Adam()
    else:
        opt = Adam(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"], clip_norm=o["clip_norm"])
        for n, t in o["steps"].items():
            opt.m[n] = arrays[f"adam.m.{n}"].copy()
            opt.v[n] = arrays[f"adam.v.{n}"].copy()
            opt.steps[n] = int(t)
    return Checkpoint(model, opt, tuple(header["cursor"]), int(header["seed"]))
