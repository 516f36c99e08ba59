"""Streaming alarm simulation, outcome tallies, metrics and threshold sweeps.

Every (event, station, level) triple is scored once: an alarm counts as a
true positive only when it was issued strictly before the station's first
exceedance of that level.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .datagen import Catalog, EventRecord, StationBatch, window_at
from .model import SenseModel

DEFAULT_CADENCE = 0.5
DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
UNDEFINED = "undefined"
OUTCOMES = ("TP", "FP", "TN", "FN")

# A predictor maps a list of per-instant batches for one event to (J, N, C) probabilities.
Predictor = Callable[[Sequence[StationBatch]], np.ndarray]


def eval_times(duration: float, cadence: float = DEFAULT_CADENCE) -> np.ndarray:
    """cadence, 2*cadence, ... up to and including ``duration``."""
    if not cadence > 0:
        raise ValueError(f"cadence must be positive, got {cadence}")
    n = int(math.floor(duration / cadence + 1e-9))
    return cadence * np.arange(1, n + 1)


def model_predictor(model: SenseModel, chunk: int = 8) -> Predictor:
    def predict(batches: Sequence[StationBatch]) -> np.ndarray:
        wf = np.stack([b.waveforms for b in batches])
        return model.level_probabilities(wf, batches[0].coords, batches[0].station_ids, chunk=chunk)
    return predict


@dataclass
class ProbStream:
    """Per-instant level probabilities for one event: ``probs`` is (J, N, C)."""

    event_id: int
    times: np.ndarray
    probs: np.ndarray


def stream_probabilities(predictor: Predictor | SenseModel, catalog: Catalog, event: EventRecord,
                         cadence: float = DEFAULT_CADENCE, window_len: float | None = None) -> ProbStream:
    if isinstance(predictor, SenseModel):
        window_len = predictor.cfg.window_seconds if window_len is None else window_len
        predictor = model_predictor(predictor)
    if window_len is None:
        window_len = catalog.duration
    times = eval_times(catalog.duration, cadence)
    batches = [window_at(catalog, event, float(t), window_len) for t in times]
    probs = np.asarray(predictor(batches), dtype=np.float64)
    if probs.shape[:2] != (len(times), catalog.n_stations):
        raise ValueError(f"predictor returned {probs.shape}, expected ({len(times)}, {catalog.n_stations}, C)")
    return ProbStream(event.event_id, times, probs)


def first_alarm_times(times: np.ndarray, probs: np.ndarray, tau) -> np.ndarray:
    """Latching alarm times (N, C), NaN where a level never fires.

    Level c fires at the first instant any level >= c is above its cutoff,
    so the alarmed set is downward-closed at every instant.
    """
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), probs.shape[-1:])
    above = probs > tau  # (J, N, C)
    closed = np.flip(np.logical_or.accumulate(np.flip(above, axis=-1), axis=-1), axis=-1)
    fired = closed.any(axis=0)
    first = np.argmax(closed, axis=0)
    return np.where(fired, np.asarray(times)[first], np.nan)


@dataclass
class AlarmTimeline:
    event_id: int
    alarm_times: np.ndarray  # (N, C), NaN = never
    cadence: float
    fire_probs: np.ndarray | None = None  # probability at the firing instant


def stream_predict(predictor: Predictor | SenseModel, catalog: Catalog, event: EventRecord, tau=0.5,
                   cadence: float = DEFAULT_CADENCE) -> AlarmTimeline:
    s = stream_probabilities(predictor, catalog, event, cadence)
    return timeline_from_stream(s, tau, cadence)


def timeline_from_stream(s: ProbStream, tau, cadence: float) -> AlarmTimeline:
    at = first_alarm_times(s.times, s.probs, tau)
    idx = np.searchsorted(s.times, np.nan_to_num(at, nan=np.inf))
    fire = np.take_along_axis(s.probs, np.minimum(idx, len(s.times) - 1)[None], axis=0)[0]
    return AlarmTimeline(s.event_id, at, cadence, np.where(np.isnan(at), np.nan, fire))


# -- outcomes and metrics ---------------------------------------------------------

def _missing(t) -> bool:
    return t is None or (isinstance(t, float) and math.isnan(t))


def classify_outcome(alarm_time, exceed_time) -> str:
    """TP/FP/TN/FN for one (station, level); ``None`` or NaN means absent."""
    alarm, exceed = not _missing(alarm_time), not _missing(exceed_time)
    if alarm and exceed:
        return "TP" if alarm_time < exceed_time else "FN"
    if alarm:
        return "FP"
    return "FN" if exceed else "TN"


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def tally(alarm_times, exceed_times) -> list[ConfusionCounts]:
    """Per-level counts from (…, C) alarm and exceedance times (NaN = absent)."""
    a = np.asarray(alarm_times, dtype=np.float64)
    e = np.asarray(exceed_times, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"alarm times {a.shape} vs exceedance times {e.shape}")
    a, e = a.reshape(-1, a.shape[-1]), e.reshape(-1, e.shape[-1])
    has_a, has_e = ~np.isnan(a), ~np.isnan(e)
    early = has_a & has_e & (a < np.where(has_e, e, 0.0))
    tp = early
    fp = has_a & ~has_e
    tn = ~has_a & ~has_e
    fn = has_e & ~early
    return [ConfusionCounts(int(tp[:, c].sum()), int(fp[:, c].sum()), int(tn[:, c].sum()), int(fn[:, c].sum()))
            for c in range(a.shape[1])]


@dataclass
class Metrics:
    """None marks an undefined ratio (zero denominator)."""

    precision: float | None
    recall: float | None
    f1: float | None


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics(counts: ConfusionCounts) -> Metrics:
    """Precision, recall and F1; F1 = 2TP / (2TP + FP + FN).

    That form equals the harmonic mean whenever both ratios are defined and
    is 0 (not undefined) when one ratio is undefined and the other is 0.
    """
    return Metrics(
        _ratio(counts.tp, counts.tp + counts.fp),
        _ratio(counts.tp, counts.tp + counts.fn),
        _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
    )


@dataclass
class LeadStats:
    n: int
    mean: float | None
    median: float | None
    max: float | None


def lead_stats(leads) -> LeadStats:
    x = np.asarray(leads, dtype=np.float64).reshape(-1)
    if x.size == 0:
        return LeadStats(0, None, None, None)
    return LeadStats(int(x.size), float(x.mean()), float(np.median(x)), float(x.max()))


def leading_times(alarm_times, exceed_times) -> list[LeadStats]:
    """Per-level stats of exceed - alarm over true positives only."""
    a = np.asarray(alarm_times, dtype=np.float64)
    e = np.asarray(exceed_times, dtype=np.float64)
    a, e = a.reshape(-1, a.shape[-1]), e.reshape(-1, e.shape[-1])
    out = []
    for c in range(a.shape[1]):
        ok = ~np.isnan(a[:, c]) & ~np.isnan(e[:, c])
        ok[ok] = a[ok, c] < e[ok, c]
        out.append(lead_stats(e[ok, c] - a[ok, c]))
    return out


# -- catalog-level evaluation -----------------------------------------------------

@dataclass
class LevelResult:
    level: int
    threshold: float
    tau: float
    counts: ConfusionCounts
    metrics: Metrics
    leads: LeadStats


@dataclass
class EvalResult:
    levels: list[LevelResult]
    cadence: float
    n_events: int
    n_stations: int
    timelines: list[AlarmTimeline] = field(default_factory=list, repr=False)

    CSV_HEADER = ("level", "threshold_pga", "tau", "precision", "recall", "f1", "tp", "fp", "tn", "fn",
                  "lead_mean", "lead_median", "lead_max")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.levels:
            m, c, l = r.metrics, r.counts, r.leads
            w.writerow([r.level, _fmt(r.threshold), _fmt(r.tau), _fmt(m.precision), _fmt(m.recall), _fmt(m.f1),
                        c.tp, c.fp, c.tn, c.fn, _fmt(l.mean), _fmt(l.median), _fmt(l.max)])
        return buf.getvalue()

    def to_json(self) -> dict:
        def val(x):
            return UNDEFINED if x is None else x
        return {
            "n_events": self.n_events,
            "n_stations": self.n_stations,
            "cadence": self.cadence,
            "levels": [
                {
                    "level": r.level,
                    "threshold_pga": r.threshold,
                    "tau": r.tau,
                    "precision": val(r.metrics.precision),
                    "recall": val(r.metrics.recall),
                    "f1": val(r.metrics.f1),
                    "counts": {"TP": r.counts.tp, "FP": r.counts.fp, "TN": r.counts.tn, "FN": r.counts.fn},
                    "leading_time_s": {"mean": val(r.leads.mean), "median": val(r.leads.median),
                                       "max": val(r.leads.max), "n": r.leads.n},
                }
                for r in self.levels
            ],
        }


def _fmt(x) -> str:
    return UNDEFINED if x is None else repr(float(x))


def exceed_matrix(catalog: Catalog, event_ids: Iterable[int] | None = None) -> np.ndarray:
    events = catalog.events if event_ids is None else [catalog.event(i) for i in event_ids]
    return np.stack([ev.first_exceed for ev in events])  # (E, N, C)


def score_streams(streams: Sequence[ProbStream], catalog: Catalog, tau, cadence: float) -> EvalResult:
    if not streams:
        raise ValueError("nothing to score: no events")
    C = len(catalog.thresholds)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (C,))
    timelines = [timeline_from_stream(s, tau, cadence) for s in streams]
    alarms = np.stack([t.alarm_times for t in timelines])
    exceed = exceed_matrix(catalog, [s.event_id for s in streams])
    counts = tally(alarms, exceed)
    leads = leading_times(alarms, exceed)
    levels = [LevelResult(c, float(catalog.thresholds[c]), float(tau[c]), counts[c], metrics(counts[c]), leads[c])
              for c in range(C)]
    return EvalResult(levels, cadence, len(streams), catalog.n_stations, timelines)


def stream_catalog(predictor: Predictor | SenseModel, catalog: Catalog, cadence: float = DEFAULT_CADENCE,
                   on_event: Callable[[int], None] | None = None) -> list[ProbStream]:
    out = []
    for ev in catalog.events:
        out.append(stream_probabilities(predictor, catalog, ev, cadence))
        if on_event is not None:
            on_event(ev.event_id)
    return out


def evaluate(predictor: Predictor | SenseModel, catalog: Catalog, tau, cadence: float = DEFAULT_CADENCE) -> EvalResult:
    return score_streams(stream_catalog(predictor, catalog, cadence), catalog, tau, cadence)


# -- threshold sweep ------------------------------------------------------------

def _rank(f1: float | None) -> float:
    return -1.0 if f1 is None else f1


def sweep_thresholds(streams: Sequence[ProbStream], catalog: Catalog, grid: Sequence[float] = DEFAULT_GRID
                     ) -> tuple[np.ndarray, list[list[float | None]]]:
    """Per-level cutoff maximising F1, plus the F1 table (level x grid).

    Levels are swept from the highest down: a level's alarm time depends on
    the cutoffs of the levels above it (downward closure), and those are
    already fixed when it is swept. Ties go to the larger cutoff; an
    undefined F1 ranks below every defined one.
    """
    if not streams:
        raise ValueError("threshold sweep needs a non-empty validation set")
    grid = [float(g) for g in grid]
    if not grid or any(not 0 < g < 1 for g in grid):
        raise ValueError(f"grid must be non-empty and inside (0, 1), got {grid}")
    C = len(catalog.thresholds)
    exceed = exceed_matrix(catalog, [s.event_id for s in streams])  # (E, N, C)
    # running maxima: level c fires by instant j iff runmax_j > tau
    runmax = [np.maximum.accumulate(s.probs, axis=0) for s in streams]
    times = [s.times for s in streams]

    def fire_times(level: int, tau: float) -> np.ndarray:
        out = []
        for t, r in zip(times, runmax):
            above = r[:, :, level] > tau
            out.append(np.where(above.any(axis=0), t[np.argmax(above, axis=0)], np.nan))
        return np.stack(out)  # (E, N)

    chosen = np.empty(C)
    table: list[list[float | None]] = [[] for _ in range(C)]
    above_level = np.full(exceed.shape[:2], np.nan)  # effective alarm times of level c+1
    for c in range(C - 1, -1, -1):
        best, best_tau, best_times = None, None, None
        for tau in grid:
            own = fire_times(c, tau)
            eff = np.fmin(own, above_level)
            f1 = metrics(tally(eff[..., None], exceed[..., c:c + 1])[0]).f1
            table[c].append(f1)
            if best_tau is None or _rank(f1) >= _rank(best):
                best, best_tau, best_times = f1, tau, eff
        chosen[c] = best_tau
        above_level = best_times
    return chosen, table


# -- alarm stream text format --------------------------------------------------

STREAM_HEADER = "# t\tstation\tlevel\tthreshold_pga\tprob"


@dataclass(frozen=True)
class AlarmLine:
    t: float
    station: int
    level: int
    threshold: float
    prob: float


def format_alarm_stream(timeline: AlarmTimeline, thresholds) -> list[str]:
    """Lines in firing order (time, then station, then level)."""
    rows = []
    N, C = timeline.alarm_times.shape
    for n in range(N):
        for c in range(C):
            t = timeline.alarm_times[n, c]
            if not np.isnan(t):
                p = timeline.fire_probs[n, c] if timeline.fire_probs is not None else float("nan")
                rows.append((float(t), n, c, float(p)))
    rows.sort()
    return [STREAM_HEADER] + [f"{t!r}\t{n}\t{c}\t{thresholds[c]!r}\t{p!r}" for t, n, c, p in rows]


def read_alarm_stream(lines: Iterable[str]) -> list[AlarmLine]:
    out = []
    for i, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"alarm stream line {i}: expected 5 tab-separated fields, got {len(parts)}")
        out.append(AlarmLine(float(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4])))
    return out


def timeline_from_lines(lines: Sequence[AlarmLine], n_stations: int, n_levels: int) -> np.ndarray:
    """Rebuild the (N, C) alarm-time matrix; the earliest line per cell wins."""
    at = np.full((n_stations, n_levels), np.nan)
    for a in lines:
        if np.isnan(at[a.station, a.level]) or a.t < at[a.station, a.level]:
            at[a.station, a.level] = a.t
    return at
