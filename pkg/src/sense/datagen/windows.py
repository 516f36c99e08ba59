"""Chronological splitting and time-windowed model inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .catalog import Catalog, EventRecord


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_catalog(catalog: Catalog, ratios=(0.6, 0.1, 0.3)) -> tuple[Catalog, Catalog, Catalog]:
    """Event-based chronological split into (train, val, test)."""
    n = len(catalog.events)
    if n < 3:
        raise ValueError(f"need at least 3 events to split, got {n}")
    n_train, n_val, _ = split_sizes(n, tuple(ratios))
    ev = catalog.events  # already chronological
    return (
        catalog.with_events(ev[:n_train]),
        catalog.with_events(ev[n_train:n_train + n_val]),
        catalog.with_events(ev[n_train + n_val:]),
    )


@dataclass
class StationBatch:
    """Model input for one event at one instant.

    waveforms: (N, 3, T) float32, right-aligned on ``t_now``.
    coords: (N, 3) lon, lat, height.
    arrived: (N,) whether the station's P wave is inside the window.
    """

    waveforms: np.ndarray
    coords: np.ndarray
    station_ids: np.ndarray
    t_now: float
    arrived: np.ndarray


def available_samples(t_now: float, sample_rate: float, n_samples: int) -> int:
    """Number of record samples strictly earlier than ``t_now``."""
    return int(min(n_samples, max(0, math.ceil(t_now * sample_rate - 1e-9))))


def window_traces(traces: np.ndarray, t_now: float, window_samples: int, sample_rate: float) -> np.ndarray:
    """Cut (…, T_rec) traces to the ``window_samples`` ending just before ``t_now``.

    Samples before the record start are zero; samples at or after ``t_now``
    are never included.
    """
    n_rec = traces.shape[-1]
    end = available_samples(t_now, sample_rate, n_rec)
    start = end - window_samples
    out = np.zeros(traces.shape[:-1] + (window_samples,), dtype=np.float32)
    lo = max(start, 0)
    if end > lo:
        out[..., lo - start:] = traces[..., lo:end]
    return out


def window_at(catalog: Catalog, event: EventRecord, t_now: float, window_len: float) -> StationBatch:
    """Everything the network has recorded for ``event`` in ``[t_now - window_len, t_now)``."""
    if window_len <= 0:
        raise ValueError(f"window_len must be positive, got {window_len}")
    if not 0 <= t_now <= catalog.duration + 1e-9:
        raise ValueError(f"t_now={t_now} outside [0, {catalog.duration}]")
    window_samples = int(round(window_len * catalog.sample_rate))
    wf = window_traces(event.traces, t_now, window_samples, catalog.sample_rate)
    return StationBatch(
        waveforms=wf,
        coords=catalog.coords,
        station_ids=np.arange(catalog.n_stations),
        t_now=float(t_now),
        arrived=np.asarray(event.p_arrival) < t_now,
    )
