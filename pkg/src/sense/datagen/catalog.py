"""Record types shared by the generator, the splitter and the dataset reader."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# PGA thresholds in %g
TAIWAN_THRESHOLDS = (0.81, 2.5, 8.1, 14.0, 25.0)
JAPAN_THRESHOLDS = (1.0, 2.0, 5.0, 10.0, 20.0)

COMPONENTS = ("Z", "N", "E")


@dataclass(frozen=True)
class StationMeta:
    station_id: int
    longitude: float
    latitude: float
    height: float  # meters

    def __post_init__(self):
        if abs(self.latitude) > 90 or abs(self.longitude) > 180:
            raise ValueError(f"station {self.station_id}: coordinates out of range ({self.longitude}, {self.latitude})")

    @property
    def coords(self) -> tuple[float, float, float]:
        return (self.longitude, self.latitude, self.height)


@dataclass
class EventRecord:
    """One earthquake as seen by every station of the network.

    ``traces`` is (N, 3, T) float32 in %g on the event clock (sample ``i`` is
    ``i / sample_rate`` seconds after origin). ``first_exceed`` is (N, C)
    seconds, NaN where the level is never reached.
    """

    event_id: int
    origin_time: float
    hypocenter: tuple[float, float, float]  # lon, lat, depth km
    magnitude: float
    traces: np.ndarray
    max_pga: np.ndarray
    first_exceed: np.ndarray
    p_arrival: np.ndarray
    s_arrival: np.ndarray

    @property
    def n_stations(self) -> int:
        return self.traces.shape[0]

    def exceeds(self, level: int) -> np.ndarray:
        return ~np.isnan(self.first_exceed[:, level])


@dataclass
class Catalog:
    stations: list[StationMeta]
    events: list[EventRecord]
    sample_rate: float
    n_samples: int
    thresholds: tuple[float, ...] = TAIWAN_THRESHOLDS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.station_id for s in self.stations]
        if ids != list(range(len(ids))):
            raise ValueError("station ids must be dense and ordered 0..N-1")
        times = [e.origin_time for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("events must be strictly ordered by origin_time")
        for ev in self.events:
            if ev.traces.shape != (len(self.stations), 3, self.n_samples):
                raise ValueError(
                    f"event {ev.event_id}: traces shape {ev.traces.shape}, expected "
                    f"{(len(self.stations), 3, self.n_samples)}"
                )

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def coords(self) -> np.ndarray:
        return np.array([s.coords for s in self.stations], dtype=np.float64)

    def event(self, event_id: int) -> EventRecord:
        for ev in self.events:
            if ev.event_id == event_id:
                return ev
        raise KeyError(f"unknown event id {event_id}")

    def with_events(self, events: list[EventRecord]) -> "Catalog":
        return Catalog(self.stations, events, self.sample_rate, self.n_samples, self.thresholds, dict(self.meta))


def scan_labels(traces: np.ndarray, thresholds, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Peak |acceleration| over components and first crossing time per level.

    traces: (N, 3, T). Returns ``max_pga`` (N,) and ``first_exceed`` (N, C)
    with NaN for levels never reached.
    """
    peak = np.abs(traces).max(axis=1)  # (N, T)
    max_pga = peak.max(axis=1).astype(np.float64)
    first = np.full((traces.shape[0], len(thresholds)), np.nan)
    for c, thr in enumerate(thresholds):
        hit = peak >= thr
        any_hit = hit.any(axis=1)
        first[any_hit, c] = hit[any_hit].argmax(axis=1) / sample_rate
    return max_pga, first
