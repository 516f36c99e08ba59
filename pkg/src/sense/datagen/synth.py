"""Synthetic multistation catalogs.

Ground truth comes from a fixed attenuation law

    log10(PGA[%g]) = -1.2 + 0.6 M - 1.6 log10(R_hyp + 10 km) + N(0, 0.1)

and straight-ray arrivals at 6.0 km/s (P) and 3.5 km/s (S). Traces are noise
plus two decaying sinusoids: the P wavelet on the vertical channel at 0.3 x PGA
and the S wavelet on the horizontals with peak PGA. Labels (peak and
first-crossing times) are measured on the rendered trace, so they agree with
the data exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .catalog import TAIWAN_THRESHOLDS, Catalog, EventRecord, StationMeta, scan_labels

ATTEN_A = -1.2
ATTEN_B = 0.6
ATTEN_C = 1.6
ATTEN_D_KM = 10.0
ATTEN_SIGMA_DEX = 0.1

VP_KM_S = 6.0
VS_KM_S = 3.5

NOISE_SIGMA = 1e-3  # %g
P_AMPLITUDE_RATIO = 0.3

KM_PER_DEG = 111.19

_P_FREQ, _P_DECAY = 5.0, 1.5
_S_FREQ, _S_DECAY = 2.0, 3.0
_S2_FREQ = 2.6


@dataclass(frozen=True)
class GeneratorConfig:
    n_stations: int = 16
    n_events: int = 200
    region: tuple[float, float, float, float] = (121.0, 121.6, 23.8, 24.4)  # lon_min, lon_max, lat_min, lat_max
    magnitude_range: tuple[float, float] = (4.0, 7.0)
    depth_range: tuple[float, float] = (5.0, 40.0)
    seed: int = 0
    sample_rate: float = 100.0
    duration: float = 30.0
    thresholds: tuple[float, ...] = TAIWAN_THRESHOLDS
    station_height_range: tuple[float, float] = (0.0, 500.0)
    mean_interevent_s: float = 86400.0

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def validate(self) -> None:
        if self.n_stations < 1:
            raise ValueError("n_stations must be >= 1")
        if self.n_events < 0:
            raise ValueError("n_events must be >= 0")
        lon0, lon1, lat0, lat1 = self.region
        if not (lon0 < lon1 and lat0 < lat1):
            raise ValueError(f"region box is empty: {self.region}")
        if abs(self.duration * self.sample_rate - self.n_samples) > 1e-9:
            raise ValueError("duration * sample_rate must be an integer sample count")
        m0, m1 = self.magnitude_range
        if m0 > m1:
            raise ValueError(f"magnitude range is empty: {self.magnitude_range}")
        d0, d1 = self.depth_range
        if not 0 <= d0 <= d1:
            raise ValueError(f"bad depth range {self.depth_range}")
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ValueError("thresholds must be strictly ascending")
        far = max_hypocentral_km(self.region, d1)
        if far / VS_KM_S >= self.duration:
            raise ValueError(
                f"region too large for a {self.duration} s record: S arrival at {far / VS_KM_S:.1f} s "
                "for the farthest station"
            )


def attenuation_log10_pga(magnitude, r_hyp_km):
    """Median log10 PGA [%g] of the attenuation law (no noise term)."""
    return ATTEN_A + ATTEN_B * np.asarray(magnitude) - ATTEN_C * np.log10(np.asarray(r_hyp_km) + ATTEN_D_KM)


def hypocentral_distance_km(lon, lat, ev_lon, ev_lat, depth_km):
    """Equirectangular epicentral offset combined with depth."""
    lat_mid = np.radians((np.asarray(lat) + ev_lat) / 2.0)
    dx = (np.asarray(lon) - ev_lon) * KM_PER_DEG * np.cos(lat_mid)
    dy = (np.asarray(lat) - ev_lat) * KM_PER_DEG
    return np.sqrt(dx * dx + dy * dy + depth_km * depth_km)


def max_hypocentral_km(region, max_depth_km: float) -> float:
    lon0, lon1, lat0, lat1 = region
    lat_small = min(abs(lat0), abs(lat1)) if lat0 * lat1 > 0 else 0.0
    dx = (lon1 - lon0) * KM_PER_DEG * math.cos(math.radians(lat_small))
    dy = (lat1 - lat0) * KM_PER_DEG
    return math.sqrt(dx * dx + dy * dy + max_depth_km * max_depth_km)


def arrival_times(r_hyp_km) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(r_hyp_km, dtype=np.float64)
    return r / VP_KM_S, r / VS_KM_S


def _wavelet(t: np.ndarray, onset: float, freq: float, decay: float) -> np.ndarray:
    """Unit-peak decaying sinusoid starting at ``onset`` (zero before)."""
    tau = t - onset
    w = np.where(tau >= 0, np.sin(2 * np.pi * freq * np.maximum(tau, 0.0)) * np.exp(-np.maximum(tau, 0.0) / decay), 0.0)
    peak = np.abs(w).max()
    return w / peak if peak > 0 else w


def synth_waveform(
    pga: float,
    p_arrival: float,
    s_arrival: float,
    sample_rate: float,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one station's (3, T) trace in %g for a target peak ``pga``."""
    duration = n_samples / sample_rate
    if not (0 <= p_arrival < duration and 0 <= s_arrival < duration):
        raise ValueError(f"arrivals ({p_arrival:.3f}, {s_arrival:.3f}) s outside the {duration} s record")
    t = np.arange(n_samples) / sample_rate
    trace = rng.normal(0.0, NOISE_SIGMA, size=(3, n_samples))
    signs = rng.choice([-1.0, 1.0], size=3)
    ratio = rng.uniform(0.4, 0.9)
    trace[0] += signs[0] * P_AMPLITUDE_RATIO * pga * _wavelet(t, p_arrival, _P_FREQ, _P_DECAY)
    trace[1] += signs[1] * pga * _wavelet(t, s_arrival, _S_FREQ, _S_DECAY)
    trace[2] += signs[2] * ratio * pga * _wavelet(t, s_arrival, _S2_FREQ, _S_DECAY)
    return trace.astype(np.float32)


def _stations(cfg: GeneratorConfig, rng: np.random.Generator) -> list[StationMeta]:
    lon0, lon1, lat0, lat1 = cfg.region
    lon = rng.uniform(lon0, lon1, cfg.n_stations)
    lat = rng.uniform(lat0, lat1, cfg.n_stations)
    h = rng.uniform(*cfg.station_height_range, cfg.n_stations)
    return [StationMeta(i, float(lon[i]), float(lat[i]), float(h[i])) for i in range(cfg.n_stations)]


def make_event(
    event_id: int,
    origin_time: float,
    hypocenter: tuple[float, float, float],
    magnitude: float,
    stations: list[StationMeta],
    cfg: GeneratorConfig,
    log_noise: np.ndarray | None = None,
) -> EventRecord:
    """Render every station of one event and measure its labels."""
    lon = np.array([s.longitude for s in stations])
    lat = np.array([s.latitude for s in stations])
    r = hypocentral_distance_km(lon, lat, hypocenter[0], hypocenter[1], hypocenter[2])
    tp, ts = arrival_times(r)
    log_pga = attenuation_log10_pga(magnitude, r)
    if log_noise is not None:
        log_pga = log_pga + log_noise
    target = 10.0 ** log_pga
    traces = np.stack([
        synth_waveform(
            float(target[i]), float(tp[i]), float(ts[i]), cfg.sample_rate, cfg.n_samples,
            np.random.default_rng([cfg.seed, event_id, i]),
        )
        for i in range(len(stations))
    ])
    max_pga, first = scan_labels(traces, cfg.thresholds, cfg.sample_rate)
    return EventRecord(event_id, origin_time, hypocenter, magnitude, traces, max_pga, first, tp, ts)


def generate_catalog(cfg: GeneratorConfig) -> Catalog:
    """Deterministic synthetic catalog for ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    stations = _stations(cfg, rng)
    lon0, lon1, lat0, lat1 = cfg.region
    gaps = rng.exponential(cfg.mean_interevent_s, cfg.n_events) + 1.0
    origins = np.cumsum(gaps)
    events = []
    for k in range(cfg.n_events):
        hypo = (
            float(rng.uniform(lon0, lon1)),
            float(rng.uniform(lat0, lat1)),
            float(rng.uniform(*cfg.depth_range)),
        )
        mag = float(rng.uniform(*cfg.magnitude_range))
        noise = rng.normal(0.0, ATTEN_SIGMA_DEX, cfg.n_stations)
        events.append(make_event(k, float(origins[k]), hypo, mag, stations, cfg, noise))
    return Catalog(stations, events, cfg.sample_rate, cfg.n_samples, tuple(cfg.thresholds), {"seed": cfg.seed})
