"""On-disk dataset format.

    <root>/manifest.json      format_version, sample_rate, T, thresholds, stations
    <root>/events/<id>.json   origin_time, hypocenter, magnitude, per-station labels
    <root>/events/<id>.f32    little-endian float32, N x 3 x T (station, component, time)
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .catalog import Catalog, EventRecord, StationMeta

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Base class for unreadable datasets."""


class FormatVersionError(DatasetError):
    pass


class TruncatedTraceError(DatasetError):
    pass


class StationCountError(DatasetError):
    pass


def _none_if_nan(x: float):
    return None if np.isnan(x) else float(x)


def _nan_if_none(x) -> float:
    return np.nan if x is None else float(x)


def event_to_json(ev: EventRecord) -> dict:
    return {
        "event_id": int(ev.event_id),
        "origin_time": float(ev.origin_time),
        "hypocenter": {
            "longitude": float(ev.hypocenter[0]),
            "latitude": float(ev.hypocenter[1]),
            "depth_km": float(ev.hypocenter[2]),
        },
        "magnitude": float(ev.magnitude),
        "max_pga": [float(v) for v in ev.max_pga],
        "first_exceed_time": [[_none_if_nan(v) for v in row] for row in ev.first_exceed],
        "p_arrival": [float(v) for v in ev.p_arrival],
        "s_arrival": [float(v) for v in ev.s_arrival],
    }


def write_dataset(catalog: Catalog, path) -> None:
    root = Path(path)
    (root / "events").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "sample_rate": float(catalog.sample_rate),
        "T": int(catalog.n_samples),
        "thresholds": [float(t) for t in catalog.thresholds],
        "stations": [
            {"id": s.station_id, "longitude": s.longitude, "latitude": s.latitude, "height": s.height}
            for s in catalog.stations
        ],
    }
    if catalog.meta:
        manifest["meta"] = catalog.meta
    _write_json(root / "manifest.json", manifest)
    for ev in catalog.events:
        stem = f"{ev.event_id:06d}"
        _write_json(root / "events" / f"{stem}.json", event_to_json(ev))
        ev.traces.astype("<f4").tofile(root / "events" / f"{stem}.f32")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_dataset(path) -> Catalog:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{manifest_path}: format_version {version!r}, this reader supports {FORMAT_VERSION}")
    sr = float(manifest["sample_rate"])
    if "T" not in manifest and "n_samples" not in manifest:
        raise DatasetError(f"{manifest_path}: missing trace length 'T'")
    T = int(manifest["T"] if "T" in manifest else manifest["n_samples"])
    thresholds = tuple(float(t) for t in manifest["thresholds"])
    stations = [
        StationMeta(int(s["id"]), float(s["longitude"]), float(s["latitude"]), float(s["height"]))
        for s in manifest["stations"]
    ]
    N = len(stations)
    events = []
    for meta_path in sorted((root / "events").glob("*.json")):
        events.append(_read_event(meta_path, N, T, len(thresholds)))
    events.sort(key=lambda e: e.origin_time)
    return Catalog(stations, events, sr, T, thresholds, manifest.get("meta", {}))


def _read_event(meta_path: Path, N: int, T: int, C: int) -> EventRecord:
    m = json.loads(meta_path.read_text())
    eid = m["event_id"]
    for key in ("max_pga", "first_exceed_time"):
        if len(m[key]) != N:
            raise StationCountError(f"event {eid}: '{key}' has {len(m[key])} stations, manifest has {N}")
    for key in ("p_arrival", "s_arrival"):
        if key in m and len(m[key]) != N:
            raise StationCountError(f"event {eid}: '{key}' has {len(m[key])} stations, manifest has {N}")
    if any(len(row) != C for row in m["first_exceed_time"]):
        raise DatasetError(f"event {eid}: first_exceed_time rows must have {C} levels")
    trace_path = meta_path.with_suffix(".f32")
    if not trace_path.exists():
        raise TruncatedTraceError(f"event {eid}: trace file {trace_path.name} is missing")
    expected = N * 3 * T * 4
    actual = trace_path.stat().st_size
    if actual != expected:
        raise TruncatedTraceError(
            f"event {eid}: trace file {trace_path.name} has {actual} bytes, expected {expected} (N={N}, T={T})"
        )
    traces = np.fromfile(trace_path, dtype="<f4").reshape(N, 3, T).astype(np.float32)
    h = m["hypocenter"]
    if isinstance(h, (list, tuple)):
        h = dict(zip(("longitude", "latitude", "depth_km"), h))
    nan = [np.nan] * N
    return EventRecord(
        event_id=int(eid),
        origin_time=float(m["origin_time"]),
        hypocenter=(float(h["longitude"]), float(h["latitude"]), float(h["depth_km"])),
        magnitude=float(m["magnitude"]),
        traces=traces,
        max_pga=np.array(m["max_pga"], dtype=np.float64),
        first_exceed=np.array([[_nan_if_none(v) for v in row] for row in m["first_exceed_time"]], dtype=np.float64).reshape(N, C),
        p_arrival=np.array(m.get("p_arrival", nan), dtype=np.float64),
        s_arrival=np.array(m.get("s_arrival", nan), dtype=np.float64),
    )
