"""Synthetic catalogs, dataset I/O, splitting and windowing."""

from .catalog import (
    COMPONENTS,
    JAPAN_THRESHOLDS,
    TAIWAN_THRESHOLDS,
    Catalog,
    EventRecord,
    StationMeta,
    scan_labels,
)
from .io import (
    FORMAT_VERSION,
    DatasetError,
    FormatVersionError,
    StationCountError,
    TruncatedTraceError,
    read_dataset,
    write_dataset,
)
from .synth import (
    GeneratorConfig,
    arrival_times,
    attenuation_log10_pga,
    generate_catalog,
    hypocentral_distance_km,
    make_event,
    synth_waveform,
)
from .windows import StationBatch, available_samples, split_catalog, split_sizes, window_at, window_traces

__all__ = [
    "COMPONENTS",
    "FORMAT_VERSION",
    "JAPAN_THRESHOLDS",
    "TAIWAN_THRESHOLDS",
    "Catalog",
    "DatasetError",
    "EventRecord",
    "FormatVersionError",
    "GeneratorConfig",
    "StationBatch",
    "StationCountError",
    "StationMeta",
    "TruncatedTraceError",
    "arrival_times",
    "attenuation_log10_pga",
    "available_samples",
    "generate_catalog",
    "hypocentral_distance_km",
    "make_event",
    "read_dataset",
    "scan_labels",
    "split_catalog",
    "split_sizes",
    "synth_waveform",
    "window_at",
    "window_traces",
    "write_dataset",
]
