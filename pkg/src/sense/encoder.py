"""Per-station encoding: waveform convolutions, geographic encoding, fusion and
early station embeddings."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig, trace_conv_shapes
from .numcore import Tensor
from .numcore import functional as F

Params = dict[str, Tensor]


def conv_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    traced = trace_conv_shapes(cfg.conv_stack, cfg.window_samples)
    channels = 1
    for i, (layer, out_shape) in enumerate(zip(cfg.conv_stack, traced)):
        if layer.kind in ("conv1d", "conv2d"):
            shapes[f"conv.{i}.weight"] = (layer.filters, channels, *layer.kernel)
            shapes[f"conv.{i}.bias"] = (layer.filters,)
        channels = out_shape[-1]
    L, C = traced[-1]
    shapes["conv.proj.weight"] = (L * C, cfg.d_model)
    shapes["conv.proj.bias"] = (cfg.d_model,)
    return shapes


def conv_module_forward(params: Params, cfg: ModelConfig, waveforms) -> Tensor:
    """Map (B, 3, T) waveforms in %g to (B, d_model) feature vectors.

    Every convolution is followed by a ReLU; the flattened output of the
    stack goes through one linear map to ``d_model``.
    """
    x = F.as_tensor(waveforms)
    if x.ndim != 3 or x.shape[1] != 3:
        raise ValueError(f"waveforms must be (batch, 3, T), got {x.shape}")
    if x.shape[2] != cfg.window_samples:
        raise ValueError(f"waveform length {x.shape[2]} != configured window_samples {cfg.window_samples}")
    B, _, T = x.shape
    # pre-flatten activations are (B * comp, L, C); the component axis rides in the batch
    h = F.reshape(F.scale(x, cfg.input_scale), (B * 3, T, 1))
    comp = 3
    for i, layer in enumerate(cfg.conv_stack):
        if layer.kind == "flatten":
            n, L, C = h.shape
            h = F.reshape(F.transpose(F.reshape(h, (B, comp, L, C)), (0, 2, 1, 3)), (B, L, comp * C))
        elif layer.kind == "conv1d":
            h = F.relu(F.conv1d(h, params[f"conv.{i}.weight"], params[f"conv.{i}.bias"], stride=layer.stride[0]))
        elif layer.kind == "conv2d":
            n, L, C = h.shape
            h = F.transpose(F.reshape(h, (B, comp, L, C)), (0, 2, 1, 3))  # (B, L, comp, C)
            h = F.relu(F.conv2d(h, params[f"conv.{i}.weight"], params[f"conv.{i}.bias"], stride=tuple(layer.stride)))
            _, L, comp, C = h.shape
            h = F.reshape(F.transpose(h, (0, 2, 1, 3)), (B * comp, L, C))
        elif layer.kind == "maxpool":
            h = F.max_pool1d(h, layer.kernel[0], layer.stride[0])
    h = F.reshape(h, (B, -1))
    return F.linear(h, params["conv.proj.weight"], params["conv.proj.bias"])


def pe_block_sizes(d_model: int) -> tuple[int, int, int]:
    """(lon, lat, height) widths: equal even blocks, remainder to longitude."""
    base = (d_model // 3) // 2 * 2
    return d_model - 2 * base, base, base


def positional_encoding(coords, cfg: ModelConfig) -> np.ndarray:
    """Sinusoidal (N, d_model) encoding of (lon, lat, height) rows; parameter-free."""
    g = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if not np.isfinite(g).all():
        raise ValueError("station coordinates must be finite")
    sizes = pe_block_sizes(cfg.d_model)
    ranges = (cfg.pe_lonlat_range, cfg.pe_lonlat_range, cfg.pe_height_range)
    blocks = []
    for j, (size, (lo, hi)) in enumerate(zip(sizes, ranges)):
        lam = wavelengths(size // 2, lo, hi)
        phase = g[:, j:j + 1] / lam[None, :]  # (N, pairs)
        block = np.empty((g.shape[0], size))
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
        blocks.append(block)
    return np.concatenate(blocks, axis=1).astype(np.float32)


def wavelengths(n_pairs: int, lo: float, hi: float) -> np.ndarray:
    if n_pairs == 1:
        return np.array([lo])
    return lo * (hi / lo) ** (np.arange(n_pairs) / (n_pairs - 1))


def fusion_alpha(params: Params, station_ids, pinned: float | None = None) -> Tensor:
    """Per-station waveform weight in (0, 1).

    ``pinned`` substitutes a constant (used while the logits are frozen), so
    the logits themselves never enter the tape.
    """
    ids = np.asarray(station_ids)
    logits = params["fusion.logits"]
    if ids.size and (ids.min() < 0 or ids.max() >= logits.shape[0]):
        raise IndexError(f"unknown station id in {ids.tolist()}")
    if pinned is not None:
        return Tensor(np.full(ids.shape, pinned, dtype=logits.dtype))
    return F.sigmoid(F.embedding(logits, ids))


def fuse(W, G, alpha) -> Tensor:
    """alpha * W + (1 - alpha) * G with alpha broadcast over the feature axis."""
    a = F.reshape(F.as_tensor(alpha), F.as_tensor(alpha).shape + (1,))
    return F.add(F.mul(a, W), F.mul(F.sub(1.0, a), G))


def add_locality(H, table: Tensor, station_ids) -> Tensor:
    """H + table[station_ids]; used for both the early and the late embeddings."""
    return F.add(H, F.embedding(table, station_ids))
