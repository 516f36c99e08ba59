"""The full station-set model: encoder, blending stack, late embeddings, head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blending, encoder, heads
from .config import ModelConfig
from .numcore import Tensor, no_grad
from .numcore import functional as F

PARAM_GROUPS = ("conv", "fusion", "early_locality", "blend", "late_locality", "head")


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, N = cfg.d_model, cfg.n_stations
    shapes = dict(encoder.conv_param_shapes(cfg))
    shapes["fusion.logits"] = (N,)
    shapes["early_locality.table"] = (N, d)
    shapes.update(blending.block_param_shapes(cfg))
    shapes["late_locality.table"] = (N, d)
    shapes.update(heads.head_param_shapes(cfg))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded float32 initialisation.

    Weights are N(0, gain^2 / fan_in) (gain sqrt(2) ahead of ReLU-family
    activations, 1 otherwise); biases, fusion logits and both station tables
    start at zero; layer-norm gains at one. The mixture head's stddev biases
    start at 1 so initial sigmas sit near one decade.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    n_head_layers = len(heads.head_widths(cfg)) - 1
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.startswith(("fusion.", "early_locality.", "late_locality.")) or leaf in (
            "bias", "b1", "b2", "bq", "bk", "bv", "bo", "b"
        ):
            data = np.zeros(shape)
        elif name.endswith("dw.w"):
            data = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv.") and name != "conv.proj.weight" else shape[0]
            last_head = name == f"head.{n_head_layers - 1}.weight"
            gain = 1.0 if (leaf in ("wq", "wk", "wv", "wo", "w2") or last_head or name == "conv.proj.weight") else np.sqrt(2.0)
            data = rng.normal(0.0, gain / np.sqrt(fan_in), shape)
        if leaf == "bias" and cfg.head_kind == "continuous" and name == f"head.{n_head_layers - 1}.bias":
            data = np.zeros(shape)
            data[2 * cfg.n_mixtures:] = 1.0
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return params


@dataclass
class ModelOutput:
    probs: Tensor | None = None
    gmm: heads.GmmParams | None = None


class SenseModel:
    """Holds a config and its parameters; ``forward`` maps station windows to predictions."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter set does not match config (missing {missing[:5]}, unexpected {extra[:5]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {self.params[name].shape}, config expects {shape}")
        self.alpha_pinned: float | None = None

    def group(self, group: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if param_group(k) == group}

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def encode(self, waveforms, coords, station_ids) -> Tensor:
        """(B, N, 3, T) windows -> H^1 of shape (B, N, d_model)."""
        cfg = self.cfg
        wf = np.asarray(waveforms, dtype=np.float32)
        if wf.ndim == 3:
            wf = wf[None]
        B, N = wf.shape[:2]
        ids = np.asarray(station_ids, dtype=np.int64)
        if ids.shape != (N,):
            raise ValueError(f"{N} waveforms but {ids.shape} station ids")
        W = F.reshape(encoder.conv_module_forward(self.params, cfg, wf.reshape(B * N, 3, -1)), (B, N, cfg.d_model))
        G = Tensor(encoder.positional_encoding(coords, cfg))
        alpha = encoder.fusion_alpha(self.params, ids, self.alpha_pinned)
        H0 = encoder.fuse(W, G, alpha)
        return encoder.add_locality(H0, self.params["early_locality.table"], ids)

    def forward(self, waveforms, coords, station_ids=None) -> ModelOutput:
        cfg = self.cfg
        if station_ids is None:
            station_ids = np.arange(np.asarray(waveforms).shape[-3])
        H1 = self.encode(waveforms, coords, station_ids)
        H2 = blending.feature_blending(self.params, cfg, H1)
        H3 = encoder.add_locality(H2, self.params["late_locality.table"], station_ids)
        if cfg.head_kind == "discrete":
            return ModelOutput(probs=heads.discrete_head(self.params, cfg, H3))
        return ModelOutput(gmm=heads.mdn_head(self.params, cfg, H3))

    def level_probabilities(self, waveforms, coords, station_ids=None, chunk: int = 8) -> np.ndarray:
        """Per-level alarm probabilities (B, N, C) without recording a tape.

        Discrete head: monotone-repaired sigmoid outputs. Continuous head:
        mixture exceedance at each threshold.
        """
        wf = np.asarray(waveforms, dtype=np.float32)
        out = []
        with no_grad():
            for s in range(0, wf.shape[0], chunk):
                o = self.forward(wf[s:s + chunk], coords, station_ids)
                if o.probs is not None:
                    out.append(heads.repair_monotone(o.probs.data.astype(np.float64)))
                else:
                    out.append(heads.level_exceedance(*o.gmm.numpy(), self.cfg.thresholds))
        return np.concatenate(out, axis=0)

    def loss(self, output: ModelOutput, max_pga) -> Tensor:
        """Training loss against per-station peak PGA labels (broadcast over the batch)."""
        if output.probs is not None:
            targets = np.broadcast_to(heads.discrete_targets(max_pga, self.cfg.thresholds), output.probs.shape)
            return heads.discrete_loss(output.probs, targets)
        y = np.broadcast_to(heads.continuous_target(max_pga), output.gmm.means.shape[:-1])
        return heads.mdn_nll(output.gmm, y)
