"""Late station embeddings, prediction heads, their losses and alarm decoding.

The discrete head emits one independent sigmoid per PGA level ("at least
level c"). The continuous head emits a K-component Gaussian mixture over
log10 PGA[%g]; alarms come from the mixture's upper-tail mass above each
level's threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .config import ModelConfig
from .numcore import Tensor
from .numcore import functional as F

Params = dict[str, Tensor]

BCE_EPS = 1e-7
LABEL_FLOOR_PGA = 1e-3  # %g, the synthetic noise level
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def head_widths(cfg: ModelConfig) -> list[int]:
    if cfg.head_kind == "discrete":
        return [cfg.d_model, *cfg.discrete_hidden, cfg.n_levels]
    return [cfg.d_model, *cfg.continuous_hidden, 3 * cfg.n_mixtures]


def head_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    widths = head_widths(cfg)
    shapes = {}
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        shapes[f"head.{i}.weight"] = (a, b)
        shapes[f"head.{i}.bias"] = (b,)
    return shapes


def ffnn(params: Params, H, n_layers: int) -> Tensor:
    """ReLU MLP; the last layer is linear."""
    x = H
    for i in range(n_layers):
        x = F.linear(x, params[f"head.{i}.weight"], params[f"head.{i}.bias"])
        if i < n_layers - 1:
            x = F.relu(x)
    return x


# -- discrete ----------------------------------------------------------------

def discrete_head(params: Params, cfg: ModelConfig, H3) -> Tensor:
    """(…, N, d_model) -> (…, N, C) level probabilities."""
    return F.sigmoid(ffnn(params, H3, len(head_widths(cfg)) - 1))


def _check_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or np.any(np.diff(t) <= 0):
        raise ValueError(f"thresholds must be strictly ascending, got {list(t)}")
    return t


def discrete_targets(max_pga, thresholds) -> np.ndarray:
    """1 where ``max_pga >= threshold_c`` (inclusive), else 0; shape (…, C)."""
    t = _check_thresholds(thresholds)
    return (np.asarray(max_pga, dtype=np.float64)[..., None] >= t).astype(np.float32)


def level_index(max_pga, thresholds) -> np.ndarray:
    """Index of the highest threshold reached, -1 below all levels."""
    return discrete_targets(max_pga, thresholds).sum(axis=-1).astype(np.int64) - 1


def discrete_loss(probs, targets) -> Tensor:
    """Mean binary cross-entropy over stations and levels (probs clamped to [eps, 1-eps])."""
    probs = F.as_tensor(probs)
    t = np.asarray(targets, dtype=probs.dtype)
    if np.isnan(probs.data).any() or np.isnan(t).any():
        raise ValueError("discrete_loss: NaN input")
    if t.shape != probs.shape:
        raise ValueError(f"discrete_loss: probs {probs.shape} vs targets {t.shape}")
    p = F.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    ll = F.add(F.mul(t, F.log(p)), F.mul(1.0 - t, F.log(F.sub(1.0, p))))
    return F.neg(F.mean(ll))


def repair_monotone(probs) -> np.ndarray:
    """Running minimum over levels, so level c never exceeds level c-1."""
    return np.minimum.accumulate(np.asarray(probs), axis=-1)


def decode_discrete(probs, tau) -> tuple[np.ndarray, np.ndarray]:
    """Alarmed-level mask (…, C) and the reported level (…) with -1 for none."""
    p = repair_monotone(probs)
    alarmed = p > np.asarray(tau)
    reported = np.where(alarmed.any(axis=-1), alarmed.shape[-1] - 1 - np.argmax(alarmed[..., ::-1], axis=-1), -1)
    return alarmed, reported


# -- continuous ----------------------------------------------------------------

@dataclass
class GmmParams:
    """Per-station mixture over log10 PGA; every field is (…, K)."""

    weights: Tensor
    means: Tensor
    stds: Tensor
    log_weights: Tensor | None = None

    @property
    def n_mixtures(self) -> int:
        return self.weights.shape[-1]

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.weights.data, self.means.data, self.stds.data


def mdn_head(params: Params, cfg: ModelConfig, H3) -> GmmParams:
    raw = ffnn(params, H3, len(head_widths(cfg)) - 1)
    return split_mixture(raw, cfg.n_mixtures, cfg.sigma_floor)


def split_mixture(raw, n_mixtures: int, sigma_floor: float = 1e-2) -> GmmParams:
    """Raw (…, 3K) -> softmax weights, identity means, relu + floor stddevs."""
    raw = F.as_tensor(raw)
    K = n_mixtures
    if raw.shape[-1] != 3 * K:
        raise ValueError(f"mixture output has {raw.shape[-1]} values, expected 3K = {3 * K}")
    logits, means, sraw = raw[..., :K], raw[..., K:2 * K], raw[..., 2 * K:]
    return GmmParams(
        weights=F.softmax(logits, axis=-1),
        means=means,
        stds=F.add(F.relu(sraw), sigma_floor),
        log_weights=F.log_softmax(logits, axis=-1),
    )


def continuous_target(max_pga) -> np.ndarray:
    """log10 PGA[%g], floored at the noise level."""
    return np.log10(np.maximum(np.asarray(max_pga, dtype=np.float64), LABEL_FLOOR_PGA))


def mdn_nll(gmm: GmmParams, y) -> Tensor:
    """Mean over stations of -log sum_k a_k N(y | mu_k, sigma_k), in log space."""
    y = np.asarray(y)
    if not np.isfinite(y).all():
        raise ValueError("mdn_nll: non-finite target")
    yt = Tensor(y[..., None].astype(gmm.means.dtype))
    z = F.div(F.sub(yt, gmm.means), gmm.stds)
    log_w = gmm.log_weights if gmm.log_weights is not None else F.log(gmm.weights)
    comp = F.sub(F.sub(log_w, F.scale(F.mul(z, z), 0.5)), F.add(F.log(gmm.stds), LOG_SQRT_2PI))
    return F.neg(F.mean(F.logsumexp(comp, axis=-1)))


def exceedance_prob(weights, means, stds, u) -> np.ndarray:
    """P(Y > u) = sum_k a_k Q((u - mu_k) / sigma_k), Q the standard normal upper tail.

    ``u`` broadcasts against the leading (…) axes of the (…, K) parameters.
    """
    a, m, s = (np.asarray(v, dtype=np.float64) for v in (weights, means, stds))
    u = np.asarray(u, dtype=np.float64)[..., None]
    tail = 0.5 * erfc((u - m) / (s * np.sqrt(2.0)))
    return np.clip((a * tail).sum(axis=-1), 0.0, 1.0)


def level_exceedance(weights, means, stds, thresholds) -> np.ndarray:
    """(…, C) exceedance probabilities at each PGA threshold (given in %g)."""
    u = np.log10(_check_thresholds(thresholds))
    a, m, s = (np.asarray(v, dtype=np.float64)[..., None, :] for v in (weights, means, stds))
    return exceedance_prob(a, m, s, u)


def decide_alarms_cont(weights, means, stds, thresholds, tau) -> np.ndarray:
    """Alarmed-level mask (…, C): exceedance probability above the cutoff."""
    return level_exceedance(weights, means, stds, thresholds) > np.asarray(tau)
