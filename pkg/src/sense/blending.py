"""Self-attention over the station axis: Transformer and Conformer blocks.

All activations are (B, N, d_model). Blocks use pre-norm residual wiring and
no positional term over stations, so the Transformer stack is equivariant to
station permutations. The Conformer's depthwise convolution runs along the
station axis in station-id order and is therefore order-sensitive.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig
from .numcore import Tensor
from .numcore import functional as F

Params = dict[str, Tensor]


def _ffn_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, hidden), f"{prefix}.b1": (hidden,), f"{prefix}.w2": (hidden, d), f"{prefix}.b2": (d,)}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{p}"] = (d, d)
        shapes[f"{prefix}.b{p}"] = (d,)
    return shapes


def block_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.d_model, cfg.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for b in range(cfg.n_blocks):
        p = f"blend.{b}"
        if cfg.block_kind == "transformer":
            shapes.update(_ln_shapes(f"{p}.ln_attn", d))
            shapes.update(_attn_shapes(f"{p}.attn", d))
            shapes.update(_ln_shapes(f"{p}.ln_ffn", d))
            shapes.update(_ffn_shapes(f"{p}.ffn", d, hid))
        else:
            shapes.update(_ln_shapes(f"{p}.ln_ffn1", d))
            shapes.update(_ffn_shapes(f"{p}.ffn1", d, hid))
            shapes.update(_ln_shapes(f"{p}.ln_attn", d))
            shapes.update(_attn_shapes(f"{p}.attn", d))
            shapes.update(_ln_shapes(f"{p}.ln_conv", d))
            shapes[f"{p}.conv.pw1.w"] = (d, 2 * d)
            shapes[f"{p}.conv.pw1.b"] = (2 * d,)
            shapes[f"{p}.conv.dw.w"] = (d, cfg.conformer_kernel)
            shapes[f"{p}.conv.dw.b"] = (d,)
            shapes.update(_ln_shapes(f"{p}.conv.ln", d))
            shapes[f"{p}.conv.pw2.w"] = (d, d)
            shapes[f"{p}.conv.pw2.b"] = (d,)
            shapes.update(_ln_shapes(f"{p}.ln_ffn2", d))
            shapes.update(_ffn_shapes(f"{p}.ffn2", d, hid))
            shapes.update(_ln_shapes(f"{p}.ln_out", d))
    return shapes


def _ln(params: Params, prefix: str, x) -> Tensor:
    return F.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Softmaxed scaled scores for (…, N, d_head) queries/keys; rows sum to 1."""
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    return F.softmax(scores, axis=-1).data


def mhsa(params: Params, prefix: str, H, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over axis -2 (stations)."""
    H = F.as_tensor(H)
    B, N, d = H.shape
    dh = d // n_heads

    def heads(x):
        return F.transpose(F.reshape(x, (B, N, n_heads, dh)), (0, 2, 1, 3))  # (B, h, N, dh)

    q = heads(F.linear(H, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = heads(F.linear(H, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    v = heads(F.linear(H, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = F.softmax(scores, axis=-1)
    ctx = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (B, N, d))
    return F.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def ffn(params: Params, prefix: str, x, activation=F.relu) -> Tensor:
    h = activation(F.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return F.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def transformer_block(params: Params, prefix: str, H, n_heads: int) -> Tensor:
    H = F.add(H, mhsa(params, f"{prefix}.attn", _ln(params, f"{prefix}.ln_attn", H), n_heads))
    return F.add(H, ffn(params, f"{prefix}.ffn", _ln(params, f"{prefix}.ln_ffn", H)))


def conformer_conv_module(params: Params, prefix: str, x) -> Tensor:
    """Pointwise -> GLU -> depthwise (same padding over stations) -> LN -> swish -> pointwise."""
    h = F.glu(F.linear(x, params[f"{prefix}.pw1.w"], params[f"{prefix}.pw1.b"]), axis=-1)
    h = F.depthwise_conv1d(h, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"])
    h = F.swish(_ln(params, f"{prefix}.ln", h))
    return F.linear(h, params[f"{prefix}.pw2.w"], params[f"{prefix}.pw2.b"])


def conformer_block(params: Params, prefix: str, H, n_heads: int) -> Tensor:
    H = F.as_tensor(H)
    if H.shape[-2] < 1:
        raise ValueError("conformer block needs at least one station")
    H = F.add(H, F.scale(ffn(params, f"{prefix}.ffn1", _ln(params, f"{prefix}.ln_ffn1", H), F.swish), 0.5))
    H = F.add(H, mhsa(params, f"{prefix}.attn", _ln(params, f"{prefix}.ln_attn", H), n_heads))
    H = F.add(H, conformer_conv_module(params, f"{prefix}.conv", _ln(params, f"{prefix}.ln_conv", H)))
    H = F.add(H, F.scale(ffn(params, f"{prefix}.ffn2", _ln(params, f"{prefix}.ln_ffn2", H), F.swish), 0.5))
    return _ln(params, f"{prefix}.ln_out", H)


def feature_blending(params: Params, cfg: ModelConfig, H) -> Tensor:
    """Stack of ``cfg.n_blocks`` blocks of ``cfg.block_kind``; shape-preserving."""
    block = transformer_block if cfg.block_kind == "transformer" else conformer_block
    for b in range(cfg.n_blocks):
        H = block(params, f"blend.{b}", H, cfg.n_heads)
    return H
