"""Attention score variants, convolutions over sequences, and the multi-head layer.

Shapes follow the row convention: a sequence is ``(..., n, d)`` with tokens
on the second-to-last axis.  Kernel tables are indexed by offset column
``j - i + k`` in ``[0, 2k]``.

Score biases clamp offsets outside the window to the boundary column;
the standalone convolutions zero-pad instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ConfigError(ValueError):
    """Inconsistent attention configuration or parameters."""


def relative_offset_index(n: int, k: int) -> np.ndarray:
    """Column index ``clamp(j - i, -k, k) + k`` for every query/key pair."""
    if n < 1 or k < 0:
        raise ValueError(f"relative_offset_index: need n >= 1 and k >= 0, got n={n}, k={k}")
    pos = np.arange(n)
    return np.clip(pos[None, :] - pos[:, None], -k, k) + k


def _kernel_half_width(width: int) -> int:
    if width % 2 != 1:
        raise ShapeError(f"kernel width must be odd (2k+1), got {width}")
    return (width - 1) // 2


# ---------------------------------------------------------------- convolutions

def depthwise_conv(x: Tensor, beta: Tensor) -> Tensor:
    """Per-channel convolution along the sequence with zero padding.

    ``x`` is ``(..., n, d)``, ``beta`` is ``(2k+1, d)``; row ``o`` of
    ``beta`` weights the token at offset ``o - k``.
    """
    if beta.ndim != 2 or x.ndim < 2 or beta.shape[1] != x.shape[-1]:
        raise ShapeError(f"depthwise_conv: input {x.shape} with kernel {beta.shape}")
    k = _kernel_half_width(beta.shape[0])
    X, W = x.data, beta.data
    n = X.shape[-2]
    out = np.zeros_like(X)
    for o in range(2 * k + 1):
        s = o - k
        lo, hi = max(0, -s), min(n, n - s)
        if lo < hi:
            out[..., lo:hi, :] += W[o] * X[..., lo + s:hi + s, :]

    def bw(g):
        gx = np.zeros_like(X)
        gw = np.zeros_like(W)
        for o in range(2 * k + 1):
            s = o - k
            lo, hi = max(0, -s), min(n, n - s)
            if lo < hi:
                gx[..., lo + s:hi + s, :] += W[o] * g[..., lo:hi, :]
                gw[o] = (g[..., lo:hi, :] * X[..., lo + s:hi + s, :]).reshape(-1, W.shape[1]).sum(axis=0)
        return gx, gw

    return ad.record(out, (x, beta), bw)


def lightweight_conv(x: Tensor, beta: Tensor) -> Tensor:
    """Convolution with one weight per offset, tied across channels.

    Accumulates in the same order as :func:`depthwise_conv`, so a
    channel-tied depthwise kernel gives bit-identical output.
    """
    if beta.ndim != 1 or x.ndim < 2:
        raise ShapeError(f"lightweight_conv: input {x.shape} with kernel {beta.shape}")
    k = _kernel_half_width(beta.shape[0])
    X, W = x.data, beta.data
    n = X.shape[-2]
    out = np.zeros_like(X)
    for o in range(2 * k + 1):
        s = o - k
        lo, hi = max(0, -s), min(n, n - s)
        if lo < hi:
            out[..., lo:hi, :] += W[o] * X[..., lo + s:hi + s, :]

    def bw(g):
        gx = np.zeros_like(X)
        gw = np.zeros_like(W)
        for o in range(2 * k + 1):
            s = o - k
            lo, hi = max(0, -s), min(n, n - s)
            if lo < hi:
                gx[..., lo + s:hi + s, :] += W[o] * g[..., lo:hi, :]
                gw[o] = (g[..., lo:hi, :] * X[..., lo + s:hi + s, :]).sum()
        return gx, gw

    return ad.record(out, (x, beta), bw)


def separable_conv_projection(x: Tensor, depthwise_w: Tensor, pointwise_w: Tensor,
                              pointwise_b: Tensor | None = None) -> Tensor:
    """Depthwise convolution over the sequence, then a per-position linear map."""
    if pointwise_w.ndim != 2 or pointwise_w.shape[0] != x.shape[-1]:
        raise ShapeError(f"separable_conv_projection: input {x.shape} with pointwise {pointwise_w.shape}")
    out = ad.matmul(depthwise_conv(x, depthwise_w), pointwise_w)
    if pointwise_b is not None:
        out = ad.add_bias(out, pointwise_b)
    return out


# ---------------------------------------------------------------- score variants

def _check_qk(q: Tensor, k: Tensor) -> None:
    if q.ndim < 2 or q.shape != k.shape:
        raise ShapeError(f"attention scores: query {q.shape} and key {k.shape} differ")


def attention_scores_standard(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot products ``q_i . k_j / sqrt(d_h)``."""
    _check_qk(q, k)
    return ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))


def _check_offsets(offsets: np.ndarray, n: int, width: int) -> None:
    if offsets.shape != (n, n):
        raise ShapeError(f"offset index {offsets.shape} does not match sequence length {n}")
    if offsets.size and (offsets.min() < 0 or offsets.max() >= width):
        raise ShapeError(f"offset index exceeds kernel width {width}")


def fixed_position_bias(fixed_beta: Tensor, offsets: np.ndarray) -> Tensor:
    """Look up ``beta[..., idx(i, j)]``; works for one kernel or one per head."""
    _check_offsets(offsets, offsets.shape[0], fixed_beta.shape[-1])
    return ad.index_last(fixed_beta, offsets)


def dynamic_position_term(q: Tensor, rel_embed: Tensor, offsets: np.ndarray) -> Tensor:
    """``q_i . W^C[:, idx(i, j)] / sqrt(d_h)``, the query-generated kernel."""
    if rel_embed.ndim != 2 or rel_embed.shape[0] != q.shape[-1]:
        raise ShapeError(f"relative embeddings {rel_embed.shape} do not match query {q.shape}")
    _check_offsets(offsets, q.shape[-2], rel_embed.shape[1])
    per_offset = ad.matmul(q, rel_embed)  # (..., n, 2k+1): one kernel per query token
    return ad.scale(ad.take_along_last(per_offset, offsets), 1.0 / math.sqrt(q.shape[-1]))


def key_position_term(k: Tensor, key_rel_embed: Tensor, offsets: np.ndarray) -> Tensor:
    """``k_j . W^C'[:, idx(i, j)] / sqrt(d_h)``: kernels generated per key (columns)."""
    if key_rel_embed.ndim != 2 or key_rel_embed.shape[0] != k.shape[-1]:
        raise ShapeError(f"key relative embeddings {key_rel_embed.shape} do not match key {k.shape}")
    _check_offsets(offsets, k.shape[-2], key_rel_embed.shape[1])
    per_offset = ad.matmul(k, key_rel_embed)
    cols = ad.take_along_last(per_offset, offsets.T)  # [.., j, i]
    return ad.scale(ad.transpose(cols), 1.0 / math.sqrt(k.shape[-1]))


def _match_leading(bias: Tensor, scores: Tensor) -> Tensor:
    while bias.ndim < scores.ndim:
        bias = ad.repeat_leading(bias, scores.shape[scores.ndim - bias.ndim - 1])
    if bias.shape != scores.shape:
        raise ShapeError(f"position bias {bias.shape} does not fit scores {scores.shape}")
    return bias


def scores_fixed_lightweight(q: Tensor, k: Tensor, fixed_beta: Tensor, offsets: np.ndarray) -> Tensor:
    """Dot-product scores plus an unscaled per-offset bias."""
    scores = attention_scores_standard(q, k)
    return ad.add(scores, _match_leading(fixed_position_bias(fixed_beta, offsets), scores))


def scores_dynamic_lightweight(q: Tensor, k: Tensor, rel_embed: Tensor, offsets: np.ndarray) -> Tensor:
    """Query-dynamic lightweight convolution (relative key embeddings), expanded form."""
    return ad.add(attention_scores_standard(q, k), dynamic_position_term(q, rel_embed, offsets))


def scores_dynamic_combined(q: np.ndarray, k: np.ndarray, rel_embed: np.ndarray,
                            offsets: np.ndarray) -> np.ndarray:
    """Reference: ``q_i . (k_j + W^C[:, idx(i, j)]) / sqrt(d_h)`` built pairwise.

    Plain numpy, no tape.  Materializes the shifted key for every pair, so
    it shares no code path with :func:`scores_dynamic_lightweight`.
    """
    q, k, w = np.asarray(q, float), np.asarray(k, float), np.asarray(rel_embed, float)
    n, dh = q.shape
    shifted = k[None, :, :] + w.T[offsets]  # (n, n, d_h)
    return np.einsum("id,ijd->ij", q, shifted) / math.sqrt(dh)


def scores_composite(q: Tensor, k: Tensor, rel_embed: Tensor, fixed_beta: Tensor,
                     offsets: np.ndarray) -> Tensor:
    """Dot product + query-dynamic term (both scaled) + fixed bias (unscaled)."""
    scores = ad.add(attention_scores_standard(q, k), dynamic_position_term(q, rel_embed, offsets))
    return ad.add(scores, _match_leading(fixed_position_bias(fixed_beta, offsets), scores))


def scores_key_dynamic(q: Tensor, k: Tensor, key_rel_embed: Tensor, offsets: np.ndarray) -> Tensor:
    return ad.add(attention_scores_standard(q, k), key_position_term(k, key_rel_embed, offsets))


def depthwise_value_bias(att_probs: Tensor, v_full: Tensor, depthwise_beta: Tensor) -> Tensor:
    """Attention-weighted values plus a per-channel convolution of the values.

    The softmax has already been applied to ``att_probs``; the convolution
    is added to the output rather than to per-channel logits.
    """
    if att_probs.shape[-1] != v_full.shape[-2]:
        raise ShapeError(f"depthwise_value_bias: probs {att_probs.shape} with values {v_full.shape}")
    return ad.add(ad.matmul(att_probs, v_full), depthwise_conv(v_full, depthwise_beta))


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ConvQKV:
    query: bool = False
    key: bool = False
    value: bool = False

    def any(self) -> bool:
        return self.query or self.key or self.value


@dataclass(frozen=True)
class AttentionConfig:
    use_fixed_lightweight: bool = False
    use_query_dynamic: bool = False
    use_key_dynamic: bool = False
    use_depthwise_bias: bool = False
    conv_qkv: ConvQKV = field(default_factory=ConvQKV)
    conv_qkv_k: int = 8  # half-width of the separable Q/K/V kernels

    @property
    def composite(self) -> bool:
        return self.use_fixed_lightweight and self.use_query_dynamic

    @property
    def has_position_mechanism(self) -> bool:
        return (self.use_fixed_lightweight or self.use_query_dynamic or self.use_key_dynamic
                or self.use_depthwise_bias or self.conv_qkv.any())

    def to_dict(self) -> dict:
        return {
            "use_fixed_lightweight": self.use_fixed_lightweight,
            "use_query_dynamic": self.use_query_dynamic,
            "use_key_dynamic": self.use_key_dynamic,
            "use_depthwise_bias": self.use_depthwise_bias,
            "conv_qkv": {"query": self.conv_qkv.query, "key": self.conv_qkv.key,
                         "value": self.conv_qkv.value},
            "conv_qkv_k": self.conv_qkv_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionConfig":
        d = dict(d)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown attention keys: {sorted(unknown)}")
        qkv = d.pop("conv_qkv", {}) or {}
        if isinstance(qkv, dict):
            bad = set(qkv) - {"query", "key", "value"}
            if bad:
                raise ConfigError(f"unknown conv_qkv keys: {sorted(bad)}")
            qkv = ConvQKV(**qkv)
        return cls(conv_qkv=qkv, **d)


VARIANTS: dict[str, AttentionConfig] = {
    "none": AttentionConfig(),
    "fixed": AttentionConfig(use_fixed_lightweight=True),
    "dynamic": AttentionConfig(use_query_dynamic=True),
    "composite": AttentionConfig(use_fixed_lightweight=True, use_query_dynamic=True),
    "composite-key": AttentionConfig(use_fixed_lightweight=True, use_query_dynamic=True,
                                     use_key_dynamic=True),
    "depthwise": AttentionConfig(use_depthwise_bias=True),
    "composite-depthwise": AttentionConfig(use_fixed_lightweight=True, use_query_dynamic=True,
                                           use_depthwise_bias=True),
    "conv-qkv": AttentionConfig(conv_qkv=ConvQKV(True, True, True)),
    "composite-conv-qkv": AttentionConfig(use_fixed_lightweight=True, use_query_dynamic=True,
                                          conv_qkv=ConvQKV(True, True, True)),
}


@dataclass
class ConvParams:
    """Learned convolution parameters for one layer (``None`` when unused)."""
    k: int
    fixed_beta: Tensor | None = None      # (h, 2k+1)
    rel_embed: Tensor | None = None       # (d_h, 2k+1), shared by all heads
    key_rel_embed: Tensor | None = None   # (d_h, 2k+1)
    depthwise_beta: Tensor | None = None  # (2k+1, d)


def conv_heads(h: int) -> int:
    """Heads whose projections become separable convolutions: the first ceil(h/2)."""
    return (h + 1) // 2


def attention_param_shapes(cfg: AttentionConfig, d: int, h: int, k: int) -> dict[str, tuple]:
    """Parameter names and shapes for one attention layer."""
    if h < 1 or d % h:
        raise ConfigError(f"hidden size {d} is not divisible by {h} heads")
    dh = d // h
    width = 2 * k + 1
    hc = conv_heads(h) if cfg.conv_qkv.any() else 0
    pk = 2 * cfg.conv_qkv_k + 1
    shapes: dict[str, tuple] = {}
    for p in "qkv":
        conv = getattr(cfg.conv_qkv, {"q": "query", "k": "key", "v": "value"}[p])
        lin_heads = h - hc if conv else h
        if lin_heads:
            shapes[f"w{p}"] = (d, lin_heads * dh)
            shapes[f"b{p}"] = (lin_heads * dh,)
        if conv:
            for c in range(hc):
                shapes[f"{p}conv{c}.depthwise"] = (pk, d)
                shapes[f"{p}conv{c}.pointwise"] = (d, dh)
                shapes[f"{p}conv{c}.bias"] = (dh,)
    shapes["wo"] = (d, d)
    shapes["bo"] = (d,)
    if cfg.use_fixed_lightweight:
        shapes["fixed_beta"] = (h, width)
    if cfg.use_query_dynamic:
        shapes["rel_embed"] = (dh, width)
    if cfg.use_key_dynamic:
        shapes["key_rel_embed"] = (dh, width)
    if cfg.use_depthwise_bias:
        shapes["depthwise_beta"] = (width, d)
    return shapes


def conv_params_from(params: dict[str, Tensor], k: int) -> ConvParams:
    return ConvParams(k=k, fixed_beta=params.get("fixed_beta"), rel_embed=params.get("rel_embed"),
                      key_rel_embed=params.get("key_rel_embed"),
                      depthwise_beta=params.get("depthwise_beta"))


def check_attention_params(cfg: AttentionConfig, params: dict[str, Tensor], d: int, h: int, k: int) -> None:
    expected = attention_param_shapes(cfg, d, h, k)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ConfigError(f"attention parameters do not match config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------- multi-head layer

def _split_heads(t: Tensor, h: int) -> Tensor:
    *lead, n, width = t.shape
    return ad.permute(ad.reshape(t, (*lead, n, h, width // h)), (*range(len(lead)), len(lead) + 1,
                                                                 len(lead), len(lead) + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, dh = t.shape
    nl = len(lead)
    return ad.reshape(ad.permute(t, (*range(nl), nl + 1, nl, nl + 2)), (*lead, n, h * dh))


def _project(x: Tensor, x_conv: Tensor, params: dict[str, Tensor], p: str, conv: bool,
             hc: int) -> Tensor:
    pieces = []
    if conv:
        for c in range(hc):
            pieces.append(separable_conv_projection(x_conv, params[f"{p}conv{c}.depthwise"],
                                                    params[f"{p}conv{c}.pointwise"],
                                                    params[f"{p}conv{c}.bias"]))
    if f"w{p}" in params:
        pieces.append(ad.add_bias(ad.matmul(x, params[f"w{p}"]), params[f"b{p}"]))
    return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=-1)


def multi_head_attention(x: Tensor, config: AttentionConfig, params: dict[str, Tensor], h: int, k: int,
                         pad_mask=None, dropout_p: float = 0.0, rng=None, training: bool = False,
                         return_probs: bool = False):
    """Multi-head self-attention with the configured position mechanisms.

    ``x`` is ``(n, d)`` or ``(batch, n, d)``; ``pad_mask`` is boolean with
    True at real tokens.  Returns the ``(…, n, d)`` output, plus the
    post-softmax probabilities ``(…, h, n, n)`` when ``return_probs``.
    """
    d = x.shape[-1]
    n = x.shape[-2]
    check_attention_params(config, params, d, h, k)
    dh = d // h
    lead = x.shape[:-2]
    if pad_mask is None:
        mask = np.ones(lead + (n,), dtype=bool)
    else:
        mask = np.asarray(pad_mask, dtype=bool)
        if mask.shape != lead + (n,):
            raise ShapeError(f"pad mask {mask.shape} does not match input {x.shape}")
    hc = conv_heads(h) if config.conv_qkv.any() else 0
    x_conv = x
    if hc and not mask.all():
        x_conv = ad.mul(x, Tensor(np.broadcast_to(mask[..., None], x.shape)))

    q_full = _project(x, x_conv, params, "q", config.conv_qkv.query, hc)
    k_full = _project(x, x_conv, params, "k", config.conv_qkv.key, hc)
    v_full = _project(x, x_conv, params, "v", config.conv_qkv.value, hc)
    q, kk, v = _split_heads(q_full, h), _split_heads(k_full, h), _split_heads(v_full, h)

    offsets = relative_offset_index(n, k)
    if config.use_query_dynamic:
        scores = scores_dynamic_lightweight(q, kk, params["rel_embed"], offsets)
    else:
        scores = attention_scores_standard(q, kk)
    if config.use_key_dynamic:
        scores = ad.add(scores, key_position_term(kk, params["key_rel_embed"], offsets))
    if config.use_fixed_lightweight:
        scores = ad.add(scores, _match_leading(fixed_position_bias(params["fixed_beta"], offsets), scores))

    key_mask = np.broadcast_to(mask[..., None, None, :], scores.shape)
    probs = ad.softmax_lastdim(scores, key_mask)
    attn = ad.dropout(probs, dropout_p, rng, training)
    out = _merge_heads(ad.matmul(attn, v))
    if config.use_depthwise_bias:
        v_src = v_full if mask.all() else ad.mul(v_full, Tensor(np.broadcast_to(mask[..., None], v_full.shape)))
        out = ad.add(out, depthwise_conv(v_src, params["depthwise_beta"]))
    out = ad.add_bias(ad.matmul(out, params["wo"]), params["bo"])
    if return_probs:
        return out, probs
    return out
