"""BERT-style encoder with pluggable attention position mechanisms and a tied MLM head."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, ConfigError, attention_param_shapes, multi_head_attention
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    intermediate: int = 128
    heads: int = 2
    embedding: int = 64
    vocab_size: int = 64
    max_len: int = 32
    k: int = 8
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    use_absolute_positions: bool = False
    dropout: float = 0.1
    attention_dropout: float = 0.1
    seed: int = 0

    @property
    def head_size(self) -> int:
        return self.hidden // self.heads

    def validate(self) -> None:
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        for name in ("layers", "k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("hidden", "intermediate", "embedding", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("dropout", "attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")

    def replace(self, **kw) -> "EncoderConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["attention"] = self.attention.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        if "attention" in d and not isinstance(d["attention"], AttentionConfig):
            d["attention"] = AttentionConfig.from_dict(d["attention"])
        return cls(**d)


def bert_small_config(attention: AttentionConfig | None = None) -> EncoderConfig:
    """Full-size BERT-small hyperparameters (hidden 256, 4 heads of 64, 12 layers)."""
    return EncoderConfig(layers=12, hidden=256, intermediate=1024, heads=4, embedding=128,
                         vocab_size=30004, max_len=128, k=8,
                         attention=attention or AttentionConfig(), dropout=0.1,
                         attention_dropout=0.1)


def param_shapes(config: EncoderConfig) -> dict[str, tuple]:
    config.validate()
    d, e = config.hidden, config.embedding
    shapes: dict[str, tuple] = {"embed.tokens": (config.vocab_size, e)}
    if e != d:
        shapes["embed.proj_w"] = (e, d)
        shapes["embed.proj_b"] = (d,)
    if config.use_absolute_positions:
        shapes["embed.positions"] = (config.max_len, d)
    shapes["embed.ln.gain"] = (d,)
    shapes["embed.ln.bias"] = (d,)
    for i in range(config.layers):
        for name, shape in attention_param_shapes(config.attention, d, config.heads, config.k).items():
            shapes[f"layer{i}.attn.{name}"] = shape
        shapes[f"layer{i}.attn_ln.gain"] = (d,)
        shapes[f"layer{i}.attn_ln.bias"] = (d,)
        shapes[f"layer{i}.ffn.w1"] = (d, config.intermediate)
        shapes[f"layer{i}.ffn.b1"] = (config.intermediate,)
        shapes[f"layer{i}.ffn.w2"] = (config.intermediate, d)
        shapes[f"layer{i}.ffn.b2"] = (d,)
        shapes[f"layer{i}.ffn_ln.gain"] = (d,)
        shapes[f"layer{i}.ffn_ln.bias"] = (d,)
    shapes["mlm.dense_w"] = (d, e)
    shapes["mlm.dense_b"] = (e,)
    shapes["mlm.ln.gain"] = (e,)
    shapes["mlm.ln.bias"] = (e,)
    shapes["mlm.out_bias"] = (config.vocab_size,)
    return shapes


_ZERO_INIT = ("fixed_beta", "rel_embed", "key_rel_embed", "depthwise_beta")


def _init_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith(".gain"):
        return np.ones(shape)
    if leaf in _ZERO_INIT or leaf.startswith("b") or leaf.endswith("bias") or leaf.endswith("_b"):
        return np.zeros(shape)
    if leaf == "depthwise":
        # separable Q/K/V kernels start as the identity (one-hot at offset 0)
        kernel = np.zeros(shape)
        kernel[shape[0] // 2] = 1.0
        return kernel
    return rng.normal(0.0, 0.02, size=shape)


def init_params(config: EncoderConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Deterministic initialization: N(0, 0.02^2) weights, zero biases and kernels, unit gains."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return {name: Tensor(_init_value(name, shape, rng), requires_grad=True, name=name)
            for name, shape in param_shapes(config).items()}


def count_params(config: EncoderConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def layer_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {name[len(prefix):]: t for name, t in params.items() if name.startswith(prefix)}


def _check_tokens(tokens: np.ndarray, config: EncoderConfig) -> None:
    if tokens.shape[-1] > config.max_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_len {config.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range for vocabulary of {config.vocab_size}")


def embed(tokens, config: EncoderConfig, params: dict[str, Tensor], rng=None,
          training: bool = False) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64)
    _check_tokens(ids, config)
    h = ad.take_rows(params["embed.tokens"], ids)
    if config.embedding != config.hidden:
        h = ad.add_bias(ad.matmul(h, params["embed.proj_w"]), params["embed.proj_b"])
    if config.use_absolute_positions:
        n = ids.shape[-1]
        pos = ad.take_rows(params["embed.positions"], np.broadcast_to(np.arange(n), ids.shape))
        h = ad.add(h, pos)
    h = ad.layer_norm(h, params["embed.ln.gain"], params["embed.ln.bias"])
    return ad.dropout(h, config.dropout, rng, training)


def encoder_layer(h: Tensor, pad_mask, config: EncoderConfig, params: dict[str, Tensor], i: int,
                  rng=None, training: bool = False, return_probs: bool = False):
    p = f"layer{i}."
    att = multi_head_attention(h, config.attention, layer_params(params, p + "attn."), config.heads,
                               config.k, pad_mask=pad_mask, dropout_p=config.attention_dropout,
                               rng=rng, training=training, return_probs=return_probs)
    probs = None
    if return_probs:
        att, probs = att
    att = ad.dropout(att, config.dropout, rng, training)
    h = ad.layer_norm(ad.add(h, att), params[p + "attn_ln.gain"], params[p + "attn_ln.bias"])
    ff = ad.gelu(ad.add_bias(ad.matmul(h, params[p + "ffn.w1"]), params[p + "ffn.b1"]))
    ff = ad.add_bias(ad.matmul(ff, params[p + "ffn.w2"]), params[p + "ffn.b2"])
    ff = ad.dropout(ff, config.dropout, rng, training)
    h = ad.layer_norm(ad.add(h, ff), params[p + "ffn_ln.gain"], params[p + "ffn_ln.bias"])
    return (h, probs) if return_probs else h


def encoder_forward(tokens, pad_mask, config: EncoderConfig, params: dict[str, Tensor], rng=None,
                    training: bool = False, return_probs: bool = False):
    """Final hidden states ``(…, n, d)``; with ``return_probs`` also per-layer attention maps."""
    h = embed(tokens, config, params, rng, training)
    all_probs = []
    for i in range(config.layers):
        out = encoder_layer(h, pad_mask, config, params, i, rng, training, return_probs)
        if return_probs:
            h, probs = out
            all_probs.append(probs)
        else:
            h = out
    return (h, all_probs) if return_probs else h


def mlm_logits(hidden: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Transform then score against the (tied) token embedding matrix."""
    t = ad.gelu(ad.add_bias(ad.matmul(hidden, params["mlm.dense_w"]), params["mlm.dense_b"]))
    t = ad.layer_norm(t, params["mlm.ln.gain"], params["mlm.ln.bias"])
    return ad.add_bias(ad.matmul(t, ad.transpose(params["embed.tokens"])), params["mlm.out_bias"])


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CONVATTN"
VERSION = 1


def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def _read_blob(fh) -> bytes:
    (size,) = struct.unpack("<Q", fh.read(8))
    data = fh.read(size)
    if len(data) != size:
        raise ValueError("truncated checkpoint")
    return data


def _write_tensors(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        _write_blob(fh, name.encode("utf-8"))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        name = _read_blob(fh).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        nbytes = 8 * int(np.prod(shape))
        raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise ValueError(f"truncated tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return out


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, Tensor]
    vocab: list[str] = field(default_factory=list)
    train_state: dict = field(default_factory=dict)
    moments: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: magic, version, JSON header (config, vocab, train state), params, optimizer moments."""
    header = {"config": ckpt.config.to_dict(), "vocab": list(ckpt.vocab),
              "train_state": ckpt.train_state}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_blob(fh, json.dumps(header, sort_keys=True).encode("utf-8"))
        _write_tensors(fh, {name: t.data for name, t in ckpt.params.items()})
        _write_tensors(fh, ckpt.moments)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read_blob(fh).decode("utf-8"))
        params = _read_tensors(fh)
        moments = _read_tensors(fh)
    config = EncoderConfig.from_dict(header["config"])
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise ValueError(f"{path}: parameters do not match the stored config")
    return Checkpoint(config=config,
                      params={n: Tensor(params[n], requires_grad=True, name=n) for n in expected},
                      vocab=header.get("vocab", []), train_state=header.get("train_state", {}),
                      moments=moments)
