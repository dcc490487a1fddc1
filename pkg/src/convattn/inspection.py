"""Read-only views of a checkpoint: kernel exports, attention maps, masked-token evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import ConfigError
from .model import Checkpoint, encoder_forward, mlm_logits
from .training import SPECIALS, Vocab, apply_mlm_mask, encode_batch, tokenize


def _fmt(x: float) -> str:
    return repr(float(x))


def kernel_matrix(ckpt: Checkpoint, layer: int, kind: str = "fixed") -> np.ndarray:
    """Rows are heads (``fixed``) or channels (``depthwise``); columns are offsets -k..k."""
    cfg = ckpt.config
    if not 0 <= layer < cfg.layers:
        raise IndexError(f"layer {layer} out of range (model has {cfg.layers})")
    if kind == "fixed":
        if not cfg.attention.use_fixed_lightweight:
            raise ConfigError("model has no fixed lightweight convolution kernel")
        return ckpt.params[f"layer{layer}.attn.fixed_beta"].data.copy()
    if kind == "depthwise":
        if not cfg.attention.use_depthwise_bias:
            raise ConfigError("model has no depthwise value-bias kernel")
        return ckpt.params[f"layer{layer}.attn.depthwise_beta"].data.T.copy()
    raise ValueError(f"unknown kernel kind {kind!r}")


def sort_by_argmax(mat: np.ndarray) -> np.ndarray:
    """Row order grouping kernels by the offset they weight most, strongest first."""
    peak = mat.argmax(axis=1)
    return np.lexsort((-mat.max(axis=1), peak))


def export_kernel_weights(ckpt: Checkpoint, layer: int, out, kind: str = "fixed",
                          rows: slice | None = None, sort_argmax: bool = False) -> np.ndarray:
    """Write kernel weights as CSV; header is ``row`` followed by offsets -k..k."""
    mat = kernel_matrix(ckpt, layer, kind)
    index = np.arange(mat.shape[0])
    if rows is not None:
        index = index[rows]
    sub = mat[index]
    if sort_argmax:
        order = sort_by_argmax(sub)
        index, sub = index[order], sub[order]
    k = ckpt.config.k
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["head" if kind == "fixed" else "channel", *range(-k, k + 1)])
        for r, row in zip(index, sub):
            w.writerow([int(r), *map(_fmt, row)])
    return sub


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Parse an exported CSV into (column labels, row labels, values)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return header, labels, values.reshape(len(labels), len(header))


def _vocab(ckpt: Checkpoint) -> Vocab:
    if not ckpt.vocab:
        raise ValueError("checkpoint carries no vocabulary")
    return Vocab(list(ckpt.vocab))


def attention_map(ckpt: Checkpoint, sentence: str, layer: int, head: int,
                  with_specials: bool = False) -> tuple[list[str], np.ndarray]:
    """Post-softmax attention of one head for one sentence."""
    cfg = ckpt.config
    if not 0 <= layer < cfg.layers:
        raise IndexError(f"layer {layer} out of range (model has {cfg.layers})")
    if not 0 <= head < cfg.heads:
        raise IndexError(f"head {head} out of range (model has {cfg.heads})")
    vocab = _vocab(ckpt)
    words = tokenize(sentence)
    ids = [vocab.lookup(w) for w in words]
    labels = list(words)
    if with_specials:
        ids = [SPECIALS.index("[CLS]"), *ids, SPECIALS.index("[SEP]")]
        labels = ["[CLS]", *labels, "[SEP]"]
    if not ids:
        raise ValueError("sentence contains no tokens")
    tokens = np.array([ids])
    _, probs = encoder_forward(tokens, None, cfg, ckpt.params, return_probs=True)
    return labels, probs[layer].data[0, head].copy()


def export_attention_map(ckpt: Checkpoint, sentence: str, layer: int, head: int, out,
                         with_specials: bool = False) -> np.ndarray:
    labels, mat = attention_map(ckpt, sentence, layer, head, with_specials)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["query\\key", *labels])
        for lab, row in zip(labels, mat):
            w.writerow([lab, *map(_fmt, row)])
    return mat


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    loss: float
    positions: int


def evaluate(ckpt: Checkpoint, lines: Sequence[str], seed: int = 0, mask_prob: float = 0.15,
             batch_size: int = 64, allow_unknown: bool = False) -> EvalResult:
    """Masked-token accuracy and mean loss under a fixed evaluation mask.

    Every selected position is replaced by [MASK] (no random/keep
    corruption), so copying the input never scores.
    """
    cfg = ckpt.config
    vocab = _vocab(ckpt)
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"checkpoint vocabulary ({len(vocab)}) does not match model ({cfg.vocab_size})")
    if not allow_unknown:
        unknown = sorted({t for line in lines for t in tokenize(line) if t not in vocab.stoi})
        if unknown:
            raise ValueError(f"dataset has {len(unknown)} token types outside the checkpoint vocabulary, "
                             f"e.g. {unknown[0]!r}")
    ids, pad = encode_batch(lines, vocab, cfg.max_len)
    rng = np.random.default_rng(seed)
    corrupted, targets, selected = apply_mlm_mask(ids, len(vocab), mask_prob, rng, (1.0, 0.0, 0.0))
    correct, total, loss_sum = 0, 0, 0.0
    for lo in range(0, len(lines), batch_size):
        sl = slice(lo, lo + batch_size)
        sel = selected[sl]
        if not sel.any():
            continue
        hidden = encoder_forward(corrupted[sl], pad[sl], cfg, ckpt.params)
        logits = mlm_logits(hidden, ckpt.params).data[sel]
        tgt = targets[sl][sel]
        correct += int((logits.argmax(axis=-1) == tgt).sum())
        x = logits - logits.max(axis=-1, keepdims=True)
        logp = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
        loss_sum += float(-logp[np.arange(len(tgt)), tgt].sum())
        total += len(tgt)
    if total == 0:
        return EvalResult(0.0, 0.0, 0)
    return EvalResult(correct / total, loss_sum / total, total)
