"""Tokenization, MLM masking, AdamW, the warmup/decay schedule and the training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import ConfigError
from .autodiff import Tensor
from .model import (Checkpoint, EncoderConfig, encoder_forward, init_params, mlm_logits,
                    save_checkpoint)

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


# ---------------------------------------------------------------- vocabulary

@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.itos[:len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def build_vocab(lines: Iterable[str], max_size: int) -> Vocab:
    """Lowercased whitespace tokens, most frequent first, ties broken lexicographically."""
    counts = Counter(tok for line in lines for tok in tokenize(line))
    if not counts:
        raise ValueError("build_vocab: corpus contains no tokens")
    room = max(max_size - len(SPECIALS), 0)
    ranked = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocab(SPECIALS + ranked[:room])


def encode_batch(lines: Sequence[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS] tokens [SEP]`` truncated to ``max_len`` and PAD-filled.

    Returns ``(ids, pad_mask)`` with ``pad_mask`` True at real tokens.
    """
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    ids = np.full((len(lines), max_len), PAD, dtype=np.int64)
    for r, line in enumerate(lines):
        toks = [vocab.lookup(t) for t in tokenize(line)][:max_len - 2]
        row = [CLS, *toks, SEP]
        ids[r, :len(row)] = row
    return ids, ids != PAD


def trim_batch(ids: np.ndarray, pad_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing columns that are padding in every row."""
    width = max(int(pad_mask.sum(axis=-1).max()), 1) if pad_mask.size else 1
    return ids[..., :width], pad_mask[..., :width]


def apply_mlm_mask(ids: np.ndarray, vocab_size: int, p: float = 0.15,
                   rng: np.random.Generator | int = 0, replace_probs=(0.8, 0.1, 0.1)):
    """BERT-style corruption of non-special tokens.

    Each eligible token is selected with probability ``p``; selected tokens
    become [MASK], a random non-special id, or stay unchanged according to
    ``replace_probs``.  Returns ``(corrupted, targets, selected)`` where
    ``targets`` holds the original id at selected positions and -1 elsewhere.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ids = np.asarray(ids, dtype=np.int64)
    eligible = ids >= len(SPECIALS)
    selected = eligible & (rng.random(ids.shape) < p)
    choice = rng.random(ids.shape)
    random_ids = rng.integers(len(SPECIALS), max(vocab_size, len(SPECIALS) + 1), size=ids.shape)
    to_mask = selected & (choice < replace_probs[0])
    to_random = selected & (choice >= replace_probs[0]) & (choice < replace_probs[0] + replace_probs[1])
    corrupted = ids.copy()
    corrupted[to_mask] = MASK
    corrupted[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, -1)
    return corrupted, targets, selected


# ---------------------------------------------------------------- optimization

def lr_schedule(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if warmup > total:
        raise ConfigError(f"warmup ({warmup}) exceeds total steps ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    return peak * (total - step) / (total - warmup)


def no_decay(name: str) -> bool:
    """Layer-norm parameters and bias vectors are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return (".ln." in name or "_ln." in name or leaf in ("gain", "bias", "out_bias")
            or leaf.endswith("_b") or (leaf.startswith("b") and leaf[1:] in ("q", "k", "v", "o", "1", "2")))


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    warmup: int = 0
    total: int = 0
    peak_lr: float = 0.0

    def to_header(self) -> dict:
        return {"step": self.step, "seed": self.seed, "warmup": self.warmup, "total": self.total,
                "peak_lr": self.peak_lr}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: TrainState, lr: float,
              cfg: AdamConfig = AdamConfig()) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros(p.shape), np.zeros(p.shape)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new = p.data - lr * update
        if cfg.weight_decay and not no_decay(name):
            new = new - lr * cfg.weight_decay * p.data
        p.data = new


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class TrainConfig:
    corpus: str = ""
    steps: int = 1000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    mask_prob: float = 0.15
    vocab_max_size: int = 30004
    log_every: int = 10
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps > self.steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) exceeds steps ({self.steps})")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": dataclasses.asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown run-config sections: {sorted(unknown)}")
        train = dict(d.get("train", {}))
        bad = set(train) - {f.name for f in dataclasses.fields(TrainConfig)}
        if bad:
            raise ConfigError(f"unknown train keys: {sorted(bad)}")
        return cls(model=EncoderConfig.from_dict(d.get("model", {})), train=TrainConfig(**train))


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def save_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- loop

def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    lines = [line for line in lines if line.strip()]
    if not lines:
        raise ValueError(f"{path}: corpus is empty")
    return lines


def mlm_loss(ids, pad_mask, targets, config: EncoderConfig, params, rng=None, training=False) -> Tensor:
    """Cross-entropy over the selected (target >= 0) positions only."""
    hidden = encoder_forward(ids, pad_mask, config, params, rng=rng, training=training)
    tgt = np.asarray(targets).reshape(-1)
    rows = np.flatnonzero(tgt >= 0)
    if rows.size == 0:
        # keep the graph connected so every parameter gets an explicit zero gradient
        logits = mlm_logits(ad.reshape(hidden, (-1, config.hidden)), params)
        return ad.cross_entropy(logits, tgt, weights=np.zeros(tgt.shape))
    picked = ad.take_rows(ad.reshape(hidden, (-1, config.hidden)), rows)
    return ad.cross_entropy(mlm_logits(picked, params), tgt[rows])


def train_step(params, ids, pad_mask, targets, config: EncoderConfig, state: TrainState, lr: float,
               adam: AdamConfig, rng=None) -> float:
    with ad.Tape() as tape:
        loss = mlm_loss(ids, pad_mask, targets, config, params, rng=rng,
                        training=rng is not None)
    grads = ad.backward(tape, loss, leaves=params.values())
    adam_step(params, {n: grads[id(p)] for n, p in params.items()}, state, lr, adam)
    return loss.item()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[tuple[int, float, float]]


def train(run: RunConfig, out_dir=None, lines: Sequence[str] | None = None, vocab: Vocab | None = None,
          progress: bool = False) -> TrainResult:
    """Run MLM pre-training; writes ``metrics.tsv`` and ``checkpoint.bin`` to ``out_dir`` if given.

    Every random draw (init, batch order, masking, dropout) derives from
    ``run.train.seed`` so identical configs give identical traces.
    """
    tc = run.train
    tc.validate()
    if lines is None:
        if not tc.corpus:
            raise ConfigError("no corpus given")
        lines = read_corpus(tc.corpus)
    if vocab is None:
        vocab = build_vocab(lines, tc.vocab_max_size)
    config = run.model.replace(vocab_size=len(vocab))
    config.validate()
    ids_all, mask_all = encode_batch(lines, vocab, config.max_len)

    root = np.random.default_rng(tc.seed)
    init_seed, data_seed, drop_seed = (int(s) for s in root.integers(0, 2**31 - 1, size=3))
    params = init_params(config, init_seed)
    data_rng = np.random.default_rng(data_seed)
    drop_rng = np.random.default_rng(drop_seed) if (config.dropout or config.attention_dropout) else None
    adam = AdamConfig(tc.adam_beta1, tc.adam_beta2, tc.adam_eps, tc.weight_decay)
    state = TrainState(seed=tc.seed, warmup=tc.warmup_steps, total=tc.steps, peak_lr=tc.peak_lr)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.tsv", "w", encoding="utf-8")

    def snapshot() -> Checkpoint:
        header = state.to_header()
        header["data_rng"] = data_rng.bit_generator.state
        if drop_rng is not None:
            header["dropout_rng"] = drop_rng.bit_generator.state
        moments = {f"adam.m.{k}": v for k, v in state.m.items()}
        moments.update({f"adam.v.{k}": v for k, v in state.v.items()})
        return Checkpoint(config=config, params=params, vocab=list(vocab.itos), train_state=header,
                          moments=moments)

    losses: list[tuple[int, float, float]] = []
    try:
        for s in range(tc.steps):
            rows = data_rng.integers(0, len(lines), size=tc.batch_size)
            ids, pmask = trim_batch(ids_all[rows], mask_all[rows])
            corrupted, targets, selected = apply_mlm_mask(ids, len(vocab), tc.mask_prob, data_rng)
            lr = lr_schedule(s + 1, tc.warmup_steps, tc.steps, tc.peak_lr)
            if not selected.any():
                continue
            loss = train_step(params, corrupted, pmask, targets, config, state, lr, adam, drop_rng)
            if (s + 1) % tc.log_every == 0 or s == 0:
                losses.append((s + 1, lr, loss))
                if metrics_fh is not None:
                    metrics_fh.write(f"{s + 1}\t{lr!r}\t{loss!r}\n")
                if progress:
                    log.info("step %d lr %.3g loss %.4f", s + 1, lr, loss)
            if out is not None and tc.checkpoint_every and (s + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint-{s + 1}.bin", snapshot())
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    ckpt = snapshot()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", ckpt)
        save_run_config(out / "run_config.json", run)
    return TrainResult(checkpoint=ckpt, losses=losses)


def initial_loss(run: RunConfig, lines: Sequence[str], vocab: Vocab | None = None, batches: int = 4) -> float:
    """Mean MLM loss of the freshly initialized model (no updates)."""
    tc = run.train
    vocab = vocab or build_vocab(lines, tc.vocab_max_size)
    config = run.model.replace(vocab_size=len(vocab))
    root = np.random.default_rng(tc.seed)
    init_seed, data_seed, _ = (int(s) for s in root.integers(0, 2**31 - 1, size=3))
    params = init_params(config, init_seed)
    rng = np.random.default_rng(data_seed)
    ids_all, mask_all = encode_batch(lines, vocab, config.max_len)
    vals = []
    for _ in range(batches):
        rows = rng.integers(0, len(lines), size=tc.batch_size)
        ids, pmask = trim_batch(ids_all[rows], mask_all[rows])
        corrupted, targets, _ = apply_mlm_mask(ids, len(vocab), tc.mask_prob, rng)
        vals.append(mlm_loss(corrupted, pmask, targets, config, params).item())
    return float(np.mean(vals))


def chance_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
