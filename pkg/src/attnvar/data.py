"""Vocabulary, per-example OOV extension, synthetic salient-copy task and batching."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
SALIENT_OPEN = "<S>"
SALIENT_CLOSE = "</S>"


class Vocabulary:
    """Token/id bijection with the four reserved ids fixed at 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be distinct")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_vocab(corpus: Iterable[Sequence[str]], size: int) -> Vocabulary:
    """Keep the ``size - 4`` most frequent tokens; equal counts sort lexicographically."""
    if size <= 4:
        raise ValueError("vocabulary size must exceed the 4 reserved ids")
    counts = Counter(tok for seq in corpus for tok in seq if tok not in RESERVED)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [tok for tok, _ in ranked[: size - 4]])


@dataclass
class ExtendedExample:
    source: list[str]
    target: list[str]
    source_ids: list[int]
    source_ext: list[int]
    oovs: list[str]
    target_ext: list[int]


def encode_source(tokens: Sequence[str], vocab: Vocabulary) -> tuple[list[int], list[int], list[str]]:
    """Return (UNKed ids, extended ids, OOV list) for a source sequence.

    Distinct OOVs are numbered ``len(vocab), len(vocab)+1, ...`` by first occurrence.
    """
    V = len(vocab)
    ids, ext, oovs = [], [], []
    slot: dict[str, int] = {}
    for tok in tokens:
        i = vocab.stoi.get(tok)
        if i is None:
            if tok not in slot:
                slot[tok] = V + len(oovs)
                oovs.append(tok)
            ids.append(UNK)
            ext.append(slot[tok])
        else:
            ids.append(i)
            ext.append(i)
    return ids, ext, oovs


def encode_target(tokens: Sequence[str], vocab: Vocabulary, oovs: Sequence[str]) -> list[int]:
    """Extended ids for a target; OOVs absent from the source become UNK."""
    V = len(vocab)
    slot = {tok: V + k for k, tok in enumerate(oovs)}
    return [vocab.stoi.get(tok, slot.get(tok, UNK)) for tok in tokens]


def decode_ids(ids: Iterable[int], vocab: Vocabulary, oovs: Sequence[str]) -> list[str]:
    V = len(vocab)
    return [vocab.itos[i] if i < V else oovs[i - V] for i in ids]


def make_example(source: Sequence[str], target: Sequence[str], vocab: Vocabulary) -> ExtendedExample:
    if not source:
        raise ValueError("empty source")
    ids, ext, oovs = encode_source(source, vocab)
    return ExtendedExample(list(source), list(target), ids, ext, oovs, encode_target(target, vocab, oovs))


# -- synthetic task ----------------------------------------------------------
@dataclass(frozen=True)
class TaskConfig:
    seed: int = 0
    n_examples: int = 2400
    source_len: tuple[int, int] = (20, 60)
    segment_len: tuple[int, int] = (3, 6)
    salient_fraction: float = 0.3
    oov_rate: float = 0.05
    distractor_rate: float = 0.0
    # None leaves target length unconstrained
    target_len: tuple[int, int] | None = (5, 20)
    word_pool: int = 194

    def __post_init__(self):
        for name in ("salient_fraction", "oov_rate", "distractor_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        ranges = [self.source_len, self.segment_len] + ([self.target_len] if self.target_len else [])
        for lo, hi in ranges:
            if lo < 1 or hi < lo:
                raise ValueError(f"bad length range ({lo}, {hi})")
        if self.word_pool < 1 or self.n_examples < 0:
            raise ValueError("word_pool and n_examples must be positive")


def _generate_one(cfg: TaskConfig, index: int) -> tuple[list[str], list[str]]:
    rng = np.random.default_rng([cfg.seed, index])
    words = [f"w{k:03d}" for k in range(cfg.word_pool)]
    for _ in range(1000):
        budget = int(rng.integers(cfg.source_len[0], cfg.source_len[1] + 1))
        segments = []
        total = 0
        while total < budget:
            n = int(rng.integers(cfg.segment_len[0], cfg.segment_len[1] + 1))
            segments.append([words[k] for k in rng.integers(0, cfg.word_pool, size=n)])
            total += n
        salient = rng.random(len(segments)) < cfg.salient_fraction
        if not salient.any():
            salient[rng.integers(len(segments))] = True
        rare = 0
        source: list[str] = []
        target: list[str] = []
        for seg, keep in zip(segments, salient):
            if keep:
                seg = list(seg)
                for j in range(len(seg)):
                    if rng.random() < cfg.oov_rate:
                        seg[j] = f"rare{index}x{rare}"
                        rare += 1
                source += [SALIENT_OPEN, *seg, SALIENT_CLOSE]
                target += seg
            else:
                source += seg
                if rng.random() < cfg.distractor_rate:
                    source += seg
        if len(source) > cfg.source_len[1]:
            continue
        if cfg.target_len and not cfg.target_len[0] <= len(target) <= cfg.target_len[1]:
            continue
        return source, target
    raise RuntimeError(f"could not satisfy length constraints for example {index}")


def synth_task_generate(cfg: TaskConfig) -> list[tuple[list[str], list[str]]]:
    """Deterministic corpus of (source, target) token lists.

    Example ``i`` depends only on ``(cfg, i)`` so generation may be split by index.
    """
    if cfg.salient_fraction == 0.0:
        raise ValueError("salient_fraction 0 gives empty targets")
    return [_generate_one(cfg, i) for i in range(cfg.n_examples)]


def strip_markers(tokens: Sequence[str]) -> list[str]:
    return [t for t in tokens if t not in (SALIENT_OPEN, SALIENT_CLOSE)]


# -- batching ----------------------------------------------------------------
@dataclass
class Batch:
    """Padded arrays for a group of examples. Shapes are (B, D) and (B, T)."""

    src_ids: np.ndarray
    src_ext: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    n_oov: int
    examples: list[ExtendedExample] = field(repr=False)

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]

    @property
    def src_len(self) -> np.ndarray:
        return self.src_mask.sum(axis=1)

    @property
    def tgt_len(self) -> np.ndarray:
        return self.tgt_mask.sum(axis=1)


def collate(examples: Sequence[ExtendedExample], vocab_size: int) -> Batch:
    B = len(examples)
    D = max(len(e.source_ids) for e in examples)
    # decoder consumes BOS + y and predicts y + EOS
    T = max(len(e.target_ext) for e in examples) + 1
    src_ids = np.full((B, D), PAD, dtype=np.int64)
    src_ext = np.full((B, D), PAD, dtype=np.int64)
    src_mask = np.zeros((B, D), dtype=bool)
    tgt_in = np.full((B, T), PAD, dtype=np.int64)
    tgt_out = np.full((B, T), PAD, dtype=np.int64)
    tgt_mask = np.zeros((B, T), dtype=bool)
    for b, e in enumerate(examples):
        n = len(e.source_ids)
        src_ids[b, :n] = e.source_ids
        src_ext[b, :n] = e.source_ext
        src_mask[b, :n] = True
        y = e.target_ext
        m = len(y) + 1
        tgt_in[b, :m] = [BOS] + [t if t < vocab_size else UNK for t in y]
        tgt_out[b, :m] = y + [EOS]
        tgt_mask[b, :m] = True
    n_oov = max(len(e.oovs) for e in examples)
    return Batch(src_ids, src_ext, src_mask, tgt_in, tgt_out, tgt_mask, n_oov, list(examples))


def make_batches(
    examples: Sequence[ExtendedExample], batch_size: int, seed: int, vocab_size: int
) -> list[Batch]:
    """Shuffle by ``seed`` and cut into padded batches (the last may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(examples))
    return [
        collate([examples[i] for i in order[k : k + batch_size]], vocab_size)
        for k in range(0, len(order), batch_size)
    ]


# -- corpus files ------------------------------------------------------------
def write_corpus(path, pairs: Iterable[tuple[Sequence[str], Sequence[str]]]):
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


def read_corpus(path) -> list[tuple[list[str], list[str]]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected source<TAB>target")
            src, tgt = line.split("\t", 1)
            pairs.append((src.split(), tgt.split()))
    return pairs


def write_task_meta(path, cfg: TaskConfig, **extra):
    lines = [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(cfg).items()]
    lines += [f"{k} = {_fmt(v)}" for k, v in extra.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)
