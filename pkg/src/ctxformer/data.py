"""Synthetic sequence-to-sequence tasks, vocabulary, and token batching.

Datasets live on disk as JSONL (one ``{"src": [...], "tgt": [...]}`` object
per line) with raw content ids only; EOS on the source and BOS/EOS framing
on the target are added when batches are built.

Tasks:

* copy              -- target equals the source,
* reverse           -- target is the source reversed,
* majority_tag      -- every target token is the most frequent source token
                       (ties to the smallest id), so the target depends on
                       the whole sequence,
* lexical_translate -- a fixed seeded bijection over content ids applied
                       tokenwise, then the first two tokens swapped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError

PAD = 0
BOS = 1
EOS = 2
UNK = 3
N_RESERVED = 4

TASK_KINDS = ("copy", "reverse", "majority_tag", "lexical_translate")


@dataclass(frozen=True)
class Vocab:
    """Dense id space with the four reserved ids up front."""

    size: int

    def __post_init__(self):
        if self.size <= N_RESERVED:
            raise ConfigError(f"vocab size must exceed {N_RESERVED}, got {self.size}")

    @property
    def content_ids(self) -> range:
        return range(N_RESERVED, self.size)


def build_vocab(size: int) -> Vocab:
    return Vocab(size)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab_size: int
    len_min: int
    len_max: int
    n_samples: int
    seed: int

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise ConfigError(f"bad length range [{self.len_min}, {self.len_max}]")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab size must exceed {N_RESERVED}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "len_min": self.len_min,
            "len_max": self.len_max,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        return cls(**obj)


def _lexical_bijection(spec: TaskSpec) -> np.ndarray:
    """Content-id permutation derived only from the task seed."""
    rng = np.random.default_rng([spec.seed, 0x6C6578])
    content = np.arange(N_RESERVED, spec.vocab_size)
    table = np.arange(spec.vocab_size)
    table[N_RESERVED:] = rng.permutation(content)
    return table


def _target_for(src: np.ndarray, spec: TaskSpec, bijection: np.ndarray | None) -> list[int]:
    if spec.kind == "copy":
        return src.tolist()
    if spec.kind == "reverse":
        return src[::-1].tolist()
    if spec.kind == "majority_tag":
        majority = int(np.bincount(src).argmax())
        return [majority] * len(src)
    mapped = bijection[src]
    if len(mapped) >= 2:
        mapped[[0, 1]] = mapped[[1, 0]]
    return mapped.tolist()


def gen_task(spec: TaskSpec) -> list[tuple[list[int], list[int]]]:
    """Generate (source, target) id pairs; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    bijection = _lexical_bijection(spec) if spec.kind == "lexical_translate" else None
    pairs = []
    for _ in range(spec.n_samples):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        src = rng.integers(N_RESERVED, spec.vocab_size, size=length)
        pairs.append((src.tolist(), _target_for(src, spec, bijection)))
    return pairs


def split_pairs(
    pairs: list[tuple[list[int], list[int]]], seed: int
) -> tuple[list, list]:
    """Seeded shuffle, then a 90/10 train/valid split."""
    rng = np.random.default_rng([seed, 0x73706C69])
    order = rng.permutation(len(pairs))
    n_valid = max(1, len(pairs) // 10) if len(pairs) > 1 else 0
    valid_idx = set(order[:n_valid].tolist())
    train = [pairs[i] for i in order[n_valid:]]
    valid = [pairs[i] for i in sorted(valid_idx)]
    return train, valid


@dataclass
class Batch:
    """Padded id matrices plus masks; padding only ever trails a row."""

    src: np.ndarray       # (B, n_max) source ids with trailing EOS
    tgt_in: np.ndarray    # (B, m_max) BOS + target
    tgt_out: np.ndarray   # (B, m_max) target + EOS
    src_mask: np.ndarray  # (B, n_max) bool, True on real tokens
    tgt_mask: np.ndarray  # (B, m_max) bool

    @property
    def n_rows(self) -> int:
        return self.src.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def rows(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield unpadded (src, tgt_in, tgt_out) triples."""
        for i in range(self.n_rows):
            sm, tm = self.src_mask[i], self.tgt_mask[i]
            yield self.src[i][sm], self.tgt_in[i][tm], self.tgt_out[i][tm]


def _framed(pair: tuple[list[int], list[int]]):
    src, tgt = pair
    return list(src) + [EOS], [BOS] + list(tgt), list(tgt) + [EOS]


def _row_width(pair) -> int:
    src, tgt = pair
    return max(len(src) + 1, len(tgt) + 1)


def batchify(
    pairs: list[tuple[list[int], list[int]]], max_tokens: int, seed: int
) -> list[Batch]:
    """Shuffle, then pack greedily so rows x padded width <= max_tokens."""
    if not pairs:
        raise ConfigError("batchify: no pairs")
    rng = np.random.default_rng([seed, 0x626174])
    order = rng.permutation(len(pairs))
    batches: list[Batch] = []
    current: list = []
    width = 0
    for idx in order:
        pair = pairs[int(idx)]
        w = _row_width(pair)
        if w > max_tokens:
            raise ConfigError(
                f"single pair of padded width {w} exceeds max_tokens {max_tokens}"
            )
        if current and (len(current) + 1) * max(width, w) > max_tokens:
            batches.append(_pack(current))
            current, width = [], 0
        current.append(pair)
        width = max(width, w)
    if current:
        batches.append(_pack(current))
    return batches


def _pack(pairs: list) -> Batch:
    framed = [_framed(p) for p in pairs]
    n_max = max(len(f[0]) for f in framed)
    m_max = max(len(f[1]) for f in framed)
    b = len(framed)
    src = np.full((b, n_max), PAD, dtype=np.int64)
    tgt_in = np.full((b, m_max), PAD, dtype=np.int64)
    tgt_out = np.full((b, m_max), PAD, dtype=np.int64)
    src_mask = np.zeros((b, n_max), dtype=bool)
    tgt_mask = np.zeros((b, m_max), dtype=bool)
    for i, (s, ti, to) in enumerate(framed):
        src[i, : len(s)] = s
        src_mask[i, : len(s)] = True
        tgt_in[i, : len(ti)] = ti
        tgt_out[i, : len(to)] = to
        tgt_mask[i, : len(ti)] = True
    return Batch(src, tgt_in, tgt_out, src_mask, tgt_mask)


# ---------------------------------------------------------------------------
# on-disk dataset layout: train.jsonl, valid.jsonl, vocab.json, spec.json


def write_pairs_jsonl(pairs, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in pairs:
            fh.write(json.dumps({"src": list(src), "tgt": list(tgt)}) + "\n")


def read_pairs_jsonl(path: Path) -> list[tuple[list[int], list[int]]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                pairs.append((obj["src"], obj["tgt"]))
    return pairs


def write_dataset(spec: TaskSpec, out_dir) -> None:
    """Generate the task and write the four dataset files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, valid = split_pairs(gen_task(spec), spec.seed)
    write_pairs_jsonl(train, out / "train.jsonl")
    write_pairs_jsonl(valid, out / "valid.jsonl")
    with open(out / "vocab.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"size": spec.vocab_size}) + "\n")
    with open(out / "spec.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")


@dataclass
class Dataset:
    train: list[tuple[list[int], list[int]]]
    valid: list[tuple[list[int], list[int]]]
    vocab: Vocab
    spec: TaskSpec | None


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    if not (root / "train.jsonl").exists():
        raise ConfigError(f"no dataset at {root} (missing train.jsonl)")
    with open(root / "vocab.json", "r", encoding="utf-8") as fh:
        vocab = Vocab(json.load(fh)["size"])
    spec = None
    if (root / "spec.json").exists():
        with open(root / "spec.json", "r", encoding="utf-8") as fh:
            spec = TaskSpec.from_json(json.load(fh))
    return Dataset(
        train=read_pairs_jsonl(root / "train.jsonl"),
        valid=read_pairs_jsonl(root / "valid.jsonl"),
        vocab=vocab,
        spec=spec,
    )
