"""Parallel corpora, the joint vocabulary, padded batches, and the toy cipher language pair."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class CorpusError(ValueError):
    """Malformed or empty corpus input."""


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        idx = self.stoi.get(tok)
        if idx is None:
            idx = self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(SPECIALS):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(t for t in lines if t)


def build_vocab(corpus: Sequence[tuple[Sequence[str], Sequence[str]]], min_count: int = 1) -> Vocabulary:
    """Joint vocabulary over both sides; rarer tokens than ``min_count`` map to UNK.

    Tokens are ordered by descending frequency, ties broken lexicographically.
    """
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for src, tgt in corpus:
        counts.update(src)
        counts.update(tgt)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass(frozen=True)
class SentencePair:
    src: tuple[int, ...]
    tgt: tuple[int, ...]

    def __post_init__(self):
        if not self.src or not self.tgt:
            raise CorpusError("sentence pairs need at least one token on each side")


def encode_pairs(corpus, vocab: Vocabulary) -> list[SentencePair]:
    return [SentencePair(tuple(vocab.encode(s)), tuple(vocab.encode(t))) for s, t in corpus]


def length_ratio_alpha(pairs) -> float:
    """Mean target/source length ratio over the corpus."""
    if not pairs:
        raise CorpusError("length ratio of an empty corpus")
    ratios = [len(_tgt(p)) / len(_src(p)) for p in pairs]
    return float(np.mean(ratios))


def _src(p):
    return p.src if isinstance(p, SentencePair) else p[0]


def _tgt(p):
    return p.tgt if isinstance(p, SentencePair) else p[1]


@dataclass
class Batch:
    src: np.ndarray          # (B, S) int ids, PAD-filled
    src_len: np.ndarray      # (B,)
    tgt: np.ndarray          # (B, T)
    tgt_len: np.ndarray      # (B,)
    index: np.ndarray        # corpus positions of each row

    @property
    def src_mask(self) -> np.ndarray:
        return (self.src != PAD).astype(np.float64)

    @property
    def tgt_mask(self) -> np.ndarray:
        return (self.tgt != PAD).astype(np.float64)

    def __len__(self) -> int:
        return len(self.src)


def pad(seqs: Sequence[Sequence[int]], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lens.max(initial=0)) if width is None else width
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lens


def collate(pairs: Sequence[SentencePair], index=None, src_width=None, tgt_width=None) -> Batch:
    src, src_len = pad([p.src for p in pairs], src_width)
    tgt, tgt_len = pad([p.tgt for p in pairs], tgt_width)
    idx = np.arange(len(pairs)) if index is None else np.asarray(index)
    return Batch(src, src_len, tgt, tgt_len, idx)


def make_batches(pairs: Sequence[SentencePair], max_tokens: int, seed: int = 0) -> list[Batch]:
    """Length-bucketed, seed-shuffled padded batches covering every pair once.

    A batch holds at most ``max_tokens`` padded positions on its longer side.
    """
    for i, p in enumerate(pairs):
        if max(len(p.src), len(p.tgt)) > max_tokens:
            raise CorpusError(f"pair {i} has {max(len(p.src), len(p.tgt))} tokens, over max_tokens={max_tokens}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    keys = np.array([max(len(pairs[i].src), len(pairs[i].tgt)) for i in order])
    order = order[np.argsort(keys, kind="stable")]
    groups: list[list[int]] = []
    cur: list[int] = []
    width = 0
    for i in order:
        w = max(width, len(pairs[i].src), len(pairs[i].tgt))
        if cur and w * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, w = [], max(len(pairs[i].src), len(pairs[i].tgt))
        cur.append(int(i))
        width = w
    if cur:
        groups.append(cur)
    batch_order = rng.permutation(len(groups))
    return [collate([pairs[i] for i in groups[g]], groups[g]) for g in batch_order]


# ---------------------------------------------------------------- file formats

def read_parallel(src_path=None, tgt_path=None, tsv_path=None) -> list[tuple[list[str], list[str]]]:
    """Read whitespace-tokenized text: two aligned files, or one ``src<TAB>tgt`` file."""
    pairs = []
    if tsv_path is not None:
        for n, line in enumerate(Path(tsv_path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise CorpusError(f"{tsv_path}:{n}: expected 'source<TAB>target'")
            s, t = line.split("\t", 1)
            pairs.append((s.split(), t.split()))
    else:
        src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
        tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
        if len(src_lines) != len(tgt_lines):
            raise CorpusError(f"line count mismatch: {len(src_lines)} source vs {len(tgt_lines)} target")
        pairs = [(s.split(), t.split()) for s, t in zip(src_lines, tgt_lines)]
    for n, (s, t) in enumerate(pairs, 1):
        if not s or not t:
            raise CorpusError(f"pair {n} has an empty side")
    if not pairs:
        raise CorpusError("empty corpus")
    return pairs


def read_lines(path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def write_lines(path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def write_tsv(path, pairs) -> None:
    Path(path).write_text("".join(f"{' '.join(s)}\t{' '.join(t)}\n" for s, t in pairs), encoding="utf-8")


# ---------------------------------------------------------------- toy language pair

@dataclass
class CipherLanguage:
    """Deterministic synthetic language pair.

    Sentences are sequences of chunks: a lone head word, or a modifier followed
    by a head.  Every source word has one target word; with ``swap`` on, a
    modifier chunk comes out in head-modifier order.  Target length always
    equals source length.
    """

    lexicon: dict[str, str]
    modifiers: list[str]
    heads: list[str]
    swap: bool = True
    modifier_rate: float = 0.35

    @classmethod
    def generate(cls, seed: int = 0, n_words: int = 23, n_modifiers: int = 8, swap: bool = True):
        rng = np.random.default_rng(seed)
        words = [f"s{i:02d}" for i in range(n_words)]
        perm = rng.permutation(n_words)
        lexicon = {w: f"t{perm[i]:02d}" for i, w in enumerate(words)}
        return cls(lexicon, words[:n_modifiers], words[n_modifiers:], swap)

    def translate(self, src: Sequence[str]) -> list[str]:
        out = [self.lexicon[w] for w in src]
        if self.swap:
            mods = set(self.modifiers)
            for i in range(len(src) - 1):
                if src[i] in mods and src[i + 1] not in mods:
                    out[i], out[i + 1] = out[i + 1], out[i]
        return out

    def sample_source(self, rng: np.random.Generator, min_len: int, max_len: int) -> list[str]:
        n = int(rng.integers(min_len, max_len + 1))
        out: list[str] = []
        while len(out) < n:
            if n - len(out) >= 2 and rng.random() < self.modifier_rate:
                out.append(self.modifiers[int(rng.integers(len(self.modifiers)))])
            out.append(self.heads[int(rng.integers(len(self.heads)))])
        return out

    def sample_corpus(self, n: int, rng: np.random.Generator, min_len: int = 3, max_len: int = 12):
        pairs = []
        for _ in range(n):
            s = self.sample_source(rng, min_len, max_len)
            pairs.append((s, self.translate(s)))
        return pairs


def generate_toy(n_train: int, n_valid: int, n_test: int, seed: int = 0,
                 min_len: int = 3, max_len: int = 12, swap: bool = True):
    """Train/valid/test splits of the cipher pair, all from one seed."""
    lang = CipherLanguage.generate(seed, swap=swap)
    rng = np.random.default_rng(seed + 1)
    return (lang.sample_corpus(n_train, rng, min_len, max_len),
            lang.sample_corpus(n_valid, rng, min_len, max_len),
            lang.sample_corpus(n_test, rng, min_len, max_len),
            lang)
