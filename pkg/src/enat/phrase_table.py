"""Phrase tables: IBM Model 1 alignment, phrase extraction, Moses I/O, greedy lookup."""

from __future__ import annotations

import gzip
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

Phrase = tuple[str, ...]
NULL = "<null>"


class PhraseTableError(ValueError):
    """Malformed phrase-table input."""


class PhraseTable:
    """Source phrase -> candidates sorted by descending probability.

    Equal probabilities are ordered lexicographically by target phrase.
    """

    def __init__(self, entries: Mapping[Phrase, Iterable[tuple[Phrase, float]]] | None = None):
        self.entries: dict[Phrase, list[tuple[Phrase, float]]] = {}
        for src, cands in (entries or {}).items():
            for tgt, p in cands:
                self.add(src, tgt, p)

    def add(self, src: Sequence[str], tgt: Sequence[str], prob: float) -> None:
        src, tgt = tuple(src), tuple(tgt)
        if not src:
            raise PhraseTableError("empty source phrase")
        if not 0.0 < prob <= 1.0:
            raise PhraseTableError(f"probability {prob} for {' '.join(src)!r} outside (0, 1]")
        cands = self.entries.setdefault(src, [])
        for k, (t, p) in enumerate(cands):
            if t == tgt:
                cands[k] = (t, max(p, prob))
                break
        else:
            cands.append((tgt, prob))
        cands.sort(key=lambda c: (-c[1], c[0]))

    @property
    def max_len(self) -> int:
        return max((len(k) for k in self.entries), default=0)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, src) -> bool:
        return tuple(src) in self.entries

    def __eq__(self, other) -> bool:
        return isinstance(other, PhraseTable) and self.entries == other.entries

    def best(self, src: Sequence[str]) -> tuple[Phrase, float] | None:
        cands = self.entries.get(tuple(src))
        return cands[0] if cands else None

    def candidates(self, src: Sequence[str]) -> list[tuple[Phrase, float]]:
        return list(self.entries.get(tuple(src), ()))

    def save(self, path) -> None:
        lines = []
        for src in sorted(self.entries):
            for tgt, p in self.entries[src]:
                lines.append(f"{' '.join(src)}\t{' '.join(tgt)}\t{p!r}\n")
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PhraseTable":
        table = cls()
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise PhraseTableError(f"{path}:{n}: expected 3 tab-separated fields")
            try:
                p = float(parts[2])
            except ValueError:
                raise PhraseTableError(f"{path}:{n}: bad probability {parts[2]!r}") from None
            table.add(parts[0].split(), parts[1].split(), p)
        return table


@dataclass
class WordTable:
    """Single source token -> best single target token."""

    entries: dict[str, tuple[str, float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def as_phrase_table(self) -> PhraseTable:
        return PhraseTable({(s,): [((t,), p)] for s, (t, p) in self.entries.items()})


def greedy_lookup(sentence: Sequence[str], table: PhraseTable) -> list[str]:
    """Translate by greedy longest-match segmentation.

    At each position try the longest span first; untranslatable tokens are
    skipped and contribute nothing to the output.
    """
    out: list[str] = []
    n = len(sentence)
    L = table.max_len
    entries = table.entries
    i = 0
    while i < n:
        for span in range(min(L, n - i), 0, -1):
            cands = entries.get(tuple(sentence[i:i + span]))
            if cands:
                out.extend(cands[0][0])
                i += span
                break
        else:
            i += 1
    return out


def extract_word_table(table: PhraseTable) -> WordTable:
    words = {}
    for src, cands in table.entries.items():
        if len(src) != 1:
            continue
        singles = [(t, p) for t, p in cands if len(t) == 1]
        if singles:
            t, p = min(singles, key=lambda c: (-c[1], c[0]))
            words[src[0]] = (t[0], p)
    return WordTable(words)


# ---------------------------------------------------------------- Moses format

def parse_moses_table(path, score_index: int = 2) -> PhraseTable:
    """Read ``src ||| tgt ||| scores ...`` lines (plain or gzip).

    ``score_index`` selects the direct phrase probability; Moses' standard
    five-score ordering puts it third.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    table = PhraseTable()
    with opener(path, "rt", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = [f.strip() for f in line.split("|||")]
            if len(fields) < 3:
                raise PhraseTableError(f"{path}:{n}: expected at least 3 '|||' fields")
            src, tgt = fields[0].split(), fields[1].split()
            if not src or not tgt:
                raise PhraseTableError(f"{path}:{n}: empty phrase")
            scores = fields[2].split()
            if len(scores) <= score_index:
                raise PhraseTableError(f"{path}:{n}: no score at column {score_index}")
            try:
                p = float(scores[score_index])
            except ValueError:
                raise PhraseTableError(f"{path}:{n}: unparseable score {scores[score_index]!r}") from None
            try:
                table.add(src, tgt, p)
            except PhraseTableError as exc:
                raise PhraseTableError(f"{path}:{n}: {exc}") from None
    return table


# ---------------------------------------------------------------- IBM Model 1

class AlignmentModel:
    """Lexical translation probabilities t(target | source), NULL included as a source."""

    def __init__(self, src_types: list[str], tgt_types: list[str], pair_src: np.ndarray,
                 pair_tgt: np.ndarray, prob: np.ndarray, log_likelihoods: list[float]):
        self.src_types = src_types
        self.tgt_types = tgt_types
        self.src_index = {w: i for i, w in enumerate(src_types)}
        self.tgt_index = {w: i for i, w in enumerate(tgt_types)}
        self.pair_src = pair_src
        self.pair_tgt = pair_tgt
        self.prob = prob
        self.log_likelihoods = log_likelihoods
        self._slot = {(int(s), int(t)): k for k, (s, t) in enumerate(zip(pair_src, pair_tgt))}

    def t(self, tgt: str, src: str) -> float:
        s, f = self.src_index.get(src), self.tgt_index.get(tgt)
        if s is None or f is None:
            return 0.0
        k = self._slot.get((s, f))
        return 0.0 if k is None else float(self.prob[k])

    def distribution(self, src: str) -> dict[str, float]:
        s = self.src_index[src]
        sel = np.flatnonzero(self.pair_src == s)
        return {self.tgt_types[self.pair_tgt[k]]: float(self.prob[k]) for k in sel}

    def best(self, src: str) -> str:
        dist = self.distribution(src)
        return min(dist, key=lambda w: (-dist[w], w))

    def viterbi(self, src: Sequence[str], tgt: Sequence[str]) -> list[int]:
        """For each target position, the best source position (-1 for NULL).

        Model 1 cannot tell repeated source words apart, so equal scores go to
        the position nearest the diagonal; NULL only wins outright.
        """
        out = []
        ratio = len(src) / max(len(tgt), 1)
        for j, f in enumerate(tgt):
            null = self.t(f, NULL)
            scores = np.array([self.t(f, e) for e in src])
            top = scores.max(initial=0.0)
            if top <= null:
                out.append(-1)
                continue
            tied = np.flatnonzero(scores == top)
            out.append(int(tied[np.argmin(np.abs(tied - j * ratio))]))
        return out


def train_ibm1(corpus: Sequence[tuple[Sequence[str], Sequence[str]]], iterations: int = 10) -> AlignmentModel:
    """IBM Model 1 EM; each target word is generated by one source word or NULL."""
    if not corpus:
        raise ValueError("IBM Model 1 needs a nonempty corpus")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    src_types = [NULL] + sorted({w for s, _ in corpus for w in s})
    tgt_types = sorted({w for _, t in corpus for w in t})
    si = {w: i for i, w in enumerate(src_types)}
    ti = {w: i for i, w in enumerate(tgt_types)}

    # every (source word, target word) co-occurrence in flattened form
    cell_src, cell_tgt, cell_pos = [], [], []
    pos_len = []
    pos = 0
    for src, tgt in corpus:
        s_ids = [0] + [si[w] for w in src]
        for f in tgt:
            fi = ti[f]
            cell_src.extend(s_ids)
            cell_tgt.extend([fi] * len(s_ids))
            cell_pos.extend([pos] * len(s_ids))
            pos_len.append(len(s_ids))
            pos += 1
    cell_src = np.array(cell_src)
    cell_tgt = np.array(cell_tgt)
    cell_pos = np.array(cell_pos)
    pos_len = np.array(pos_len, dtype=np.float64)

    keys = cell_src * len(tgt_types) + cell_tgt
    uniq, slot = np.unique(keys, return_inverse=True)
    pair_src = uniq // len(tgt_types)
    pair_tgt = uniq % len(tgt_types)
    prob = np.full(len(uniq), 1.0 / len(tgt_types))

    lls = []
    for _ in range(iterations):
        p = prob[slot]
        denom = np.bincount(cell_pos, weights=p, minlength=pos)
        lls.append(float(np.sum(np.log(denom / pos_len))))
        post = p / denom[cell_pos]
        counts = np.bincount(slot, weights=post, minlength=len(uniq))
        totals = np.bincount(pair_src, weights=counts, minlength=len(src_types))
        prob = counts / totals[pair_src]
    p = prob[slot]
    denom = np.bincount(cell_pos, weights=p, minlength=pos)
    lls.append(float(np.sum(np.log(denom / pos_len))))
    return AlignmentModel(src_types, tgt_types, pair_src, pair_tgt, prob, lls)


# ---------------------------------------------------------------- phrase extraction

def symmetrized_alignment(src, tgt, fwd: AlignmentModel, rev: AlignmentModel) -> set[tuple[int, int]]:
    """Intersection of the two directional Viterbi alignments, as (src_pos, tgt_pos)."""
    a_fwd = {(i, j) for j, i in enumerate(fwd.viterbi(src, tgt)) if i >= 0}
    a_rev = {(i, j) for i, j in enumerate(rev.viterbi(tgt, src)) if j >= 0}
    return a_fwd & a_rev


def phrase_pairs(src, tgt, alignment: set[tuple[int, int]], max_len: int):
    """Alignment-consistent phrase pairs, extending over unaligned target words."""
    n_t = len(tgt)
    tgt_aligned = Counter(j for _, j in alignment)
    for s0 in range(len(src)):
        for s1 in range(s0, min(len(src), s0 + max_len)):
            pts = [j for i, j in alignment if s0 <= i <= s1]
            if not pts:
                continue
            t0, t1 = min(pts), max(pts)
            if any(t0 <= j <= t1 and not s0 <= i <= s1 for i, j in alignment):
                continue
            lo = t0
            while True:
                hi = t1
                while True:
                    if hi - lo + 1 <= max_len:
                        yield tuple(src[s0:s1 + 1]), tuple(tgt[lo:hi + 1])
                    hi += 1
                    if hi >= n_t or tgt_aligned[hi] or hi - lo + 1 > max_len:
                        break
                lo -= 1
                if lo < 0 or tgt_aligned[lo] or t1 - lo + 1 > max_len:
                    break


def extract_phrases(corpus, fwd: AlignmentModel, rev: AlignmentModel, max_len: int = 3) -> PhraseTable:
    """Relative-frequency phrase table p(target | source) from symmetrized alignments."""
    if not corpus:
        raise ValueError("phrase extraction needs a nonempty corpus")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    joint: Counter = Counter()
    for src, tgt in corpus:
        align = symmetrized_alignment(src, tgt, fwd, rev)
        joint.update(phrase_pairs(src, tgt, align, max_len))
    src_count: defaultdict[Phrase, int] = defaultdict(int)
    for (s, _), c in joint.items():
        src_count[s] += c
    table = PhraseTable()
    for (s, t), c in joint.items():
        table.add(s, t, c / src_count[s])
    return table


def build_phrase_table(corpus, iterations: int = 10, max_len: int = 3) -> PhraseTable:
    """Both-direction IBM Model 1, then phrase extraction."""
    fwd = train_ibm1(corpus, iterations)
    rev = train_ibm1([(t, s) for s, t in corpus], iterations)
    return extract_phrases(corpus, fwd, rev, max_len)
