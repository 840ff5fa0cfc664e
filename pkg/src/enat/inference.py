"""Length-window NAT decoding, teacher rescoring, BLEU, and latency accounting."""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .autodiff import Tensor, no_grad, ops
from .corpus import BOS, EOS, PAD, UNK, pad
from .decoder_input import DecoderInputBuilder, soft_length_map
from .transformer import EncoderState, Transformer, batch_beam_search, shift_right

NAT_BANNED = (PAD, BOS, EOS, UNK)


class ConfigurationError(ValueError):
    """Inference was asked for something its inputs cannot provide."""


@dataclass(frozen=True)
class LengthWindow:
    alpha: float = 1.0
    B: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.B < 0 or int(self.B) != self.B:
            raise ValueError("B must be a nonnegative integer")


def predict_lengths(tz: int, window: LengthWindow) -> list[int]:
    """floor(alpha * tz) +- B, clamped to >= 1, sorted and deduplicated."""
    if tz < 1:
        raise ValueError("candidate length must be >= 1")
    # tolerance keeps e.g. 1.1 * 10 = 11.000000000000002 from flooring differently
    c = math.floor(window.alpha * tz + 1e-9)
    return sorted({max(1, n) for n in range(c - window.B, c + window.B + 1)})


@dataclass
class Candidate:
    length: int
    tokens: list[int]
    nat_score: float
    teacher_score: float | None = None


@dataclass
class LatencyReport:
    wall_time: float = 0.0
    decoder_passes: int = 0
    lookup_time: float = 0.0
    rescoring_time: float = 0.0
    teacher_passes: int = 0


def select_candidate(cands: Sequence[Candidate]) -> Candidate:
    """Argmax by teacher score (NAT score when unscored); ties to shorter, then lexicographic."""
    def key(c):
        s = c.teacher_score if c.teacher_score is not None else c.nat_score
        return (-s, c.length, c.tokens)
    return min(cands, key=key)


def teacher_scores(teacher: Transformer, src_ids: Sequence[Sequence[int]],
                   hyps: Sequence[Sequence[int]]) -> np.ndarray:
    """Average per-token teacher log-prob of each hypothesis (EOS included), one parallel pass."""
    src, _ = pad(src_ids)
    tgt, tgt_len = pad([list(h) for h in hyps])
    tgt_in, tgt_out = shift_right(tgt, tgt_len)
    with no_grad():
        enc = teacher.encode(src)
        logp = ops.log_softmax(teacher.at_forward(tgt_in, enc)).data
    picked = np.take_along_axis(logp, tgt_out[..., None], axis=-1)[..., 0]
    mask = tgt_out != PAD
    return (picked * mask).sum(axis=1) / mask.sum(axis=1)


def _nat_decode(logits: np.ndarray, lengths) -> list[tuple[list[int], float]]:
    logp = logits - logits.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    logp[..., list(NAT_BANNED)] = -np.inf
    best = logp.argmax(axis=-1)
    top = logp.max(axis=-1)
    return [(best[r, :n].tolist(), float(top[r, :n].mean())) for r, n in enumerate(lengths)]


def nat_translate(src_ids: Sequence[int], student: Transformer, builder: DecoderInputBuilder,
                  window: LengthWindow, teacher: Transformer | None = None):
    """Translate one sentence: one NAT decoder pass per candidate length.

    Returns (best tokens, candidates, LatencyReport).
    """
    if window.B >= 1 and teacher is None:
        raise ConfigurationError("a teacher is required for rescoring when B >= 1")
    report = LatencyReport()
    t0 = time.perf_counter()
    src = np.asarray(src_ids, dtype=np.int64)[None]
    passes0 = student.decoder_passes
    with no_grad():
        enc = student.encode(src)
        tl = time.perf_counter()
        cand, tz = builder.candidates(student.params["emb"], src, [src.shape[1]])
        report.lookup_time = time.perf_counter() - tl
        cands = []
        for length in predict_lengths(max(int(tz[0]), 1), window):
            z, _ = soft_length_map(cand, tz, [length], builder.tau, not builder.raw_kernel)
            logits = student.nat_forward(z, enc).data
            toks, score = _nat_decode(logits, [length])[0]
            cands.append(Candidate(length, toks, score))
    report.decoder_passes = student.decoder_passes - passes0
    if window.B >= 1:
        tr = time.perf_counter()
        scores = teacher_scores(teacher, [src_ids] * len(cands), [c.tokens for c in cands])
        for c, s in zip(cands, scores):
            c.teacher_score = float(s)
        report.rescoring_time = time.perf_counter() - tr
        report.teacher_passes = 1
    best = select_candidate(cands)
    report.wall_time = time.perf_counter() - t0
    return best.tokens, cands, report


def translate_corpus(sources: Sequence[Sequence[int]], student: Transformer, builder: DecoderInputBuilder,
                     window: LengthWindow, teacher: Transformer | None = None,
                     rows_per_batch: int = 512) -> list[list[int]]:
    """Batched equivalent of :func:`nat_translate` over many sentences."""
    if window.B >= 1 and teacher is None:
        raise ConfigurationError("a teacher is required for rescoring when B >= 1")
    jobs = []  # (sentence index, length)
    tz_all = builder.candidate_lengths(*pad(sources))
    for i, tz in enumerate(tz_all):
        jobs.extend((i, n) for n in predict_lengths(max(int(tz), 1), window))
    per_sentence: dict[int, list[Candidate]] = {i: [] for i in range(len(sources))}
    order = sorted(range(len(jobs)), key=lambda k: (len(sources[jobs[k][0]]), jobs[k][1]))
    with no_grad():
        for start in range(0, len(order), rows_per_batch):
            chunk = [jobs[k] for k in order[start:start + rows_per_batch]]
            src, src_len = pad([sources[i] for i, _ in chunk])
            lengths = np.array([n for _, n in chunk])
            enc = student.encode(src)
            z, _ = builder.build(student.params["emb"], src, src_len, lengths)
            logits = student.nat_forward(z, enc, np.arange(lengths.max())[None, :] < lengths[:, None]).data
            for (i, n), (toks, score) in zip(chunk, _nat_decode(logits, lengths)):
                per_sentence[i].append(Candidate(n, toks, score))
    if window.B >= 1:
        flat = [(i, c) for i, cs in per_sentence.items() for c in cs]
        for start in range(0, len(flat), rows_per_batch):
            chunk = flat[start:start + rows_per_batch]
            scores = teacher_scores(teacher, [sources[i] for i, _ in chunk], [c.tokens for _, c in chunk])
            for (_, c), s in zip(chunk, scores):
                c.teacher_score = float(s)
    return [select_candidate(per_sentence[i]).tokens for i in range(len(sources))]


# ---------------------------------------------------------------- BLEU

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         case_sensitive: bool = True, max_n: int = 4) -> float:
    """Corpus BLEU-4 in [0, 100]: clipped n-gram precision, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if not case_sensitive:
            hyp = [t.lower() for t in hyp]
            ref = [t.lower() for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def bleu_by_length_bucket(hypotheses, references, edges: Sequence[int]) -> list[dict]:
    """Corpus BLEU within reference-length buckets ``[edges[k], edges[k+1])``.

    Empty buckets are omitted.
    """
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])) or len(edges) < 2:
        raise ValueError("bucket edges must be strictly increasing (at least two)")
    rows = []
    for lo, hi in zip(edges, edges[1:]):
        sel = [k for k, r in enumerate(references) if lo <= len(r) < hi]
        if sel:
            rows.append({"lo": lo, "hi": hi, "count": len(sel),
                         "bleu": bleu([hypotheses[k] for k in sel], [references[k] for k in sel])})
    return rows


# ---------------------------------------------------------------- latency

@dataclass
class LatencySummary:
    mode: str
    times: list[float] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)
    passes: list[int] = field(default_factory=list)

    @property
    def mean_time(self) -> float:
        return float(np.mean(self.times))

    def slope(self, confidence: float = 0.95) -> tuple[float, float, float]:
        """Regression slope of wall time on output length with its confidence interval."""
        fit = stats.linregress(self.lengths, self.times)
        q = stats.t.ppf(0.5 + confidence / 2, len(self.times) - 2)
        return float(fit.slope), float(fit.slope - q * fit.stderr), float(fit.slope + q * fit.stderr)

    def to_dict(self) -> dict:
        s, lo, hi = self.slope()
        return {"mode": self.mode, "sentences": len(self.times), "mean_ms": 1e3 * self.mean_time,
                "mean_passes": float(np.mean(self.passes)), "slope_ms_per_token": 1e3 * s,
                "slope_ci_ms": [1e3 * lo, 1e3 * hi]}


def measure_latency(mode: str, sources: Sequence[Sequence[int]], student: Transformer | None = None,
                    builder: DecoderInputBuilder | None = None, teacher: Transformer | None = None,
                    alpha: float = 1.0, warmup: int = 5) -> LatencySummary:
    """Per-sentence latency at batch size 1 for ``at-greedy``, ``nat-b0`` or ``nat-b4``."""
    out = LatencySummary(mode)
    if mode == "at-greedy":
        if teacher is None:
            raise ConfigurationError("at-greedy latency needs a teacher")
        run = lambda s: _at_once(teacher, s)  # noqa: E731
    elif mode in ("nat-b0", "nat-b4"):
        if student is None or builder is None:
            raise ConfigurationError(f"{mode} latency needs a student and a decoder-input builder")
        window = LengthWindow(alpha, 0 if mode == "nat-b0" else 4)

        def run(s):
            toks, _, rep = nat_translate(s, student, builder, window, teacher)
            return toks, rep.decoder_passes
    else:
        raise ConfigurationError(f"unknown latency mode {mode!r}")
    for s in list(sources)[:warmup]:
        run(s)
    for s in sources:
        t0 = time.perf_counter()
        toks, passes = run(s)
        out.times.append(time.perf_counter() - t0)
        out.lengths.append(len(toks))
        out.passes.append(passes)
    return out


def _at_once(teacher: Transformer, src) -> tuple[list[int], int]:
    before = teacher.decoder_passes
    toks, _, _ = batch_beam_search(teacher, [list(src)], 1)[0]
    return toks, teacher.decoder_passes - before
