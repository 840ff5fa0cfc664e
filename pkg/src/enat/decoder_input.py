"""Enhanced decoder inputs: copy, phrase/word lookup, and learned embedding mapping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .corpus import PAD, Vocabulary, pad
from .phrase_table import PhraseTable, WordTable, greedy_lookup

METHODS = ("copy", "phrase", "word", "embed")


class DecoderInputError(ValueError):
    """A decoder-input method is missing the resource it needs."""


def kernel_weights(tz: int, ty: int, tau: float = 0.3, normalize: bool = True) -> np.ndarray:
    """(ty, tz) soft length-mapping weights, 1-based positions.

    Raw weight ``exp(-(j - i*ty/tz)^2 / tau)``; with ``normalize`` each target
    row is rescaled to sum to one.
    """
    if tz < 1 or ty < 1:
        raise ValueError("kernel needs tz >= 1 and ty >= 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    i = np.arange(1, tz + 1)
    j = np.arange(1, ty + 1)
    logw = -((j[:, None] - i[None, :] * (ty / tz)) ** 2) / tau
    if not normalize:
        return np.exp(logw)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def soft_length_map(candidates, tz, ty, tau: float = 0.3, normalize: bool = True, width: int | None = None):
    """Map (B, Tz, d) candidate embeddings to (B, width, d), width defaulting to max(ty).

    ``tz``/``ty`` are per-row lengths; positions past ``ty`` are zero.  Rows
    with ``tz == 0`` come back as zeros; the returned boolean array flags them.
    """
    candidates = candidates if isinstance(candidates, Tensor) else Tensor(candidates)
    tz = np.atleast_1d(np.asarray(tz, dtype=np.int64))
    ty = np.atleast_1d(np.asarray(ty, dtype=np.int64))
    b, tz_max, _ = candidates.shape
    ty_max = int(ty.max()) if width is None else width
    weights = np.zeros((b, ty_max, tz_max))
    empty = tz == 0
    for r in range(b):
        if tz[r] > 0:
            weights[r, :ty[r], :tz[r]] = kernel_weights(int(tz[r]), int(ty[r]), tau, normalize)
    if empty.any():
        warnings.warn(f"{int(empty.sum())} empty decoder-input candidate(s); using zero embeddings",
                      RuntimeWarning, stacklevel=2)
    if tz_max == 0:
        return Tensor(np.zeros((b, ty_max, candidates.shape[2]))), empty
    return ops.matmul(weights, candidates), empty


class MappingGenerator:
    """Linear map ``E_x -> E_x W`` into the target embedding region."""

    def __init__(self, d: int, W: np.ndarray | None = None):
        self.W = Tensor(np.eye(d) if W is None else W, requires_grad=True, name="gen.W")

    @property
    def params(self) -> dict[str, Tensor]:
        return {"gen.W": self.W}

    def __call__(self, emb, detach: bool = False) -> Tensor:
        return map_embeddings(emb, Tensor(self.W.data) if detach else self.W)


def map_embeddings(emb, W) -> Tensor:
    if emb.shape[-1] != W.shape[0] or W.shape[0] != W.shape[1]:
        raise ValueError(f"cannot map embeddings of shape {emb.shape} with W of shape {W.shape}")
    return ops.matmul(emb, W)


class Discriminator:
    """Two-layer perceptron d -> h -> 1 with a sigmoid output."""

    def __init__(self, d: int, hidden: int | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        h = hidden or d
        self.params = {
            "disc.w1": Tensor(rng.normal(0, d ** -0.5, (d, h)), requires_grad=True, name="disc.w1"),
            "disc.b1": Tensor(np.zeros(h), requires_grad=True, name="disc.b1"),
            "disc.w2": Tensor(rng.normal(0, h ** -0.5, (h, 1)), requires_grad=True, name="disc.w2"),
            "disc.b2": Tensor(np.zeros(1), requires_grad=True, name="disc.b2"),
        }

    def logits(self, x, frozen: bool = False) -> Tensor:
        p = {k: Tensor(v.data) for k, v in self.params.items()} if frozen else self.params
        h = ops.relu(ops.matmul(x, p["disc.w1"]) + p["disc.b1"])
        return (ops.matmul(h, p["disc.w2"]) + p["disc.b2"]).reshape(x.shape[:-1])

    def __call__(self, x) -> Tensor:
        return ops.sigmoid(self.logits(x))


def adversarial_value(mapped, target, disc: Discriminator, frozen: bool = False) -> Tensor:
    """Mean log f_D(target) + mean log(1 - f_D(mapped)), over the given tokens.

    Inputs are (N, d) and (M, d) per-token embeddings, PAD already removed.
    """
    real = ops.mean(ops.log_sigmoid(disc.logits(target, frozen)))
    fake = ops.mean(ops.log_sigmoid(ops.scale(disc.logits(mapped, frozen), -1.0)))
    return real + fake


def generator_loss(mapped, disc: Discriminator) -> Tensor:
    """Non-saturating generator objective: mean -log f_D(mapped), discriminator frozen.

    Shares its fixed point with descending V_word but keeps a usable gradient
    while the discriminator is confident.
    """
    return ops.scale(ops.mean(ops.log_sigmoid(disc.logits(mapped, frozen=True))), -1.0)


def sentence_embedding(emb_table, ids) -> Tensor:
    """Token average over non-PAD positions, (B, d)."""
    ids = np.asarray(ids)
    mask = (ids != PAD).astype(np.float64)
    emb = ops.embedding(emb_table, ids)
    summed = ops.sum(emb * mask[..., None], axis=1)
    return summed * (1.0 / np.maximum(mask.sum(axis=1), 1.0))[:, None]


def align_loss(src_sent, tgt_sent, W) -> Tensor:
    """Batch mean of ||e(x) W - e(y)||_2 for sentence embeddings (B, d)."""
    diff = map_embeddings(src_sent, W) - tgt_sent
    return ops.mean(ops.l2_norm(diff, axis=-1))


def token_rows(emb_table, ids) -> np.ndarray:
    """Embedding rows for every non-PAD id, as a constant (N, d) array."""
    ids = np.asarray(ids)
    return emb_table.data[ids[ids != PAD]]


@dataclass
class DecoderInputBuilder:
    """Builds the (B, T_y, d) decoder input for one method."""

    method: str
    vocab: Vocabulary | None = None
    table: PhraseTable | None = None
    generator: MappingGenerator | None = None
    tau: float = 0.3
    raw_kernel: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise DecoderInputError(f"unknown decoder-input method {self.method!r}; choose from {METHODS}")
        if self.method in ("phrase", "word") and (self.table is None or self.vocab is None):
            raise DecoderInputError(f"method {self.method!r} needs a lookup table and a vocabulary")
        if self.method == "embed" and self.generator is None:
            raise DecoderInputError("method 'embed' needs a mapping generator")

    @classmethod
    def from_word_table(cls, words: WordTable, vocab: Vocabulary, **kw) -> "DecoderInputBuilder":
        return cls("word", vocab=vocab, table=words.as_phrase_table(), **kw)

    def lookup_ids(self, src: tuple[int, ...]) -> tuple[int, ...]:
        hit = self._cache.get(src)
        if hit is None:
            toks = self.vocab.decode(src)
            hit = self._cache[src] = tuple(self.vocab.encode(greedy_lookup(toks, self.table)))
        return hit

    def candidate_lengths(self, src_ids, src_len) -> np.ndarray:
        if self.method in ("copy", "embed"):
            return np.asarray(src_len)
        return np.array([len(self.lookup_ids(tuple(int(t) for t in row[:n])))
                         for row, n in zip(np.asarray(src_ids), src_len)])

    def candidates(self, emb_table, src_ids, src_len) -> tuple[Tensor, np.ndarray]:
        src_ids = np.asarray(src_ids)
        if self.method in ("copy", "embed"):
            cand = ops.embedding(emb_table, src_ids)
            if self.method == "embed":
                cand = self.generator(cand)
            return cand, np.asarray(src_len)
        looked = [self.lookup_ids(tuple(int(t) for t in row[:n])) for row, n in zip(src_ids, src_len)]
        ids, lens = pad(looked)
        if ids.shape[1] == 0:
            return Tensor(np.zeros((len(looked), 0, emb_table.shape[1]))), lens
        return ops.embedding(emb_table, ids), lens

    def build(self, emb_table, src_ids, src_len, tgt_len, width: int | None = None) -> tuple[Tensor, np.ndarray]:
        """Decoder input embeddings and a flag per row whose candidate was empty."""
        cand, tz = self.candidates(emb_table, src_ids, src_len)
        return soft_length_map(cand, tz, tgt_len, self.tau, normalize=not self.raw_kernel, width=width)
