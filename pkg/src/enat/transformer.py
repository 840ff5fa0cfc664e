"""Transformer encoder with an autoregressive (teacher) or non-autoregressive (student) decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .corpus import BOS, EOS, PAD, UNK

NEG_INF = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 2
    d_ff: int = 128
    dropout: float = 0.0
    max_positions: int = 128
    positional_attention: bool = False  # student decoders turn this on

    def __post_init__(self):
        for name in ("vocab_size", "num_layers", "d_model", "num_heads", "d_ff", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderState:
    hidden: Tensor        # (B, S, d)
    mask: np.ndarray      # (B, S), 1.0 on real tokens

    @property
    def key_bias(self) -> np.ndarray:
        return ((1.0 - self.mask) * NEG_INF)[:, None, None, :]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {
        "emb": rng.normal(0.0, d ** -0.5, (cfg.vocab_size, d)),
        "pos": rng.normal(0.0, d ** -0.5, (cfg.max_positions, d)),
    }

    def linear(name, n_in, n_out):
        p[f"{name}.w"] = rng.normal(0.0, n_in ** -0.5, (n_in, n_out))
        p[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def attention(name):
        for proj in ("q", "k", "v", "o"):
            linear(f"{name}.{proj}", d, d)

    def block(name, attns):
        for a in attns:
            norm(f"{name}.ln_{a}")
            attention(f"{name}.{a}")
        norm(f"{name}.ln_ff")
        linear(f"{name}.ff1", d, f)
        linear(f"{name}.ff2", f, d)

    dec_attns = ("self", "pos", "cross") if cfg.positional_attention else ("self", "cross")
    for i in range(cfg.num_layers):
        block(f"enc.{i}", ("self",))
        block(f"dec.{i}", dec_attns)
    norm("enc.ln_out")
    norm("dec.ln_out")
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class Transformer:
    """Parameters plus forward passes.

    ``decoder_passes`` counts decoder stack invocations; ``attention_hook``,
    when set, receives ``(name, weights)`` for every attention softmax.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.decoder_passes = 0
        self.attention_hook: Callable[[str, np.ndarray], None] | None = None
        self.dropout_rng: np.random.Generator | None = None

    # -- building blocks

    def _linear(self, x, name):
        return ops.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _norm(self, x, name):
        return ops.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], 1e-6)

    def _drop(self, x):
        if self.cfg.dropout > 0 and self.dropout_rng is not None:
            return ops.dropout(x, self.cfg.dropout, self.dropout_rng)
        return x

    def _split(self, x, batch, length):
        h = self.cfg.num_heads
        return x.reshape(batch, length, h, self.cfg.d_model // h).transpose(0, 2, 1, 3)

    def _attention(self, name, q_in, k_in, v_in, bias):
        """Multi-head attention; ``q_in``/``k_in`` may be unbatched (T, d)."""
        d = self.cfg.d_model
        q = self._linear(q_in, f"{name}.q")
        k = self._linear(k_in, f"{name}.k")
        v = self._linear(v_in, f"{name}.v")
        bq = q.shape[0] if q.ndim == 3 else 1
        bk = k.shape[0] if k.ndim == 3 else 1
        tq, tk = q.shape[-2], k.shape[-2]
        q = self._split(q.reshape(bq, tq, d), bq, tq)
        k = self._split(k.reshape(bk, tk, d), bk, tk)
        v = self._split(v, v.shape[0], v.shape[1])
        scores = ops.scale(ops.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(d // self.cfg.num_heads))
        if bias is not None:
            scores = scores + bias
        weights = ops.softmax(scores, axis=-1)
        if self.attention_hook is not None:
            self.attention_hook(name, weights.data)
        out = ops.matmul(self._drop(weights), v)
        b, tq = out.shape[0], out.shape[2]
        out = out.transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self._linear(out, f"{name}.o")

    def _ffn(self, x, name):
        return self._linear(ops.relu(self._linear(x, f"{name}.ff1")), f"{name}.ff2")

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token ids outside [0, {self.cfg.vocab_size})")
        if ids.shape[-1] > self.cfg.max_positions:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_positions={self.cfg.max_positions}")
        return ids

    def embed(self, ids) -> Tensor:
        return ops.embedding(self.params["emb"], self._check_ids(ids))

    def positions(self, length: int) -> Tensor:
        if length > self.cfg.max_positions:
            raise ValueError(f"length {length} exceeds max_positions={self.cfg.max_positions}")
        return self.params["pos"][:length]

    def project(self, h) -> Tensor:
        """Output logits through the tied embedding table."""
        return ops.matmul(h, self.params["emb"].transpose())

    # -- passes

    def encode(self, src_ids) -> EncoderState:
        src_ids = self._check_ids(src_ids)
        mask = (src_ids != PAD).astype(np.float64)
        x = self._drop(self.embed(src_ids) + self.positions(src_ids.shape[1]))
        bias = ((1.0 - mask) * NEG_INF)[:, None, None, :]
        for i in range(self.cfg.num_layers):
            n = f"enc.{i}"
            h = self._norm(x, f"{n}.ln_self")
            x = x + self._drop(self._attention(f"{n}.self", h, h, h, bias))
            x = x + self._drop(self._ffn(self._norm(x, f"{n}.ln_ff"), n))
        return EncoderState(self._norm(x, "enc.ln_out"), mask)

    def _decode(self, x, enc: EncoderState, self_bias) -> Tensor:
        self.decoder_passes += 1
        length = x.shape[1]
        for i in range(self.cfg.num_layers):
            n = f"dec.{i}"
            h = self._norm(x, f"{n}.ln_self")
            x = x + self._drop(self._attention(f"{n}.self", h, h, h, self_bias))
            if self.cfg.positional_attention:
                h = self._norm(x, f"{n}.ln_pos")
                pos = self.positions(length)
                x = x + self._drop(self._attention(f"{n}.pos", pos, pos, h, self_bias))
            h = self._norm(x, f"{n}.ln_cross")
            x = x + self._drop(self._attention(f"{n}.cross", h, enc.hidden, enc.hidden, enc.key_bias))
            x = x + self._drop(self._ffn(self._norm(x, f"{n}.ln_ff"), n))
        return self.project(self._norm(x, "dec.ln_out"))

    def at_forward(self, tgt_in, enc: EncoderState) -> Tensor:
        """Teacher-forced logits; ``tgt_in`` is the BOS-shifted target."""
        tgt_in = self._check_ids(tgt_in)
        t = tgt_in.shape[1]
        causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None]
        pad_bias = ((tgt_in == PAD) * NEG_INF)[:, None, None, :].astype(np.float64)
        x = self._drop(self.embed(tgt_in) + self.positions(t))
        return self._decode(x, enc, causal + pad_bias)

    def nat_forward(self, z: Tensor, enc: EncoderState, tgt_mask=None) -> Tensor:
        """All target positions from decoder-input embeddings ``z`` (B, T, d) in one pass."""
        b, t, d = z.shape
        if d != self.cfg.d_model:
            raise ValueError(f"decoder input width {d} != d_model {self.cfg.d_model}")
        if tgt_mask is None:
            tgt_mask = np.ones((b, t))
        bias = ((1.0 - np.asarray(tgt_mask, dtype=np.float64)) * NEG_INF)[:, None, None, :]
        x = self._drop(z + self.positions(t))
        return self._decode(x, enc, bias)


# ---------------------------------------------------------------- losses

def masked_nll(logits: Tensor, targets, mask) -> tuple[Tensor, float]:
    """Token-mean negative log-likelihood over non-PAD positions.

    Returns the loss and the number of counted tokens.
    """
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.take_last(logp, targets)
    mask = np.asarray(mask, dtype=np.float64)
    n = float(mask.sum())
    return ops.scale(ops.sum(picked * mask), -1.0 / max(n, 1.0)), n


def shift_right(tgt: np.ndarray, tgt_len) -> tuple[np.ndarray, np.ndarray]:
    """(BOS + y, y + EOS) padded to width T+1."""
    b, t = tgt.shape
    tgt_in = np.full((b, t + 1), PAD, dtype=np.int64)
    tgt_out = np.full((b, t + 1), PAD, dtype=np.int64)
    tgt_in[:, 0] = BOS
    tgt_in[:, 1:] = tgt
    tgt_out[:, :t] = tgt
    for i, n in enumerate(tgt_len):
        tgt_in[i, n + 1:] = PAD
        tgt_out[i, n] = EOS
    return tgt_in, tgt_out


# ---------------------------------------------------------------- beam search

def _select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best flattened scores; ties go to the lower index."""
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    order = order[np.isfinite(flat[order])]
    return order[:k]


def beam_search(step_fn: Callable[[list[list[int]]], np.ndarray], beam_size: int, max_len: int,
                eos: int = EOS, banned: Sequence[int] = ()) -> tuple[list[int], float]:
    """Length-normalized beam search.

    ``step_fn`` maps a list of prefixes (BOS excluded) to next-token log-prob
    rows.  EOS is forced after ``max_len`` generated tokens.  A finished
    hypothesis scores its summed log-prob divided by its length counting EOS.
    Returns (tokens without EOS, score).
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len + 1):
        logp = np.array(step_fn([h for h, _ in live]), dtype=np.float64)
        if banned:
            logp[:, list(banned)] = -np.inf
        if step == max_len:
            finished.extend((h, (s + row[eos]) / (len(h) + 1)) for (h, s), row in zip(live, logp))
            break
        totals = np.array([s for _, s in live])[:, None] + logp
        vocab = logp.shape[1]
        nxt = []
        for idx in _select(totals, beam_size):
            k, tok = divmod(int(idx), vocab)
            base, total = live[k][0], float(totals[k, tok])
            if tok == eos:
                finished.append((base, total / (len(base) + 1)))
            else:
                nxt.append((base + [tok], total))
        live = nxt
        if not live:
            break
    return _best(finished)


def _best(finished):
    # ties: shorter first, then lexicographic
    best = min(finished, key=lambda c: (-c[1], len(c[0]), c[0]))
    return best[0], best[1]


SPECIAL_BANS = (PAD, BOS, UNK)


def decode_step_fn(model: Transformer, src_ids: np.ndarray):
    """Step function over one source sentence for :func:`beam_search`."""
    from .autodiff import no_grad

    with no_grad():
        enc = model.encode(np.asarray(src_ids)[None])

    def step(prefixes):
        rows = len(prefixes)
        t = len(prefixes[0]) + 1
        tgt_in = np.full((rows, t), BOS, dtype=np.int64)
        for r, p in enumerate(prefixes):
            tgt_in[r, 1:] = p
        state = EncoderState(Tensor(np.repeat(enc.hidden.data, rows, axis=0)), np.repeat(enc.mask, rows, axis=0))
        with no_grad():
            logits = model.at_forward(tgt_in, state)
        return ops.log_softmax(logits[:, -1, :]).data

    return step


def translate_beam(model: Transformer, src_ids, beam_size: int = 4, max_len: int | None = None):
    max_len = max_len if max_len is not None else min(2 * len(src_ids) + 10, model.cfg.max_positions - 1)
    return beam_search(decode_step_fn(model, src_ids), beam_size, max_len, EOS, SPECIAL_BANS)


def batch_beam_search(model: Transformer, sources: Sequence[Sequence[int]], beam_size: int = 4,
                      max_len: Callable[[int], int] | None = None) -> list[tuple[list[int], float, bool]]:
    """:func:`beam_search` over many sentences at once, same selection rule.

    Returns (tokens, score, truncated) per source; ``truncated`` marks outputs
    whose EOS was forced at the length limit.
    """
    from .autodiff import no_grad
    from .corpus import pad

    if max_len is None:
        max_len = lambda n: min(2 * n + 10, model.cfg.max_positions - 1)  # noqa: E731
    n = len(sources)
    src, _ = pad(sources)
    with no_grad():
        enc = model.encode(src)
    limits = [max_len(len(s)) for s in sources]
    live = {i: [([], 0.0)] for i in range(n)}
    finished: dict[int, list] = {i: [] for i in range(n)}
    forced: dict[int, bool] = {i: False for i in range(n)}
    step = 0
    while live:
        rows, owner = [], []
        for i, hyps in live.items():
            for h, _ in hyps:
                rows.append(h)
                owner.append(i)
        tgt_in = np.full((len(rows), step + 1), BOS, dtype=np.int64)
        for r, h in enumerate(rows):
            tgt_in[r, 1:] = h
        owner_arr = np.array(owner)
        state = EncoderState(Tensor(enc.hidden.data[owner_arr]), enc.mask[owner_arr])
        with no_grad():
            logits = model.at_forward(tgt_in, state)
        logp = ops.log_softmax(logits[:, -1, :]).data.copy()
        logp[:, list(SPECIAL_BANS)] = -np.inf
        vocab = logp.shape[1]
        r = 0
        nxt = {}
        for i, hyps in live.items():
            block = logp[r:r + len(hyps)]
            r += len(hyps)
            if step == limits[i]:
                finished[i].extend((h, (s + row[EOS]) / (len(h) + 1)) for (h, s), row in zip(hyps, block))
                forced[i] = True
                continue
            totals = np.array([s for _, s in hyps])[:, None] + block
            new = []
            for idx in _select(totals, beam_size):
                k, tok = divmod(int(idx), vocab)
                base, total = hyps[k][0], float(totals[k, tok])
                if tok == EOS:
                    finished[i].append((base, total / (len(base) + 1)))
                else:
                    new.append((base + [tok], total))
            if new:
                nxt[i] = new
        live = nxt
        step += 1
    out = []
    for i in range(n):
        toks, score = _best(finished[i])
        out.append((toks, score, forced[i] and len(toks) == limits[i]))
    return out


def greedy_decode(model: Transformer, sources: Sequence[Sequence[int]], max_len=None):
    """Batched stepwise-argmax decoding; one decoder pass per generated position."""
    return [(t, s) for t, s, _ in batch_beam_search(model, sources, 1, max_len)]
