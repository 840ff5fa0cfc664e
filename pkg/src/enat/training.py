"""Teacher training, sequence-level distillation, and NAT training with the combined loss."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Adam, Tape, Tensor, TrainingError, backward, no_grad, ops, use_tape
from .corpus import PAD, Batch, SentencePair, Vocabulary, make_batches, pad
from .decoder_input import (DecoderInputBuilder, Discriminator, MappingGenerator, adversarial_value,
                            align_loss, generator_loss, sentence_embedding, token_rows)
from .inference import LengthWindow, bleu, translate_corpus
from .transformer import ModelConfig, Transformer, batch_beam_search, masked_nll, shift_right

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mu: float = 0.1
    lam: float = 1.0
    epochs: int = 10
    max_tokens: int = 1024
    seed: int = 0
    lr: float = 2e-3
    warmup_steps: int = 200
    disc_lr: float = 1e-3
    d_steps: int = 1
    method: str = "copy"
    tau: float = 0.3
    raw_kernel: bool = False
    clip_norm: float = 5.0
    valid_every: int = 1
    map_lr_scale: float = 1.0

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lambda must be nonnegative")
        if self.epochs < 1 or self.max_tokens < 1 or self.d_steps < 0:
            raise ValueError("epochs, max_tokens must be >= 1 and d_steps >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LossReport:
    step: int
    l_neg: float
    l_align: float = 0.0
    l_adv: float = 0.0
    v_word: float = 0.0
    total: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _check(value: float, component: str, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {component} at step {step}")
    return value


# ---------------------------------------------------------------- teacher

def teacher_loss(model: Transformer, batch: Batch) -> Tensor:
    tgt_in, tgt_out = shift_right(batch.tgt, batch.tgt_len)
    enc = model.encode(batch.src)
    loss, _ = masked_nll(model.at_forward(tgt_in, enc), tgt_out, tgt_out != PAD)
    return loss


def validation_loss(model: Transformer, pairs: Sequence[SentencePair], max_tokens: int) -> float:
    total = count = 0.0
    with no_grad():
        for batch in make_batches(pairs, max_tokens, seed=0):
            n = float(batch.tgt_len.sum() + len(batch))
            total += teacher_loss(model, batch).item() * n
            count += n
    return total / count


def token_accuracy(model: Transformer, pairs: Sequence[SentencePair], max_tokens: int = 2048) -> float:
    """Teacher-forced next-token accuracy over targets plus EOS."""
    hit = count = 0
    with no_grad():
        for batch in make_batches(pairs, max_tokens, seed=0):
            tgt_in, tgt_out = shift_right(batch.tgt, batch.tgt_len)
            logits = model.at_forward(tgt_in, model.encode(batch.src)).data
            mask = tgt_out != PAD
            hit += int(((logits.argmax(-1) == tgt_out) & mask).sum())
            count += int(mask.sum())
    return hit / count


def train_teacher(train: Sequence[SentencePair], valid: Sequence[SentencePair], model_cfg: ModelConfig,
                  cfg: TrainConfig, on_epoch: Callable[[int, float], None] | None = None) -> Transformer:
    """Teacher-forced cross-entropy; keeps the parameters with the best validation loss."""
    if not train:
        raise ValueError("teacher training needs a nonempty corpus")
    model = Transformer(model_cfg, seed=cfg.seed)
    opt = Adam(model.params, lr=cfg.lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm)
    best, best_loss = None, math.inf
    tape = Tape()
    with use_tape(tape):
        for epoch in range(cfg.epochs):
            for batch in make_batches(train, cfg.max_tokens, seed=cfg.seed * 1000 + epoch):
                loss = teacher_loss(model, batch)
                _check(loss.item(), "teacher loss", opt.state.step + 1)
                backward(loss, tape)
                opt.step()
            vloss = validation_loss(model, valid or train, cfg.max_tokens)
            log.info("teacher epoch %d valid loss %.4f", epoch + 1, vloss)
            if on_epoch:
                on_epoch(epoch + 1, vloss)
            if vloss < best_loss:
                best_loss = vloss
                best = {k: v.data.copy() for k, v in model.params.items()}
    for k, v in best.items():
        model.params[k].data = v
    return model


# ---------------------------------------------------------------- distillation

@dataclass
class DistilledCorpus:
    pairs: list[SentencePair]
    originals: list[SentencePair]
    truncated: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)


def distill(teacher: Transformer, pairs: Sequence[SentencePair], beam: int = 4,
            chunk: int = 256) -> DistilledCorpus:
    """Replace each target with the teacher's beam-search translation."""
    out, flags = [], []
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        for p, (toks, _, trunc) in zip(part, batch_beam_search(teacher, [p.src for p in part], beam)):
            if not toks:  # an empty output cannot form a pair; keep the original target
                toks, trunc = list(p.tgt), True
            out.append(SentencePair(p.src, tuple(toks)))
            flags.append(trunc)
    return DistilledCorpus(out, list(pairs), flags)


# ---------------------------------------------------------------- NAT

class NATTrainer:
    """Student, mapping generator, discriminator, and their two disjoint optimizers."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, vocab: Vocabulary | None = None,
                 table=None):
        self.cfg = cfg
        self.model = Transformer(model_cfg, seed=cfg.seed)
        d = model_cfg.d_model
        self.generator = MappingGenerator(d) if cfg.method == "embed" else None
        self.discriminator = Discriminator(d, seed=cfg.seed + 1) if cfg.method == "embed" else None
        self.builder = DecoderInputBuilder(cfg.method, vocab=vocab, table=table, generator=self.generator,
                                           tau=cfg.tau, raw_kernel=cfg.raw_kernel)
        main = dict(self.model.params)
        if self.generator is not None:
            main.update(self.generator.params)
        self.main_opt = Adam(main, lr=cfg.lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm,
                             lr_scale={"gen.W": cfg.map_lr_scale})
        self.disc_opt = (Adam(self.discriminator.params, lr=cfg.disc_lr, clip_norm=cfg.clip_norm)
                         if self.discriminator is not None else None)
        self.tape = Tape()
        self.steps = 0
        self.alpha = 1.0

    @property
    def adversarial(self) -> bool:
        return self.discriminator is not None and self.cfg.lam > 0

    def _word_embeddings(self, batch: Batch) -> tuple[Tensor, Tensor]:
        """Mapped source tokens and target tokens, embeddings held constant."""
        emb = self.model.params["emb"]
        return Tensor(token_rows(emb, batch.src)), Tensor(token_rows(emb, batch.tgt))

    def discriminator_step(self, batch: Batch) -> float:
        """One ascent step on V_word; only discriminator parameters move."""
        src_rows, tgt_rows = self._word_embeddings(batch)
        with use_tape(self.tape):
            v = adversarial_value(self.generator(src_rows, detach=True), tgt_rows, self.discriminator)
            _check(v.item(), "V_word", self.steps + 1)
            backward(ops.scale(v, -1.0), self.tape)
        self.disc_opt.step()
        return v.item()

    def losses(self, batch: Batch) -> tuple[Tensor, Tensor | None, Tensor | None]:
        emb = self.model.params["emb"]
        enc = self.model.encode(batch.src)
        z, _ = self.builder.build(emb, batch.src, batch.src_len, batch.tgt_len, batch.tgt.shape[1])
        logits = self.model.nat_forward(z, enc, batch.tgt_mask)
        l_neg, _ = masked_nll(logits, batch.tgt, batch.tgt_mask)
        l_align = l_adv = None
        if self.generator is not None:
            # auxiliary losses train W only; embeddings are constants here
            if self.cfg.mu > 0:
                const = Tensor(emb.data)
                l_align = align_loss(sentence_embedding(const, batch.src),
                                     sentence_embedding(const, batch.tgt), self.generator.W)
            if self.adversarial:
                src_rows, _ = self._word_embeddings(batch)
                l_adv = generator_loss(self.generator(src_rows), self.discriminator)
        return l_neg, l_align, l_adv

    def step(self, batch: Batch) -> LossReport:
        """Discriminator ascent step(s), then one joint descent step on the total loss."""
        v_word = 0.0
        if self.adversarial:
            for _ in range(self.cfg.d_steps):
                v_word = self.discriminator_step(batch)
        self.steps += 1
        with use_tape(self.tape):
            l_neg, l_align, l_adv = self.losses(batch)
            total = l_neg
            if l_align is not None:
                total = total + ops.scale(l_align, self.cfg.mu)
            if l_adv is not None:
                total = total + ops.scale(l_adv, self.cfg.lam)
            report = LossReport(self.steps, _check(l_neg.item(), "L_neg", self.steps),
                                _check(l_align.item(), "L_align", self.steps) if l_align is not None else 0.0,
                                _check(l_adv.item(), "L_adv", self.steps) if l_adv is not None else 0.0,
                                v_word)
            report.total = report.l_neg + self.cfg.mu * report.l_align + self.cfg.lam * report.l_adv
            backward(total, self.tape)
        self.main_opt.step()
        return report

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {k: v.data.copy() for k, v in self.model.params.items()}
        if self.generator is not None:
            snap["gen.W"] = self.generator.W.data.copy()
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            if k == "gen.W":
                self.generator.W.data = v.copy()
            else:
                self.model.params[k].data = v.copy()

    def validate(self, valid: Sequence[SentencePair], vocab: Vocabulary, alpha: float = 1.0) -> float:
        hyps = translate_corpus([p.src for p in valid], self.model, self.builder, LengthWindow(alpha, 0))
        return bleu([vocab.decode(h) for h in hyps], [vocab.decode(p.tgt) for p in valid])


def estimate_alpha(builder: DecoderInputBuilder, pairs: Sequence[SentencePair]) -> float:
    """Mean ratio of target length to the method's candidate length over ``pairs``."""
    src, src_len = pad([p.src for p in pairs])
    tz = np.maximum(builder.candidate_lengths(src, src_len), 1)
    return float(np.mean([len(p.tgt) for p in pairs] / tz))


def gan_alternation_step(trainer: NATTrainer, batch: Batch) -> LossReport:
    return trainer.step(batch)


def train_nat(train: Sequence[SentencePair], valid: Sequence[SentencePair], model_cfg: ModelConfig,
              cfg: TrainConfig, vocab: Vocabulary, table=None, alpha: float | None = None,
              on_report: Callable[[LossReport], None] | None = None) -> tuple[NATTrainer, list[LossReport]]:
    """Train a student; keeps the epoch with the best greedy (B=0) validation BLEU."""
    trainer = NATTrainer(model_cfg, cfg, vocab, table)
    if alpha is None:
        alpha = estimate_alpha(trainer.builder, train)
    trainer.alpha = alpha
    reports: list[LossReport] = []
    best, best_bleu = None, -1.0
    for epoch in range(cfg.epochs):
        for batch in make_batches(train, cfg.max_tokens, seed=cfg.seed * 1000 + epoch):
            rep = trainer.step(batch)
            reports.append(rep)
            if on_report:
                on_report(rep)
        if valid and ((epoch + 1) % cfg.valid_every == 0 or epoch + 1 == cfg.epochs):
            score = trainer.validate(valid, vocab, alpha)
            log.info("nat[%s] epoch %d valid BLEU %.2f", cfg.method, epoch + 1, score)
            if score > best_bleu:
                best_bleu, best = score, trainer.snapshot()
    if best is not None:
        trainer.restore(best)
    return trainer, reports
