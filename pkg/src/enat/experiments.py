"""The desk-scale toy experiment: cipher corpus, teacher, distillation, tables, students."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import CipherLanguage, SentencePair, Vocabulary, build_vocab, encode_pairs, generate_toy
from .inference import LengthWindow, bleu, bleu_by_length_bucket, translate_corpus
from .phrase_table import PhraseTable, build_phrase_table, extract_word_table, greedy_lookup
from .training import NATTrainer, TrainConfig, distill, train_nat, train_teacher
from .transformer import ModelConfig, Transformer, batch_beam_search

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskPreset:
    """Budget shared by every student so methods are compared at equal cost.

    Three epochs is short of convergence on purpose: given enough updates every
    input method solves the cipher, and what remains to compare is how quickly
    each one gets there.
    """

    teacher_epochs: int = 20
    nat_epochs: int = 3
    lr: float = 3e-3
    warmup_steps: int = 150
    max_tokens: int = 1024
    mu: float = 1.0
    lam: float = 1.0
    map_lr_scale: float = 10.0
    beam: int = 4
    max_phrase_len: int = 3


@dataclass
class ToySetup:
    lang: CipherLanguage
    vocab: Vocabulary
    train: list[SentencePair]
    valid: list[SentencePair]
    test: list[SentencePair]
    student_train: list[SentencePair]
    table: PhraseTable
    word_table: PhraseTable
    teacher: Transformer | None = None
    preset: DeskPreset = field(default_factory=DeskPreset)
    timings: dict = field(default_factory=dict)

    @property
    def references(self) -> list[list[str]]:
        return [self.vocab.decode(p.tgt) for p in self.test]

    def text(self, pairs) -> list[tuple[list[str], list[str]]]:
        return [(self.vocab.decode(p.src), self.vocab.decode(p.tgt)) for p in pairs]

    def lookup_bleu(self, table: PhraseTable) -> float:
        hyps = [greedy_lookup(self.vocab.decode(p.src), table) for p in self.test]
        return bleu(hyps, self.references)

    def teacher_bleu(self) -> float:
        out = batch_beam_search(self.teacher, [p.src for p in self.test], self.preset.beam)
        return bleu([self.vocab.decode(toks) for toks, _, _ in out], self.references)


def prepare_toy(n_train: int = 5000, n_valid: int = 200, n_test: int = 500, seed: int = 0,
                max_len: int = 12, with_teacher: bool = True, preset: DeskPreset = DeskPreset()) -> ToySetup:
    """Corpus, vocabulary, teacher, distilled student corpus and lookup tables.

    Without a teacher the students train on the references directly, which for
    a deterministic cipher is what distillation approximates anyway.
    """
    times = {}
    tr, va, te, lang = generate_toy(n_train, n_valid, n_test, seed=seed, max_len=max_len)
    vocab = build_vocab(tr + va + te)
    train, valid, test = (encode_pairs(c, vocab) for c in (tr, va, te))
    teacher = None
    student_train = train
    if with_teacher:
        t0 = time.process_time()
        cfg = TrainConfig(epochs=preset.teacher_epochs, lr=preset.lr, warmup_steps=preset.warmup_steps,
                          max_tokens=preset.max_tokens, seed=seed)
        teacher = train_teacher(train, valid, ModelConfig(vocab_size=len(vocab)), cfg)
        times["teacher"] = time.process_time() - t0
        t0 = time.process_time()
        student_train = distill(teacher, train, beam=preset.beam).pairs
        times["distill"] = time.process_time() - t0
    t0 = time.process_time()
    text = [(vocab.decode(p.src), vocab.decode(p.tgt)) for p in student_train]
    table = build_phrase_table(text, max_len=preset.max_phrase_len)
    times["tables"] = time.process_time() - t0
    return ToySetup(lang, vocab, train, valid, test, student_train, table,
                    extract_word_table(table).as_phrase_table(), teacher, preset, times)


@dataclass
class StudentRun:
    method: str
    seed: int
    trainer: NATTrainer
    bleu_b0: float
    bleu_b4: float | None
    hyps_b0: list[list[str]]
    cpu_seconds: float

    def buckets(self, references, edges) -> list[dict]:
        return bleu_by_length_bucket(self.hyps_b0, references, edges)


def run_student(setup: ToySetup, method: str, seed: int, mu: float | None = None, lam: float | None = None,
                rescore: bool = True) -> StudentRun:
    """Train one student under the preset budget and score it on the test split."""
    p = setup.preset
    cfg = TrainConfig(method="phrase" if method == "word" else method, epochs=p.nat_epochs, lr=p.lr,
                      warmup_steps=p.warmup_steps, max_tokens=p.max_tokens, seed=seed,
                      mu=p.mu if mu is None else mu, lam=p.lam if lam is None else lam,
                      map_lr_scale=p.map_lr_scale)
    table = setup.word_table if method == "word" else setup.table
    model_cfg = ModelConfig(vocab_size=len(setup.vocab), positional_attention=True)
    t0 = time.process_time()
    trainer, _ = train_nat(setup.student_train, setup.valid, model_cfg, cfg, setup.vocab, table)
    refs = setup.references
    sources = [q.src for q in setup.test]
    hyps0 = [setup.vocab.decode(h) for h in
             translate_corpus(sources, trainer.model, trainer.builder, LengthWindow(trainer.alpha, 0))]
    b4 = None
    if rescore and setup.teacher is not None:
        hyps4 = translate_corpus(sources, trainer.model, trainer.builder, LengthWindow(trainer.alpha, 4),
                                 setup.teacher)
        b4 = bleu([setup.vocab.decode(h) for h in hyps4], refs)
    run = StudentRun(method, seed, trainer, bleu(hyps0, refs), b4, hyps0, time.process_time() - t0)
    log.info("student %s seed %d: B0 %.2f B4 %s", method, seed, run.bleu_b0, b4)
    return run


def median(values) -> float:
    return float(np.median(list(values)))


def with_budget(preset: DeskPreset, **changes) -> DeskPreset:
    return replace(preset, **changes)
