"""Command-line entry point: ``enat <subcommand> [flags]``.

Settings resolve as defaults, then ``--config`` file, then explicit flags.
Bad flags exit with status 2, pipeline failures with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import report
from .autodiff import TrainingError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_value, resolve
from .corpus import (CorpusError, Vocabulary, build_vocab, encode_pairs, generate_toy, read_lines,
                     read_parallel, write_lines, write_tsv)
from .decoder_input import DecoderInputBuilder, DecoderInputError, MappingGenerator
from .inference import (ConfigurationError, bleu, bleu_by_length_bucket, measure_latency, translate_corpus)
from .phrase_table import (PhraseTable, PhraseTableError, build_phrase_table, extract_word_table,
                           greedy_lookup, parse_moses_table)
from .training import TrainConfig, distill, train_nat, train_teacher
from .transformer import ModelConfig, Transformer, batch_beam_search

log = logging.getLogger("enat")

SUBCOMMANDS = ("gen-toy", "build-table", "lookup", "extract-word-table", "train-teacher", "distill",
               "train-nat", "translate", "eval", "latency")

# flag spellings that differ from the field name
_FLAG_NAMES = {"lam": "--lambda", "window_B": "--window-B"}


class UsageError(Exception):
    """A subcommand was invoked without an input it needs."""


class PipelineError(Exception):
    """A pipeline stage could not complete."""


def _flag(name: str) -> str:
    return _FLAG_NAMES.get(name, "--" + name.replace("_", "-"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enat", description="Non-autoregressive translation with enhanced decoder inputs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    docs = RunConfig.docs()
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for f in fields(RunConfig):
            if f.type in (bool, "bool"):
                p.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=docs[f.name])
            else:
                p.add_argument(_flag(f.name), dest=f.name, default=argparse.SUPPRESS, help=docs[f.name],
                               type=lambda s, n=f.name: parse_value(n, s))
    return parser


def _need(cfg: RunConfig, *names: str) -> None:
    missing = [_flag(n) for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError(f"missing required {', '.join(missing)}")


# ---------------------------------------------------------------- checkpoints

def _save_model(path, params: dict, vocab: Vocabulary, model_cfg: ModelConfig, **meta) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, params, meta={"vocab": vocab.itos[4:], "model": asdict(model_cfg), **meta})


def _load_model(path, kind: str) -> tuple[Transformer, Vocabulary, dict, dict]:
    params, _, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise PipelineError(f"{path} holds a {meta.get('kind', 'unknown')} checkpoint, expected {kind}")
    extra = {k: params.pop(k) for k in [k for k in params if k.startswith("gen.")]}
    model = Transformer(ModelConfig(**meta["model"]), params)
    return model, Vocabulary(meta["vocab"]), meta, extra


def _load_table(cfg: RunConfig) -> PhraseTable:
    return parse_moses_table(cfg.table) if cfg.moses else PhraseTable.load(cfg.table)


def _builder(cfg: RunConfig, method: str, vocab: Vocabulary, extra: dict, meta: dict) -> DecoderInputBuilder:
    table = None
    if method in ("phrase", "word"):
        if cfg.table is None:
            raise UsageError(f"decoder input {method!r} needs --table")
        table = _load_table(cfg)
        if method == "word":
            table = extract_word_table(table).as_phrase_table()
    gen = MappingGenerator(extra["gen.W"].shape[0], extra["gen.W"].data) if "gen.W" in extra else None
    return DecoderInputBuilder(method, vocab=vocab, table=table, generator=gen,
                               tau=meta.get("tau", cfg.tau), raw_kernel=meta.get("raw_kernel", cfg.raw_kernel))


# ---------------------------------------------------------------- subcommands

def cmd_gen_toy(cfg: RunConfig) -> dict:
    _need(cfg, "out")
    train, valid, test, lang = generate_toy(cfg.pairs, cfg.valid_pairs, cfg.test_pairs, seed=cfg.seed,
                                            min_len=cfg.min_len, max_len=cfg.max_len, swap=cfg.swap)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in (("train", train), ("valid", valid), ("test", test)):
        write_tsv(out / f"{name}.tsv", pairs)
    lexicon = sorted(lang.lexicon.items())
    (out / "lexicon.tsv").write_text("".join(f"{s}\t{t}\n" for s, t in lexicon), encoding="utf-8")
    return {"train": len(train), "valid": len(valid), "test": len(test), "out": str(out)}


def cmd_build_table(cfg: RunConfig) -> dict:
    _need(cfg, "corpus", "out")
    table = build_phrase_table(read_parallel(tsv_path=cfg.corpus), cfg.ibm_iterations, cfg.max_phrase_len)
    table.save(cfg.out)
    return {"entries": len(table), "out": cfg.out}


def cmd_extract_word_table(cfg: RunConfig) -> dict:
    _need(cfg, "table", "out")
    words = extract_word_table(_load_table(cfg))
    words.as_phrase_table().save(cfg.out)
    return {"entries": len(words), "out": cfg.out}


def cmd_lookup(cfg: RunConfig) -> dict:
    _need(cfg, "table", "input")
    table = _load_table(cfg)
    out = [greedy_lookup(s, table) for s in read_lines(cfg.input)]
    _emit_lines(cfg, out)
    return {"sentences": len(out)}


def cmd_train_teacher(cfg: RunConfig) -> dict:
    _need(cfg, "train", "out")
    train_text = read_parallel(tsv_path=cfg.train)
    valid_text = read_parallel(tsv_path=cfg.valid) if cfg.valid else []
    vocab = build_vocab(train_text + valid_text)
    model_cfg = cfg.model_config(len(vocab), positional_attention=False)
    history = []
    teacher = train_teacher(encode_pairs(train_text, vocab), encode_pairs(valid_text, vocab), model_cfg,
                            cfg.train_config(), on_epoch=lambda e, loss: history.append({"epoch": e, "valid_loss": loss}))
    _save_model(cfg.out, teacher.params, vocab, model_cfg, kind="teacher")
    if cfg.loss_log:
        Path(cfg.loss_log).write_text("".join(json.dumps(h) + "\n" for h in history), encoding="utf-8")
    return {"epochs": len(history), "best_valid_loss": min(h["valid_loss"] for h in history), "out": cfg.out}


def cmd_distill(cfg: RunConfig) -> dict:
    _need(cfg, "teacher", "corpus", "out")
    teacher, vocab, _, _ = _load_model(cfg.teacher, "teacher")
    pairs = encode_pairs(read_parallel(tsv_path=cfg.corpus), vocab)
    result = distill(teacher, pairs, beam=cfg.beam)
    write_tsv(cfg.out, [(vocab.decode(p.src), vocab.decode(p.tgt)) for p in result.pairs])
    changed = sum(a.tgt != b.tgt for a, b in zip(result.pairs, result.originals))
    return {"pairs": len(result), "changed": changed, "truncated": sum(result.truncated), "out": cfg.out}


def cmd_train_nat(cfg: RunConfig) -> dict:
    _need(cfg, "train", "out")
    method = cfg.decoder_input
    train_text = read_parallel(tsv_path=cfg.train)
    valid_text = read_parallel(tsv_path=cfg.valid) if cfg.valid else []
    if cfg.teacher:  # share the teacher's vocabulary so it can rescore
        _, vocab, _, _ = _load_model(cfg.teacher, "teacher")
    else:
        vocab = build_vocab(train_text + valid_text)
    table = None
    if method in ("phrase", "word"):
        if cfg.table is None:
            raise UsageError(f"decoder input {method!r} needs --table")
        table = _load_table(cfg)
        if method == "word":
            table = extract_word_table(table).as_phrase_table()
    tcfg = cfg.train_config()
    if method == "word":
        tcfg.method = "phrase"
    model_cfg = cfg.model_config(len(vocab), positional_attention=True)
    loss_log = Path(cfg.loss_log or Path(cfg.out).with_suffix(".losses.jsonl"))
    loss_log.parent.mkdir(parents=True, exist_ok=True)
    records = []
    with loss_log.open("w", encoding="utf-8") as fh:
        def on_report(rep):
            records.append(json.loads(rep.to_json()))
            fh.write(rep.to_json() + "\n")

        trainer, _ = train_nat(encode_pairs(train_text, vocab), encode_pairs(valid_text, vocab), model_cfg,
                               tcfg, vocab, table, alpha=cfg.alpha, on_report=on_report)
    params = dict(trainer.model.params)
    if trainer.generator is not None:
        params.update(trainer.generator.params)
    _save_model(cfg.out, params, vocab, model_cfg, kind="student", method=method, tau=cfg.tau,
                raw_kernel=cfg.raw_kernel, alpha=trainer.alpha)
    summary = {"steps": len(records), "alpha": trainer.alpha, "loss_log": str(loss_log), "out": cfg.out}
    if cfg.report_dir:
        summary["figure"] = str(report.plot_losses(records, Path(cfg.report_dir) / "losses.png",
                                                   f"{method} student"))
    return summary


def _student(cfg: RunConfig):
    _need(cfg, "student")
    student, vocab, meta, extra = _load_model(cfg.student, "student")
    builder = _builder(cfg, meta["method"], vocab, extra, meta)
    teacher = None
    if cfg.teacher:
        teacher, tvocab, _, _ = _load_model(cfg.teacher, "teacher")
        if tvocab.itos != vocab.itos:
            raise PipelineError("student and teacher vocabularies differ")
    if cfg.window_B >= 1 and teacher is None:
        raise UsageError("--window-B >= 1 rescoring needs --teacher")
    return student, vocab, meta, builder, teacher


def cmd_translate(cfg: RunConfig) -> dict:
    _need(cfg, "input")
    student, vocab, meta, builder, teacher = _student(cfg)
    sources = [vocab.encode(s) for s in read_lines(cfg.input)]
    hyps = translate_corpus(sources, student, builder, cfg.window(meta["alpha"]), teacher)
    _emit_lines(cfg, [vocab.decode(h) for h in hyps])
    return {"sentences": len(hyps)}


def cmd_eval(cfg: RunConfig) -> dict:
    _need(cfg, "test")
    test = read_parallel(tsv_path=cfg.test)
    refs = [t for _, t in test]
    edges = cfg.bucket_edges()
    summary: dict = {}
    tables = {}
    if cfg.student:
        student, vocab, meta, builder, teacher = _student(cfg)
        window = cfg.window(meta["alpha"])
        hyps = translate_corpus([vocab.encode(s) for s, _ in test], student, builder, window, teacher)
        hyps = [vocab.decode(h) for h in hyps]
        name = f"nat-{meta['method']}-B{window.B}"
        summary.update(system=name, alpha=window.alpha, B=window.B)
    elif cfg.teacher:
        teacher, vocab, _, _ = _load_model(cfg.teacher, "teacher")
        out = batch_beam_search(teacher, [vocab.encode(s) for s, _ in test], cfg.beam)
        hyps = [vocab.decode(t) for t, _, _ in out]
        name = f"teacher-beam{cfg.beam}"
        summary.update(system=name)
    else:
        raise UsageError("eval needs --student or --teacher")
    summary["bleu"] = bleu(hyps, refs)
    summary["exact_match"] = float(np.mean([h == r for h, r in zip(hyps, refs)]))
    summary["buckets"] = tables[name] = bleu_by_length_bucket(hyps, refs, edges)
    if cfg.out:
        write_lines(cfg.out, hyps)
    if cfg.report_dir:
        rd = Path(cfg.report_dir)
        summary["figure"] = str(report.plot_buckets(tables, rd / "buckets.png"))
        (rd / "eval.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def cmd_latency(cfg: RunConfig) -> dict:
    _need(cfg, "test")
    test = read_parallel(tsv_path=cfg.test)[:cfg.latency_sentences]
    summaries = []
    teacher = None
    if cfg.teacher:
        teacher, vocab, _, _ = _load_model(cfg.teacher, "teacher")
        summaries.append(measure_latency("at-greedy", [vocab.encode(s) for s, _ in test], teacher=teacher))
    if cfg.student:
        student, vocab, meta, builder, _ = _student(cfg)
        sources = [vocab.encode(s) for s, _ in test]
        alpha = meta["alpha"] if cfg.alpha is None else cfg.alpha
        summaries.append(measure_latency("nat-b0", sources, student, builder, alpha=alpha))
        if teacher is not None:
            summaries.append(measure_latency("nat-b4", sources, student, builder, teacher, alpha=alpha))
    if not summaries:
        raise UsageError("latency needs --student and/or --teacher")
    result = {"modes": [s.to_dict() for s in summaries]}
    if cfg.report_dir:
        rd = Path(cfg.report_dir)
        result["figure"] = str(report.plot_latency(summaries, rd / "latency.png"))
        (rd / "latency.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result


def _emit_lines(cfg: RunConfig, sentences) -> None:
    if cfg.out:
        write_lines(cfg.out, sentences)
    else:
        sys.stdout.write("".join(" ".join(s) + "\n" for s in sentences))


COMMANDS = {
    "gen-toy": cmd_gen_toy, "build-table": cmd_build_table, "lookup": cmd_lookup,
    "extract-word-table": cmd_extract_word_table, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
    "train-nat": cmd_train_nat, "translate": cmd_translate, "eval": cmd_eval, "latency": cmd_latency,
}

# subcommands whose primary output goes to stdout when --out is absent
_STREAMING = {"lookup", "translate"}


def run(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))  # exits 2 on bad flags
    command = args.pop("command")
    config_path = args.pop("config")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(config_path, args)
        result = COMMANDS[command](cfg)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"enat {command}: error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, CorpusError, PhraseTableError, DecoderInputError, ConfigurationError,
            TrainingError, ValueError, OSError, KeyError) as exc:
        print(f"enat {command}: failed: {exc}", file=sys.stderr)
        return 1
    # one JSON record per invocation on stdout, unless stdout carries the translations
    if command not in _STREAMING or cfg.out:
        print(json.dumps({"command": command, **result}))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
