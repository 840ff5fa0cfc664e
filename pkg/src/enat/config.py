"""Run configuration: documented defaults, ``key = value`` files, and flag overrides."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .inference import LengthWindow
from .training import TrainConfig
from .transformer import ModelConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value in a configuration source."""


def _opt(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass
class RunConfig:
    # randomness
    seed: int = _opt(0, "seed for data generation, initialization and batching")
    # toy corpus
    pairs: int = _opt(5000, "gen-toy: training pairs")
    valid_pairs: int = _opt(200, "gen-toy: validation pairs")
    test_pairs: int = _opt(500, "gen-toy: test pairs")
    min_len: int = _opt(3, "gen-toy: shortest source sentence")
    max_len: int = _opt(12, "gen-toy: longest source sentence")
    swap: bool = _opt(True, "gen-toy: swap modifier-head chunks on the target side")
    # model
    layers: int = _opt(2, "encoder and decoder layers")
    d_model: int = _opt(64, "hidden size")
    heads: int = _opt(2, "attention heads")
    d_ff: int = _opt(128, "feed-forward inner size")
    dropout: float = _opt(0.0, "dropout rate")
    max_positions: int = _opt(128, "rows in the positional table")
    # training
    epochs: int = _opt(10, "training epochs")
    max_tokens: int = _opt(1024, "padded tokens per batch")
    lr: float = _opt(2e-3, "peak learning rate")
    warmup_steps: int = _opt(200, "linear warmup steps before inverse-sqrt decay")
    clip_norm: float = _opt(5.0, "global gradient-norm clip")
    decoder_input: str = _opt("copy", "decoder input: copy, phrase, word or embed")
    mu: float = _opt(0.1, "weight of the sentence alignment loss")
    lam: float = _opt(1.0, "weight of the adversarial loss")
    tau: float = _opt(0.3, "length-mapping kernel temperature")
    raw_kernel: bool = _opt(False, "use unnormalized kernel weights")
    disc_lr: float = _opt(1e-3, "discriminator learning rate")
    d_steps: int = _opt(1, "discriminator steps per main step")
    map_lr_scale: float = _opt(1.0, "learning-rate multiplier for the mapping matrix")
    valid_every: int = _opt(1, "epochs between validation passes")
    # tables
    max_phrase_len: int = _opt(3, "longest extracted source phrase")
    ibm_iterations: int = _opt(10, "IBM Model 1 EM iterations")
    moses: bool = _opt(False, "read --table as a Moses phrase table")
    # decoding
    beam: int = _opt(4, "beam size for the teacher")
    alpha: float | None = _opt(None, "length ratio; unset uses the ratio stored with the student")
    window_B: int = _opt(0, "half-width of the length window")
    buckets: str = _opt("1,5,9,13,41", "reference-length bucket edges")
    latency_sentences: int = _opt(200, "latency: sentences timed per mode")
    # paths
    out: str | None = _opt(None, "output file or directory")
    train: str | None = _opt(None, "training corpus (src<TAB>tgt)")
    valid: str | None = _opt(None, "validation corpus (src<TAB>tgt)")
    test: str | None = _opt(None, "test corpus (src<TAB>tgt)")
    corpus: str | None = _opt(None, "corpus to distill or align (src<TAB>tgt)")
    table: str | None = _opt(None, "phrase or word table")
    input: str | None = _opt(None, "plain-text input, one sentence per line")
    teacher: str | None = _opt(None, "teacher checkpoint")
    student: str | None = _opt(None, "student checkpoint")
    loss_log: str | None = _opt(None, "line-delimited loss records")
    report_dir: str | None = _opt(None, "directory for figures and the summary record")

    def model_config(self, vocab_size: int, positional_attention: bool) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, num_layers=self.layers, d_model=self.d_model,
                           num_heads=self.heads, d_ff=self.d_ff, dropout=self.dropout,
                           max_positions=self.max_positions, positional_attention=positional_attention)

    def train_config(self) -> TrainConfig:
        return TrainConfig(mu=self.mu, lam=self.lam, epochs=self.epochs, max_tokens=self.max_tokens,
                           seed=self.seed, lr=self.lr, warmup_steps=self.warmup_steps, disc_lr=self.disc_lr,
                           d_steps=self.d_steps, method=self.decoder_input, tau=self.tau,
                           raw_kernel=self.raw_kernel, clip_norm=self.clip_norm, valid_every=self.valid_every,
                           map_lr_scale=self.map_lr_scale)

    def window(self, alpha: float) -> LengthWindow:
        return LengthWindow(alpha if self.alpha is None else self.alpha, self.window_B)

    def bucket_edges(self) -> list[int]:
        try:
            return [int(x) for x in self.buckets.split(",")]
        except ValueError as exc:
            raise ConfigError(f"buckets must be comma-separated integers, got {self.buckets!r}") from exc

    @classmethod
    def docs(cls) -> dict[str, str]:
        return {f.name: f.metadata.get("doc", "") for f in fields(cls)}


_HINTS = typing.get_type_hints(RunConfig)


def _base_type(name: str):
    hint = _HINTS[name]
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        return next(a for a in typing.get_args(hint) if a is not type(None)), True
    return hint, False


def parse_value(name: str, text: str):
    """Convert the text form of a value to the field's type."""
    if name not in _HINTS:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind, optional = _base_type(name)
    text = text.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _HINTS:
            raise ConfigError(f"{path}:{n}: unknown configuration key {key!r}")
        values[key] = parse_value(key, value)
    return values


def resolve(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    values = read_config_file(config_path) if config_path else {}
    for key, value in (overrides or {}).items():
        if key not in _HINTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        values[key] = value
    return dataclasses.replace(RunConfig(), **values)


def render(cfg: RunConfig) -> str:
    """The config as a documented ``key = value`` file that :func:`read_config_file` accepts."""
    docs = RunConfig.docs()
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"# {docs[f.name]}")
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
