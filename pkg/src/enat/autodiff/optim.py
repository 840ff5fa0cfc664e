"""Adam with warmup/inverse-sqrt schedule, global-norm clipping, checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    """Raised when optimization hits a non-finite value."""


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self, step: int | None = None) -> float:
        """Linear warmup to ``base_lr`` then decay as 1/sqrt(step)."""
        s = self.step if step is None else step
        s = max(s, 1)
        if self.warmup_steps <= 0:
            return self.base_lr
        w = self.warmup_steps
        return self.base_lr * min(s / w, math.sqrt(w / s))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        c = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= c
    return total


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: OptimizerState, lr_scale: Mapping[str, float] | None = None) -> None:
    """One bias-corrected Adam update; ``lr_scale`` multiplies the rate per parameter."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    lr = state.learning_rate()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr * lr_scale.get(name, 1.0) if lr_scale else lr
        p.data -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Owns a disjoint set of named parameters and their moment state."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, warmup_steps: int = 0,
                 betas=(0.9, 0.98), eps: float = 1e-9, clip_norm: float = 5.0,
                 lr_scale: Mapping[str, float] | None = None):
        self.params = dict(params)
        self.lr_scale = dict(lr_scale or {})
        self.state = OptimizerState(base_lr=lr, warmup_steps=warmup_steps,
                                    beta1=betas[0], beta2=betas[1], eps=eps)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Clip, update, and clear gradients.  Returns the pre-clip norm."""
        grads = {n: np.array(p.grad, dtype=np.float64) for n, p in self.params.items() if p.grad is not None}
        norm = clip_grad_norm(grads, self.clip_norm)
        if not math.isfinite(norm):
            bad = next(n for n, g in grads.items() if not np.all(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient for parameter {bad!r} at step {self.state.step + 1}")
        adam_step(self.params, grads, self.state, self.lr_scale)
        self.zero_grad()
        return norm


def save_checkpoint(path, params: Mapping[str, Tensor], optimizer: OptimizerState | None = None,
                    meta: Mapping | None = None) -> None:
    """Write parameters (and optionally optimizer moments) to one ``.npz``."""
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    header = {"meta": dict(meta or {}), "params": list(params)}
    if optimizer is not None:
        header["optimizer"] = {
            "base_lr": optimizer.base_lr, "warmup_steps": optimizer.warmup_steps,
            "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
            "step": optimizer.step,
        }
        for k in optimizer.m:
            arrays[f"m/{k}"] = optimizer.m[k]
            arrays[f"v/{k}"] = optimizer.v[k]
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, Tensor], OptimizerState | None, dict]:
    with np.load(Path(path)) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        params = {k: Tensor(z[f"param/{k}"], requires_grad=True, name=k) for k in header["params"]}
        opt = None
        if "optimizer" in header:
            opt = OptimizerState(**header["optimizer"])
            for key in z.files:
                if key.startswith("m/"):
                    opt.m[key[2:]] = z[key].copy()
                elif key.startswith("v/"):
                    opt.v[key[2:]] = z[key].copy()
    return params, opt, header["meta"]
