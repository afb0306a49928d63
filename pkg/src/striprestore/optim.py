"""Adam with bias correction, cosine learning-rate decay, gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Schedule", "cosine_lr", "AdamState", "adam_step", "clip_global_norm"]


@dataclass
class Schedule:
    lr_init: float = 1e-4
    lr_final: float = 1e-7
    total_steps: int = 400

    def __post_init__(self):
        if not (self.lr_init > self.lr_final > 0):
            raise ValueError(
                f"need lr_init > lr_final > 0, got {self.lr_init} and {self.lr_final}"
            )
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step: int, sched: Schedule) -> float:
    """Half-cosine from lr_init at step 0 to lr_final at total_steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= sched.total_steps:
        return sched.lr_final
    span = sched.lr_init - sched.lr_final
    return sched.lr_final + 0.5 * span * (
        1.0 + np.cos(np.pi * step / sched.total_steps)
    )


class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One in-place bias-corrected update of every parameter."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(
    grads: dict[str, np.ndarray], max_norm: float = 1.0
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint 2-norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total
