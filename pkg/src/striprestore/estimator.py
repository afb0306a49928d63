"""Scikit-learn style facade over the restoration model.

`fit(X, y)` trains on explicit degraded/clean stacks, `predict(X)` restores,
`score(X, y)` reports mean PSNR in dB.  Hyperparameters follow the sklearn
contract (set in __init__, learned state carries a trailing underscore), so
the estimator composes with clone/get_params tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .losses import LossConfig
from .metrics import psnr
from .model import ModelConfig, init_model_weights, restore_frames
from .optim import AdamState, Schedule, adam_step, clip_global_norm, cosine_lr
from .train import batch_loss_and_grads
from .validation import check_video, check_video_pairs

__all__ = ["VideoRestorer"]


class VideoRestorer(BaseEstimator):
    def __init__(
        self,
        stack: int = 1,
        channels: int = 8,
        heads: int = 2,
        steps: int = 80,
        batch: int = 1,
        lr: float = 1e-3,
        lr_final: float = 1e-6,
        fft_weight: float = 0.01,
        direction: str = "both",
        variant: str = "stsa",
        clip_norm: float = 1.0,
        seed: int = 0,
    ):
        self.stack = stack
        self.channels = channels
        self.heads = heads
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.lr_final = lr_final
        self.fft_weight = fft_weight
        self.direction = direction
        self.variant = variant
        self.clip_norm = clip_norm
        self.seed = seed

    def _model_config(self, frames: int) -> ModelConfig:
        return ModelConfig(
            num_stsa_blocks=self.stack,
            base_channels=self.channels,
            heads=self.heads,
            frame_window=frames,
            directions=self.direction,
            variant=self.variant,
        )

    def fit(self, X, y):
        """Train on aligned degraded (X) / clean (y) frame stacks."""
        degraded, clean = check_video_pairs(X, y)
        n = degraded.shape[0]
        rng = np.random.default_rng(self.seed)
        model_cfg = self._model_config(frames=degraded.shape[1])
        loss_cfg = LossConfig(fft_weight=self.fft_weight)
        schedule = Schedule(
            lr_init=self.lr, lr_final=self.lr_final, total_steps=self.steps
        )
        weights = init_model_weights(model_cfg, rng)
        state = AdamState(weights)
        history = []
        for step in range(self.steps):
            picks = rng.integers(0, n, size=self.batch)
            pairs = [(clean[i], degraded[i]) for i in picks]
            report, grads, _ = batch_loss_and_grads(
                weights, model_cfg, loss_cfg, pairs
            )
            if not np.isfinite(report.total):
                raise RuntimeError(f"non-finite loss at step {step + 1}")
            history.append(report.total)
            grads, _ = clip_global_norm(grads, self.clip_norm)
            adam_step(weights, grads, state, cosine_lr(step, schedule))
        self.model_config_ = model_cfg
        self.weights_ = weights
        self.loss_history_ = history
        self.n_sequences_ = n
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise RuntimeError("this VideoRestorer instance is not fitted yet")

    def predict(self, X) -> np.ndarray:
        """Restore degraded stacks; output shape matches the input."""
        self._check_fitted()
        batch = check_video(X)
        single = np.asarray(X).ndim == 4
        out = np.stack(
            [
                restore_frames(stack, self.weights_, self.model_config_)
                for stack in batch
            ]
        )
        return out[0] if single else out

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of predictions against clean stacks."""
        degraded, clean = check_video_pairs(X, y)
        restored = self.predict(degraded)
        return float(
            np.mean([psnr(r, c) for r, c in zip(restored, clean)])
        )
