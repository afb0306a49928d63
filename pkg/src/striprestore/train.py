"""Training and evaluation loops over synthetic sequence streams.

A run directory receives: the resolved config manifest, a metrics CSV with
one row per training step plus periodic validation rows, and best/last
checkpoints.  Runs are bit-reproducible from (config, seed): the master rng
drives sequence choice and augmentation in a fixed order and every compute
step is deterministic single-threaded numpy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .losses import LossConfig, total_loss
from .metrics import METRICS_HEADER, format_metrics_row, psnr, ssim
from .model import (
    ModelConfig,
    bind_weights,
    init_model_weights,
    load_checkpoint,
    model_forward,
    restore_frames,
    save_checkpoint,
)
from .optim import AdamState, adam_step, clip_global_norm, cosine_lr
from .ppm import read_ppm
from .synth import DegradationSpec, gen_video_pair, read_manifest

__all__ = [
    "TrainResult",
    "augment_pair",
    "batch_loss_and_grads",
    "train",
    "evaluate_sequences",
    "evaluate_manifest",
    "sequence_spec",
]

GEN_MARGIN = 16  # synthetic sequences carry a crop margin for augmentation


@dataclass
class TrainResult:
    run_dir: str
    steps: int
    first_loss: float
    final_loss: float
    best_val_psnr: float
    last_checkpoint: str
    best_checkpoint: str


def augment_pair(
    clean: np.ndarray, degraded: np.ndarray, crop: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Shared random crop, flips, and quarter-turn on a clean/degraded pair."""
    t_n, h, w, _ = clean.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds frame extents {h}x{w}")
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    view = np.s_[:, y0 : y0 + crop, x0 : x0 + crop, :]
    clean, degraded = clean[view], degraded[view]
    if rng.uniform() < 0.5:
        clean, degraded = clean[:, :, ::-1], degraded[:, :, ::-1]
    if rng.uniform() < 0.5:
        clean, degraded = clean[:, ::-1], degraded[:, ::-1]
    quarter_turns = int(rng.integers(0, 4))
    clean = np.rot90(clean, quarter_turns, axes=(1, 2))
    degraded = np.rot90(degraded, quarter_turns, axes=(1, 2))
    return np.ascontiguousarray(clean), np.ascontiguousarray(degraded)


def sequence_spec(cfg: RunConfig, index: int) -> DegradationSpec:
    """Degradation settings of sequence `index`; orientations cycle."""
    pool = cfg.orientations()
    orientation = pool[index % len(pool)]
    return DegradationSpec(
        kind=cfg.task,
        orientation=orientation,
        orientation_step=cfg.orientation_step(),
        blur_length=cfg.blur_length,
        rain_density=cfg.rain_density,
        moire_freq=cfg.moire_freq,
        seed=cfg.seed * 100_003 + index,
    )


def _train_sequence(cfg: RunConfig, index: int):
    size = cfg.crop + GEN_MARGIN
    clean, degraded = gen_video_pair(
        cfg.seed * 7919 + index, cfg.frames, size, size, sequence_spec(cfg, index)
    )
    return clean.frames, degraded


def _val_sequences(cfg: RunConfig):
    out = []
    for i in range(cfg.val_count):
        index = cfg.train_count + i  # disjoint seeds from the training pool
        clean, degraded = gen_video_pair(
            cfg.seed * 7919 + index,
            cfg.frames,
            cfg.crop,
            cfg.crop,
            sequence_spec(cfg, index),
        )
        out.append((clean.frames, degraded))
    return out


def batch_loss_and_grads(
    weights: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    batch: list[tuple[np.ndarray, np.ndarray]],
):
    """One differentiable pass over a batch of (clean, degraded) stacks.

    Returns (loss report, gradient dict, restored stacks).  Sequences share
    one tape and one bound weight set, so gradients accumulate across the
    batch through the frame-axis concat.
    """
    tape = ad.Tape()
    store = bind_weights(tape, weights)
    restored_nodes = [
        model_forward(tape.leaf(degraded), store, model_cfg)
        for _, degraded in batch
    ]
    restored = (
        restored_nodes[0]
        if len(restored_nodes) == 1
        else ad.concat(restored_nodes, axis=0)
    )
    clean_cat = np.concatenate([clean for clean, _ in batch], axis=0)
    report = total_loss(restored, tape.leaf(clean_cat), loss_cfg)
    report.node.backward()
    grads = {name: store[name].grad for name in weights}
    return report, grads, [node.value for node in restored_nodes]


def _emit(fp, line: str) -> None:
    fp.write(line + "\n")
    fp.flush()


def train(
    cfg: RunConfig,
    run_dir,
    initial_weights: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Run the configured number of steps; see the module docstring for outputs."""
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.resolved.cfg"), "w") as fp:
        fp.write(cfg.resolved_text())

    model_cfg = cfg.model_config()
    loss_cfg = cfg.loss_config()
    schedule = cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    weights = (
        {k: v.copy() for k, v in initial_weights.items()}
        if initial_weights is not None
        else init_model_weights(model_cfg, rng)
    )
    state = AdamState(weights)
    train_pool = [_train_sequence(cfg, i) for i in range(cfg.train_count)]
    val_set = _val_sequences(cfg)

    last_path = os.path.join(run_dir, "last.ckpt")
    best_path = os.path.join(run_dir, "best.ckpt")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    best_val_psnr = -np.inf
    first_loss = final_loss = np.nan

    def validate(step: int, fp) -> float:
        rows = evaluate_sequences(weights, model_cfg, val_set, loss_cfg)
        agg = rows["aggregate"]
        _emit(
            fp,
            format_metrics_row(
                step,
                "val",
                agg["psnr"],
                agg["ssim"],
                agg["charbonnier"],
                agg["fft"],
                agg["total"],
            ),
        )
        return agg["psnr"]

    with open(metrics_path, "w") as fp:
        _emit(fp, METRICS_HEADER)
        for step in range(1, cfg.steps + 1):
            picks = rng.integers(0, len(train_pool), size=cfg.batch)
            batch = [
                augment_pair(*train_pool[int(i)], cfg.crop, rng) for i in picks
            ]
            report, grads, restored = batch_loss_and_grads(
                weights, model_cfg, loss_cfg, batch
            )
            if not np.isfinite(report.total):
                save_checkpoint(last_path, model_cfg, weights)
                raise RuntimeError(
                    f"non-finite loss at step {step}; last good checkpoint "
                    f"retained at {last_path}"
                )
            clean_cat = np.concatenate([c for c, _ in batch], axis=0)
            restored_cat = np.concatenate(restored, axis=0)
            _emit(
                fp,
                format_metrics_row(
                    step,
                    "train",
                    psnr(restored_cat, clean_cat),
                    ssim(restored_cat, clean_cat),
                    report.charbonnier,
                    report.fft,
                    report.total,
                ),
            )
            if step == 1:
                first_loss = report.total
            final_loss = report.total

            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            adam_step(weights, grads, state, cosine_lr(step - 1, schedule))

            if step % cfg.val_every == 0 or step == cfg.steps:
                val_psnr = validate(step, fp)
                if val_psnr > best_val_psnr:
                    best_val_psnr = val_psnr
                    save_checkpoint(best_path, model_cfg, weights)

    save_checkpoint(last_path, model_cfg, weights)
    if not os.path.exists(best_path):
        save_checkpoint(best_path, model_cfg, weights)
    return TrainResult(
        run_dir=str(run_dir),
        steps=cfg.steps,
        first_loss=first_loss,
        final_loss=final_loss,
        best_val_psnr=best_val_psnr,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
    )


def evaluate_sequences(
    weights: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    sequences: list[tuple[np.ndarray, np.ndarray]],
    loss_cfg: LossConfig | None = None,
) -> dict:
    """Per-sequence restored and degraded-baseline metrics plus the mean."""
    loss_cfg = loss_cfg or LossConfig()
    rows = []
    for clean, degraded in sequences:
        restored = restore_frames(degraded, weights, model_cfg)
        tape = ad.Tape()
        report = total_loss(tape.leaf(restored), tape.leaf(clean), loss_cfg)
        rows.append(
            {
                "psnr": psnr(restored, clean),
                "ssim": ssim(restored, clean),
                "baseline_psnr": psnr(degraded, clean),
                "baseline_ssim": ssim(degraded, clean),
                "charbonnier": report.charbonnier,
                "fft": report.fft,
                "total": report.total,
            }
        )
    keys = rows[0].keys()
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return {"sequences": rows, "aggregate": aggregate}


def _group_manifest(pairs: list[tuple[str, str]]) -> list[list[tuple[str, str]]]:
    """Consecutive frames sharing the clean path's directory form a sequence."""
    groups: list[list[tuple[str, str]]] = []
    current_dir = None
    for clean_path, degraded_path in pairs:
        d = os.path.dirname(clean_path)
        if d != current_dir:
            groups.append([])
            current_dir = d
        groups[-1].append((clean_path, degraded_path))
    return groups


def evaluate_manifest(
    checkpoint_path, manifest_path, loss_cfg: LossConfig | None = None
) -> dict:
    """Evaluate a checkpoint against a `clean degraded` manifest.

    Missing frame files are reported and their sequences skipped; the run
    continues with whatever remains.
    """
    model_cfg, weights = load_checkpoint(checkpoint_path)
    root = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    sequences = []
    missing: list[str] = []
    for group in _group_manifest(read_manifest(manifest_path)):
        lost = [
            p
            for pair in group
            for p in pair
            if not os.path.exists(resolve(p))
        ]
        if lost:
            missing.extend(lost)
            continue
        clean = np.stack([read_ppm(resolve(c)) for c, _ in group])
        degraded = np.stack([read_ppm(resolve(d)) for _, d in group])
        sequences.append((clean, degraded))
    if not sequences:
        raise ValueError(f"no readable sequences in {manifest_path}")
    result = evaluate_sequences(weights, model_cfg, sequences, loss_cfg)
    result["missing"] = missing
    return result
