"""Shipping gates: one test per acceptance criterion, stated tolerances only.

Run with `pytest -v tests/test_acceptance.py` for one pass/fail line per
criterion.  The training gates (5 and 6) run real desk-scale trainings and
dominate the runtime; everything else finishes in seconds.
"""

import os
import time

import numpy as np
import pytest
from test_attention import bind, oracle_attended

from striprestore import attention as sa
from striprestore import autodiff as ad
from striprestore.config import RunConfig
from striprestore.losses import LossConfig, charbonnier_loss, fft_loss, total_loss
from striprestore.model import (
    ModelConfig,
    init_model_weights,
    load_checkpoint,
    model_forward,
    restore_frames,
    save_checkpoint,
)
from striprestore.train import _val_sequences, evaluate_sequences, train
from striprestore.verification import finite_diff_check, locality_probe

# hard budgets: 2000 steps / 30 min; the calibrated run stays well inside
DESK_STEPS = 1600
DESK_LR = 2e-3
DESK_BATCH = 1

ABLATION_STEPS = 800
ABLATION_LR = 2e-3
ABLATION_SEEDS = (0, 1, 2)


def test_criterion_1_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(101)
    worst, cases = 0.0, 0
    for t_n in (1, 2, 4):
        for h_n in (4, 6, 8):
            for w_n in (4, 6, 8):
                for c in (4, 8):
                    for heads in (1, 2, 4):
                        if (c // 2) % heads:
                            continue  # head width must divide branch channels
                        weights = sa.init_strip_attention(rng, c, heads)
                        x = rng.normal(size=(t_n, h_n, w_n, c))
                        tape = ad.Tape()
                        p = bind(tape, weights, heads)
                        for mode, fn in (
                            ("intra", sa.intra_sa_attended),
                            ("inter", sa.inter_sa_attended),
                            ("joint", sa.joint_attended),
                        ):
                            oh, ov = fn(tape.leaf(x), p)
                            for direction, got in (("h", oh), ("v", ov)):
                                want = oracle_attended(
                                    x, weights, heads, mode, direction
                                )
                                worst = max(
                                    worst, float(np.abs(got.value - want).max())
                                )
                        cases += 1
    elapsed = time.monotonic() - started
    assert cases == 135
    assert worst <= 1e-9, f"max abs diff {worst:.3g} over {cases} configs"
    assert elapsed < 60.0, f"oracle grid took {elapsed:.1f}s"


def test_criterion_2_gradient_suite():
    started = time.monotonic()
    # finite differences lie when a bump straddles a leaky-unit kink; this
    # seed keeps every probed pre-activation clear of zero at the h in use
    rng = np.random.default_rng(707)
    cfg = ModelConfig(num_stsa_blocks=1, base_channels=8, heads=2, frame_window=2)
    # nudge every tensor off its init so the zero-initialized output head
    # no longer blocks gradient flow into upstream parameters
    weights = {
        k: v + 0.05 * rng.normal(size=v.shape)
        for k, v in init_model_weights(cfg, rng).items()
    }
    clean = rng.uniform(size=(2, 16, 16, 3))
    degraded = np.clip(clean + 0.1 * rng.normal(size=clean.shape), 0.0, 1.0)
    loss_cfg = LossConfig()  # Charbonnier plus weighted frequency term

    def loss_and_grads(params):
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        restored = model_forward(tape.leaf(degraded), leaves, cfg)
        report = total_loss(restored, tape.leaf(clean), loss_cfg)
        report.node.backward()
        return report.total, {k: leaves[k].grad for k in params}

    report = finite_diff_check(
        loss_and_grads, weights, coords_per_tensor=4, rng=rng
    )
    assert report["max_rel_err"] <= 1e-4, report["per_tensor"]
    assert set(report["per_tensor"]) == set(weights)  # every parameter group

    def corrupted(params):
        loss, grads = loss_and_grads(params)
        grads["enc1.conv_w"] = grads["enc1.conv_w"] * 1.05
        return loss, grads

    control = finite_diff_check(
        corrupted, weights, coords_per_tensor=4, rng=np.random.default_rng(203)
    )
    assert control["max_rel_err"] > 1e-2, "corrupted adjoint went undetected"
    elapsed = time.monotonic() - started
    assert elapsed < 300.0, f"gradient suite took {elapsed:.1f}s"


def test_criterion_3_complexity_accounting():
    for t_n, h_n, w_n in ((1, 4, 4), (2, 4, 6), (4, 8, 8), (3, 5, 7), (2, 6, 4)):
        report = sa.attention_footprint(t_n, h_n, w_n, measure_full=True)
        closed = {
            "intra": t_n * (h_n**2 + w_n**2),
            "inter": (h_n + w_n) * t_n**2,
            "joint": t_n**2 * (h_n**2 + w_n**2),
            "full": (h_n * w_n * t_n) ** 2,
        }
        assert report.closed_form == closed
        assert report.measured() == closed, (t_n, h_n, w_n)
    big = sa.footprint_closed_forms(4, 32, 32)
    strip_total = big["intra"] + big["inter"]
    assert strip_total == 9216
    assert big["full"] == 16_777_216
    assert big["full"] / strip_total >= 1000


def test_criterion_4_loss_unit_values(tmp_path):
    rng = np.random.default_rng(404)
    r = rng.uniform(size=(3, 8, 8, 3))
    tape = ad.Tape()
    char = charbonnier_loss(tape.leaf(r), tape.leaf(r.copy())).item()
    assert abs(char - 1e-3) <= 1e-12
    assert fft_loss(tape.leaf(r), tape.leaf(r.copy())).item() == 0.0

    g = np.clip(r + 0.1 * rng.normal(size=r.shape), 0.0, 1.0)
    sweep = (0.0, 0.1, 0.01, 0.001)
    for lam in sweep:
        report = total_loss(tape.leaf(r), tape.leaf(g), LossConfig(fft_weight=lam))
        assert report.total == report.charbonnier + lam * report.fft

    # the sweep also runs end-to-end: short trainings, one per weight
    for i, lam in enumerate(sweep):
        cfg = RunConfig(
            stack=1,
            channels=8,
            heads=2,
            frames=2,
            crop=16,
            steps=3,
            batch=1,
            lr=1e-3,
            lr_final=1e-6,
            val_every=3,
            val_count=1,
            train_count=2,
            blur_length=5,
            fft_weight=lam,
            seed=11,
        )
        run_dir = tmp_path / f"lam{i}"
        train(cfg, run_dir)
        first = (run_dir / "metrics.csv").read_text().splitlines()[1].split(",")
        charb, fft, tot = float(first[4]), float(first[5]), float(first[6])
        assert tot == pytest.approx(charb + lam * fft, rel=1e-8)


def test_criterion_5_desk_training(tmp_path):
    started = time.monotonic()
    # free knobs (lr, lambda, blur length, data volume) calibrated so the
    # fixed-architecture run clears both gates with margin on one CPU core
    cfg = RunConfig(
        stack=2,
        channels=16,
        heads=8,
        frames=4,
        crop=48,
        steps=DESK_STEPS,
        batch=DESK_BATCH,
        lr=DESK_LR,
        lr_final=1e-6,
        fft_weight=0.0,
        val_every=200,
        val_count=3,
        train_count=96,
        task="blur",
        blur_length=13,
        seed=7,
    )
    assert cfg.steps <= 2000
    result = train(cfg, tmp_path)
    elapsed = time.monotonic() - started
    assert elapsed < 1800.0, f"training took {elapsed:.1f}s"

    rows = [
        line.split(",")
        for line in (tmp_path / "metrics.csv").read_text().splitlines()[1:]
    ]
    train_total = {int(r[0]): float(r[6]) for r in rows if r[1] == "train"}
    step10, final = train_total[10], train_total[cfg.steps]
    assert final <= 0.5 * step10, f"loss {final:.4g} vs step-10 {step10:.4g}"

    model_cfg, weights = load_checkpoint(result.best_checkpoint)
    held_out = evaluate_sequences(weights, model_cfg, _val_sequences(cfg))
    agg = held_out["aggregate"]
    gain = agg["psnr"] - agg["baseline_psnr"]
    assert gain >= 1.0, (
        f"held-out PSNR gain {gain:.3f} dB "
        f"({agg['psnr']:.2f} restored vs {agg['baseline_psnr']:.2f} degraded)"
    )


def test_criterion_6_direction_ablation(tmp_path):
    mean_char = {}
    for direction in ("both", "h", "v"):
        per_seed = []
        for seed in ABLATION_SEEDS:
            # per-frame alternating blur orientation: every frame's damaged
            # axis is intact in its neighbours, so restoring the whole clip
            # genuinely needs strip transport along both axes
            cfg = RunConfig(
                stack=2,
                channels=16,
                heads=8,
                frames=2,
                crop=48,
                steps=ABLATION_STEPS,
                batch=1,
                lr=ABLATION_LR,
                lr_final=1e-6,
                fft_weight=0.0,
                val_every=ABLATION_STEPS,
                val_count=6,
                train_count=24,
                task="blur",
                orientation="alternating",
                blur_length=17,
                direction=direction,
                seed=seed,
            )
            run_dir = tmp_path / f"{direction}_{seed}"
            result = train(cfg, run_dir)
            model_cfg, weights = load_checkpoint(result.last_checkpoint)
            agg = evaluate_sequences(weights, model_cfg, _val_sequences(cfg))
            per_seed.append(agg["aggregate"]["charbonnier"])
        mean_char[direction] = float(np.mean(per_seed))

    table = " | ".join(f"{d}: {v:.4f}" for d, v in mean_char.items())
    print(f"direction ablation, 3-seed mean validation charbonnier: {table}")
    # single seeds may flip; only the 3-seed averages gate the suite
    assert mean_char["both"] <= mean_char["h"], table
    assert mean_char["both"] <= mean_char["v"], table


def test_criterion_7_determinism(tmp_path):
    cfg = RunConfig(
        stack=1,
        channels=8,
        heads=2,
        frames=2,
        crop=16,
        steps=10,
        batch=1,
        lr=1e-3,
        lr_final=1e-6,
        val_every=5,
        val_count=1,
        train_count=2,
        blur_length=5,
        seed=21,
    )
    outputs = []
    for name in ("first", "second"):
        run_dir = tmp_path / name
        train(cfg, run_dir)
        outputs.append((run_dir / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1], "seeded reruns wrote different CSVs"

    model_cfg, weights = load_checkpoint(tmp_path / "first" / "last.ckpt")
    probe = np.random.default_rng(22).uniform(size=(2, 16, 16, 3))
    before = restore_frames(probe, weights, model_cfg)
    path = tmp_path / "roundtrip.ckpt"
    save_checkpoint(path, model_cfg, weights)
    reloaded_cfg, reloaded = load_checkpoint(path)
    after = restore_frames(probe, reloaded, reloaded_cfg)
    assert np.array_equal(before, after), "forward outputs drifted through save/load"


def test_criterion_8_locality():
    rng = np.random.default_rng(808)
    heads, c = 2, 8
    t_n, h_n, w_n = 3, 8, 10
    weights = sa.init_strip_attention(rng, c, heads)
    x = rng.normal(size=(t_n, h_n, w_n, c))

    def block_fn(block):
        def fn(arr):
            tape = ad.Tape()
            return block(tape.leaf(arr), bind(tape, weights, heads)).value

        return fn

    intra_fn = block_fn(sa.intra_sa_block)
    inter_fn = block_fn(sa.inter_sa_block)
    for _ in range(20):
        site = tuple(int(rng.integers(0, n)) for n in (t_n, h_n, w_n, c))
        t, y, xx = site[:3]

        changed = locality_probe(intra_fn, x, site)
        touched_frames = changed.any(axis=(1, 2, 3))
        assert touched_frames[t], f"site {site}: probe did not register"
        assert not touched_frames[np.arange(t_n) != t].any(), (
            f"site {site}: change escaped the frame"
        )

        changed = locality_probe(inter_fn, x, site)
        allowed = np.zeros(changed.shape, dtype=bool)
        allowed[:, y, :, :] = True
        allowed[:, :, xx, :] = True
        assert not changed[~allowed].any(), (
            f"site {site}: change escaped the row/column cross"
        )
