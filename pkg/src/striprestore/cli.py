"""Command line entry point: gen-data, train, restore, verify, bench.

Exit codes: 0 success, 1 failed verification or runtime failure, 2 usage or
configuration errors (argparse reports unknown flags itself).  Subcommands
that take a config file overlay command-line flags on top of it (flags win),
and every run that owns an output directory writes the fully resolved
settings there so it can be reproduced from the manifest alone.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from . import attention as sa
from . import autodiff as ad
from .config import RunConfig, parse_config_file
from .losses import LossConfig, charbonnier_loss, fft_loss, total_loss
from .model import (
    ModelConfig,
    init_model_weights,
    load_checkpoint,
    restore_frames,
    save_checkpoint,
)
from .ppm import read_ppm, write_png, write_ppm
from .synth import gen_video_pair, write_manifest
from .train import sequence_spec, train
from .verification import (
    finite_diff_check,
    inter_mask,
    intra_mask,
    joint_mask,
    locality_probe,
    masked_full_attention,
    reference_layer_norm,
    scatter_strip_tokens,
    strip_tokens,
)

__all__ = ["main"]

# RunConfig attributes that command-line flags may override
_OVERLAY_ATTRS = (
    "seed",
    "stack",
    "frames",
    "task",
    "fft_weight",
    "direction",
    "variant",
    "steps",
)


def _add_overlay_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--stack", type=int, metavar="N", help="mixing blocks")
    p.add_argument("--frames", type=int, metavar="T", help="frames per sequence")
    p.add_argument("--task", choices=("blur", "rain", "moire"))
    p.add_argument(
        "--lambda",
        type=float,
        dest="fft_weight",
        metavar="F",
        help="frequency-loss weight",
    )
    p.add_argument("--direction", choices=("h", "v", "both"))
    p.add_argument("--variant", choices=("stsa", "joint"))


def _resolve_config(args, **extra) -> RunConfig:
    overrides = {
        name: getattr(args, name, None)
        for name in _OVERLAY_ATTRS
        if getattr(args, name, None) is not None
    }
    overrides.update({k: v for k, v in extra.items() if v is not None})
    if getattr(args, "config", None):
        return parse_config_file(args.config, overrides)
    return RunConfig(**overrides)


def _write_settings(out_dir, name: str, settings: dict) -> None:
    """Reproducibility manifest for subcommands not driven by a RunConfig."""
    lines = [f"{k} = {v}" for k, v in settings.items()]
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fp:
        fp.write("\n".join(lines) + "\n")


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args, train_count=args.sequences)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved.cfg"), "w") as fp:
        fp.write(cfg.resolved_text())

    pairs = []
    for i in range(cfg.train_count):
        clean, degraded = gen_video_pair(
            cfg.seed * 7919 + i, cfg.frames, cfg.crop, cfg.crop, sequence_spec(cfg, i)
        )
        seq = f"seq{i:03d}"
        os.makedirs(os.path.join(args.out, seq), exist_ok=True)
        for j in range(cfg.frames):
            names = (f"{seq}/clean_{j:03d}.ppm", f"{seq}/degraded_{j:03d}.ppm")
            write_ppm(os.path.join(args.out, names[0]), clean.frames[j])
            write_ppm(os.path.join(args.out, names[1]), degraded[j])
            pairs.append(names)
    write_manifest(os.path.join(args.out, "manifest.txt"), pairs)
    print(
        f"wrote {cfg.train_count} sequences x {cfg.frames} frames "
        f"({cfg.crop}x{cfg.crop}, {cfg.task}) to {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    try:
        result = train(cfg, args.out)
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(
        f"trained {result.steps} steps: loss {result.first_loss:.6g} -> "
        f"{result.final_loss:.6g}, best val psnr {result.best_val_psnr:.3f} dB"
    )
    print(f"checkpoints: {result.best_checkpoint} (best), {result.last_checkpoint} (last)")
    return 0


def _cmd_restore(args) -> int:
    names = sorted(n for n in os.listdir(args.input) if n.endswith(".ppm"))
    if not names:
        print(f"error: no .ppm frames in {args.input}", file=sys.stderr)
        return 2
    frames = np.stack([read_ppm(os.path.join(args.input, n)) for n in names])
    try:
        cfg, weights = load_checkpoint(args.checkpoint)
        restored = restore_frames(frames, weights, cfg)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    writer, ext = (write_png, "png") if args.png else (write_ppm, "ppm")
    for j, frame in enumerate(restored):
        writer(os.path.join(args.out, f"restored_{j:03d}.{ext}"), frame)
    _write_settings(
        args.out,
        "restore.resolved.cfg",
        {
            "command": "restore",
            "checkpoint": args.checkpoint,
            "input": args.input,
            "png": "true" if args.png else "false",
        },
    )
    print(f"restored {len(names)} frames from {args.input} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# verify: self-contained property suite

def _bind(tape, weights, heads):
    leaves = {k: tape.leaf(v) for k, v in weights.items()}
    return leaves, sa.bind_strip_attention(leaves, heads)


def _oracle_attended(x, weights, heads, mode, direction, scale=None):
    """Loop-and-mask oracle for one branch's attended features."""
    t_n, h_n, w_n, c = x.shape
    half = c // 2
    normed = reference_layer_norm(x, weights["ln1_gamma"], weights["ln1_beta"])
    xd = normed[..., :half] if direction == "h" else normed[..., half:]
    suffix = "_h" if direction == "h" else "_v"
    strips = h_n if direction == "h" else w_n
    strip_len = w_n if direction == "h" else h_n
    if scale is None:
        scale = np.sqrt(strip_len * half / heads)
    mask = {"intra": intra_mask, "inter": inter_mask, "joint": joint_mask}[mode](
        t_n, strips
    )
    per_head = []
    for m in range(heads):
        q = strip_tokens(xd, weights["pq" + suffix], m, heads, direction)
        k = strip_tokens(xd, weights["pk" + suffix], m, heads, direction)
        v = strip_tokens(xd, weights["pv" + suffix], m, heads, direction)
        att = masked_full_attention(q, k, v, mask, scale)
        per_head.append(scatter_strip_tokens(att, t_n, h_n, w_n, half // heads, direction))
    return np.concatenate(per_head, axis=-1)


_ATTENDED = {
    "intra": sa.intra_sa_attended,
    "inter": sa.inter_sa_attended,
    "joint": sa.joint_attended,
}
_BLOCKS = {
    "intra": sa.intra_sa_block,
    "inter": sa.inter_sa_block,
    "joint": sa.joint_strip_attention,
}


def _check_oracle(small: bool, rng) -> str:
    if small:
        grid_t, grid_hw, grid_cm = (1, 2), ((4, 4), (4, 6)), ((4, 2),)
    else:
        grid_t = (1, 2, 4)
        grid_hw = tuple((h, w) for h in (4, 6, 8) for w in (4, 6, 8))
        grid_cm = ((4, 1), (4, 2), (8, 2), (8, 4))
    worst, cases = 0.0, 0
    for t_n in grid_t:
        for h_n, w_n in grid_hw:
            for c, heads in grid_cm:
                weights = sa.init_strip_attention(rng, c, heads)
                x = rng.normal(size=(t_n, h_n, w_n, c))
                tape = ad.Tape()
                _, p = _bind(tape, weights, heads)
                for mode in ("intra", "inter", "joint"):
                    oh, ov = _ATTENDED[mode](tape.leaf(x), p)
                    for direction, got in (("h", oh), ("v", ov)):
                        want = _oracle_attended(x, weights, heads, mode, direction)
                        worst = max(worst, float(np.abs(got.value - want).max()))
                cases += 1
    if worst > 1e-9:
        raise AssertionError(f"max abs diff {worst:.3g} exceeds 1e-9")
    return f"{cases} configs x 3 mechanisms, max abs diff {worst:.2e}"


def _check_wrong_scale(rng) -> str:
    heads, c = 2, 8
    weights = sa.init_strip_attention(rng, c, heads)
    x = rng.normal(size=(2, 6, 6, c))
    tape = ad.Tape()
    _, p = _bind(tape, weights, heads)
    got = sa.intra_sa_attended(tape.leaf(x), p)[0].value
    bad_scale = np.sqrt(6 * (c // 2))  # forgets the per-head split
    want = _oracle_attended(x, weights, heads, "intra", "h", scale=bad_scale)
    diff = float(np.abs(got - want).max())
    if diff <= 1e-6:
        raise AssertionError(f"wrong scale went undetected (diff {diff:.3g})")
    return f"wrong-scale oracle diverges by {diff:.2e} > 1e-6"


def _block_loss_and_grads(x_arr, heads, mode, cot):
    def run(params):
        tape = ad.Tape()
        leaves, p = _bind(tape, params, heads)
        out = _BLOCKS[mode](tape.leaf(x_arr), p)
        loss = ad.mean_all(ad.mul(out, tape.leaf(cot)))
        loss.backward()
        return loss.item(), {k: leaves[k].grad for k in params}

    return run


def _check_gradients(small: bool, rng) -> str:
    heads, c = 2, 4 if small else 8
    x = rng.normal(size=(2, 4, 4, c) if small else (2, 6, 6, c))
    cot = rng.normal(size=x.shape)
    coords = 4 if small else 8
    worst = 0.0
    modes = ("intra",) if small else ("intra", "inter", "joint")
    for mode in modes:
        weights = sa.init_strip_attention(rng, c, heads)
        report = finite_diff_check(
            _block_loss_and_grads(x, heads, mode, cot),
            weights,
            coords_per_tensor=coords,
            rng=rng,
        )
        worst = max(worst, report["max_rel_err"])

    clean = rng.uniform(size=(2, 6, 6, 3))
    restored = clean + 0.05 * rng.normal(size=clean.shape)

    def loss_run(params):
        tape = ad.Tape()
        r = tape.leaf(params["restored"])
        rep = total_loss(r, tape.leaf(clean))
        rep.node.backward()
        return rep.total, {"restored": r.grad}

    report = finite_diff_check(
        loss_run, {"restored": restored}, coords_per_tensor=coords, rng=rng
    )
    worst = max(worst, report["max_rel_err"])
    if worst > 1e-4:
        raise AssertionError(f"max rel err {worst:.3g} exceeds 1e-4")
    return f"blocks + losses, max rel err {worst:.2e}"


def _check_corrupted_adjoint(rng) -> str:
    heads, c = 2, 4
    x = rng.normal(size=(2, 4, 4, c))
    cot = rng.normal(size=x.shape)
    weights = sa.init_strip_attention(rng, c, heads)
    honest = _block_loss_and_grads(x, heads, "intra", cot)

    def corrupted(params):
        loss, grads = honest(params)
        grads["pq_h"] = grads["pq_h"] * 1.05
        return loss, grads

    report = finite_diff_check(corrupted, weights, coords_per_tensor=8, rng=rng)
    if report["max_rel_err"] <= 1e-2:
        raise AssertionError("corrupted adjoint slipped past the checker")
    return f"5% gradient corruption flagged at rel err {report['max_rel_err']:.2e}"


def _check_footprints() -> str:
    for t_n, h_n, w_n in ((1, 4, 4), (2, 4, 6), (4, 8, 8), (3, 5, 7), (2, 6, 4)):
        report = sa.attention_footprint(t_n, h_n, w_n)
        if not report.matches():
            raise AssertionError(
                f"(T,H,W)=({t_n},{h_n},{w_n}) measured {report.measured()} "
                f"!= closed {report.closed_form}"
            )
    closed = sa.footprint_closed_forms(4, 32, 32)
    strip = closed["intra"] + closed["inter"]
    ratio = closed["full"] / strip
    if ratio < 1000:
        raise AssertionError(f"full/strip ratio {ratio:.0f} below 1000")
    return f"5 configs exact; full/strip ratio {ratio:.0f} at T=4, 32x32"


def _check_loss_units(rng) -> str:
    r = rng.uniform(size=(2, 6, 6, 3))
    tape = ad.Tape()
    char = charbonnier_loss(tape.leaf(r), tape.leaf(r.copy())).item()
    if abs(char - 1e-3) > 1e-12:
        raise AssertionError(f"charbonnier(R,R) = {char!r}, want 1e-3")
    f0 = fft_loss(tape.leaf(r), tape.leaf(r.copy())).item()
    if f0 != 0.0:
        raise AssertionError(f"fft(R,R) = {f0!r}, want 0")
    g = np.clip(r + 0.1 * rng.normal(size=r.shape), 0, 1)
    for lam in (0.0, 0.1, 0.01, 0.001):
        rep = total_loss(tape.leaf(r), tape.leaf(g), LossConfig(fft_weight=lam))
        if rep.total != rep.charbonnier + lam * rep.fft:
            raise AssertionError(f"lambda={lam} wiring broken")
    return "charbonnier(R,R)=1e-3, fft(R,R)=0, lambda sweep wired"


def _check_locality(small: bool, rng) -> str:
    heads, c = 2, 8
    t_n, h_n, w_n = 3, 8, 10
    weights = sa.init_strip_attention(rng, c, heads)
    x = rng.normal(size=(t_n, h_n, w_n, c))

    def block_fn(mode):
        def fn(arr):
            tape = ad.Tape()
            _, p = _bind(tape, weights, heads)
            return _BLOCKS[mode](tape.leaf(arr), p).value

        return fn

    intra_fn, inter_fn = block_fn("intra"), block_fn("inter")
    n_sites = 5 if small else 20
    for _ in range(n_sites):
        site = tuple(int(rng.integers(0, n)) for n in (t_n, h_n, w_n, c))
        t, y, xx = site[:3]
        changed = locality_probe(intra_fn, x, site)
        touched = changed.any(axis=(1, 2, 3))
        if touched[np.arange(t_n) != t].any() or not touched[t]:
            raise AssertionError(f"intra leak at site {site}")
        changed = locality_probe(inter_fn, x, site)
        allowed = np.zeros(changed.shape, dtype=bool)
        allowed[:, y, :, :] = True
        allowed[:, :, xx, :] = True
        if changed[~allowed].any():
            raise AssertionError(f"inter leak outside row/column at site {site}")
    return f"{n_sites} probe sites: intra frame-confined, inter row+column"


def _check_checkpoint(rng) -> str:
    cfg = ModelConfig(num_stsa_blocks=1, base_channels=8, heads=2, frame_window=2)
    weights = init_model_weights(cfg, rng)
    for name in weights:
        weights[name] = weights[name] + 1e-3 * rng.normal(size=weights[name].shape)
    x = rng.uniform(size=(2, 8, 8, 3))
    before = restore_frames(x, weights, cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        save_checkpoint(path, cfg, weights)
        cfg2, loaded = load_checkpoint(path)
    if any(not np.array_equal(weights[k], loaded[k]) for k in weights):
        raise AssertionError("reloaded tensors differ bitwise")
    after = restore_frames(x, loaded, cfg2)
    if not np.array_equal(before, after):
        raise AssertionError("forward outputs differ after reload")
    return "tensors and forward outputs bit-exact through save/load"


def _check_determinism(seed: int) -> str:
    cfg = RunConfig(
        stack=1,
        channels=8,
        heads=2,
        frames=2,
        crop=16,
        steps=2,
        batch=1,
        lr=1e-3,
        lr_final=1e-6,
        val_every=1,
        val_count=1,
        train_count=2,
        blur_length=5,
        seed=seed,
    )
    outputs = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as tmp:
            train(cfg, tmp)
            with open(os.path.join(tmp, "metrics.csv"), "rb") as fp:
                outputs.append(fp.read())
    if outputs[0] != outputs[1]:
        raise AssertionError("two seeded runs wrote different metric CSVs")
    return f"two {cfg.steps}-step runs wrote bit-identical metric CSVs"


def run_verify(small: bool, seed: int) -> tuple[list[tuple[str, bool, str]], bool]:
    rng = np.random.default_rng(seed)
    checks = [
        ("oracle equivalence", lambda: _check_oracle(small, rng)),
        ("negative control: wrong scale", lambda: _check_wrong_scale(rng)),
        ("gradient checks", lambda: _check_gradients(small, rng)),
        ("negative control: corrupted adjoint", lambda: _check_corrupted_adjoint(rng)),
        ("complexity accounting", _check_footprints),
        ("loss unit values", lambda: _check_loss_units(rng)),
        ("locality probes", lambda: _check_locality(small, rng)),
        ("checkpoint round trip", lambda: _check_checkpoint(rng)),
        ("training determinism", lambda: _check_determinism(seed)),
    ]
    rows = []
    for name, fn in checks:
        try:
            rows.append((name, True, fn()))
        except Exception as err:  # a failing property must not mask the rest
            rows.append((name, False, str(err)))
    return rows, all(ok for _, ok, _ in rows)


def _cmd_verify(args) -> int:
    mode = "small" if args.small else "full"
    rows, ok = run_verify(args.small, args.seed if args.seed is not None else 0)
    width = max(len(name) for name, _, _ in rows)
    lines = [f"striprestore verify ({mode}, seed {args.seed or 0})"]
    for name, passed, detail in rows:
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name.ljust(width)}  {detail}")
    n_fail = sum(not passed for _, passed, _ in rows)
    lines.append(f"{len(rows) - n_fail} passed, {n_fail} failed")
    text = "\n".join(lines)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.report.txt"), "w") as fp:
            fp.write(text + "\n")
        _write_settings(
            args.out,
            "verify.resolved.cfg",
            {"command": "verify", "small": str(args.small).lower(), "seed": args.seed or 0},
        )
    return 0 if ok else 1


_BENCH_HEADER = "frames,height,width,mechanism,closed_entries,measured_entries,seconds"


def _cmd_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.grid.split(",") if s.strip()]
        if not sizes or min(sizes) < 1:
            raise ValueError
    except ValueError:
        print(f"error: --grid wants comma-separated sizes, got {args.grid!r}", file=sys.stderr)
        return 2
    lines = [_BENCH_HEADER]
    for size in sizes:
        report = sa.attention_footprint(
            args.frames, size, size, measure_full=True if args.full else None
        )
        measured = report.measured()
        for mech in ("intra", "inter", "joint", "full"):
            got = measured[mech]
            secs = (report.seconds or {}).get(mech)
            lines.append(
                f"{args.frames},{size},{size},{mech},{report.closed_form[mech]},"
                f"{'' if got is None else got},"
                f"{'' if secs is None else f'{secs:.6f}'}"
            )
        if not report.matches():
            print(f"error: measured counts diverge at size {size}", file=sys.stderr)
            return 1
    text = "\n".join(lines)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "footprint.csv"), "w") as fp:
            fp.write(text + "\n")
        _write_settings(
            args.out,
            "bench.resolved.cfg",
            {
                "command": "bench",
                "grid": args.grid,
                "frames": args.frames,
                "full": "true" if args.full else "false",
            },
        )
        print(f"wrote {os.path.join(args.out, 'footprint.csv')}")
    else:
        print(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="striprestore",
        description="strip-attention video restoration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic clean/degraded dataset")
    _add_overlay_flags(p)
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--sequences", type=int, metavar="N", help="sequence count")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on streamed synthetic sequences")
    _add_overlay_flags(p)
    p.add_argument("--out", metavar="DIR", required=True, help="run directory")
    p.add_argument("--steps", type=int, metavar="N")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("restore", help="run a checkpoint over a frame directory")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--input", metavar="DIR", required=True, help="directory of .ppm frames")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--png", action="store_true", help="write PNG instead of PPM")
    p.set_defaults(func=_cmd_restore)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--small", action="store_true", help="reduced grids, same properties")
    p.add_argument("--seed", type=int, metavar="N", default=0)
    p.add_argument("--out", metavar="DIR", help="also write the report here")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("bench", help="footprint/runtime CSV over a size grid")
    p.add_argument("--grid", metavar="H1,H2,...", default="8,16,32")
    p.add_argument("--frames", type=int, metavar="T", default=4)
    p.add_argument("--full", action="store_true", help="measure full attention even when large")
    p.add_argument("--out", metavar="DIR", help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:  # argparse already printed usage
        return int(exit_.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as err:  # bad config / unreadable paths
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
