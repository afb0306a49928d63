"""Strip attention over video feature volumes.

Tokens are whole rows or columns of a frame.  Three groupings are provided:

* intra: the strips of one frame attend to each other (spatial mixing),
  independently per frame;
* inter: co-located strips (same row or column index) attend across the
  frame window (temporal mixing);
* joint: every strip of every frame attends to every other strip of the
  same direction in one attention matrix.

Each block is two parallel branches (horizontal strips on the first half of
the channels, vertical strips on the second half) followed by a shared
output stage: 1x1 fusion conv, residual, layer norm, MLP, second residual.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

__all__ = [
    "StripAttentionParams",
    "FootprintReport",
    "strip_attention_shapes",
    "init_strip_attention",
    "bind_strip_attention",
    "intra_sa_attended",
    "inter_sa_attended",
    "joint_attended",
    "intra_sa_block",
    "inter_sa_block",
    "joint_strip_attention",
    "count_attention_entries",
    "attention_footprint",
    "footprint_closed_forms",
]

DIRECTIONS = ("h", "v", "both")


@dataclass
class StripAttentionParams:
    """Learnable state of one attention block, bound to a tape.

    Projections are stored with all heads stacked along columns: head m of a
    C'-channel branch owns columns [m*C'/M, (m+1)*C'/M).
    """

    heads: int
    ln1_gamma: DiffTensor
    ln1_beta: DiffTensor
    pq_h: DiffTensor
    pk_h: DiffTensor
    pv_h: DiffTensor
    pq_v: DiffTensor
    pk_v: DiffTensor
    pv_v: DiffTensor
    fuse_w: DiffTensor
    fuse_b: DiffTensor
    ln2_gamma: DiffTensor
    ln2_beta: DiffTensor
    mlp_w1: DiffTensor
    mlp_b1: DiffTensor
    mlp_w2: DiffTensor
    mlp_b2: DiffTensor


_PARAM_FIELDS = [
    "ln1_gamma",
    "ln1_beta",
    "pq_h",
    "pk_h",
    "pv_h",
    "pq_v",
    "pk_v",
    "pv_v",
    "fuse_w",
    "fuse_b",
    "ln2_gamma",
    "ln2_beta",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
]


def _check_channels(channels: int, heads: int) -> int:
    if channels % 2 != 0:
        raise ValueError(f"channels must be even to split into branches, got {channels}")
    half = channels // 2
    if heads < 1 or half % heads != 0:
        raise ValueError(
            f"branch width {half} (= channels/2) must be divisible by heads={heads}"
        )
    return half


def strip_attention_shapes(channels: int, heads: int) -> dict[str, tuple[int, ...]]:
    """Name -> shape map of one block's learnable tensors."""
    half = _check_channels(channels, heads)
    return {
        "ln1_gamma": (channels,),
        "ln1_beta": (channels,),
        "pq_h": (half, half),
        "pk_h": (half, half),
        "pv_h": (half, half),
        "pq_v": (half, half),
        "pk_v": (half, half),
        "pv_v": (half, half),
        "fuse_w": (1, 1, channels, channels),
        "fuse_b": (channels,),
        "ln2_gamma": (channels,),
        "ln2_beta": (channels,),
        "mlp_w1": (channels, 2 * channels),
        "mlp_b1": (2 * channels,),
        "mlp_w2": (2 * channels, channels),
        "mlp_b2": (channels,),
    }


def init_strip_attention(
    rng: np.random.Generator, channels: int, heads: int
) -> dict[str, np.ndarray]:
    """Fresh weight arrays for one block."""
    out: dict[str, np.ndarray] = {}
    for name, shape in strip_attention_shapes(channels, heads).items():
        if name.endswith("gamma"):
            out[name] = np.ones(shape)
        elif name.endswith(("beta", "_b", "b1", "b2")):
            out[name] = np.zeros(shape)
        else:
            fan_in = shape[-2] if len(shape) == 2 else shape[0] * shape[1] * shape[2]
            out[name] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)
    return out


def bind_strip_attention(store, heads: int, prefix: str = "") -> StripAttentionParams:
    """Assemble a parameter bundle from a flat name -> DiffTensor mapping."""
    return StripAttentionParams(
        heads=heads, **{f: store[prefix + f] for f in _PARAM_FIELDS}
    )


class _EntryCounter:
    """Accumulates attention-matrix entry counts, per head set."""

    def __init__(self):
        self.entries = 0

    def add(self, n: int) -> None:
        self.entries += n


_COUNTERS: list[_EntryCounter] = []


@contextmanager
def count_attention_entries():
    """Context manager that counts score-matrix entries of enclosed forwards."""
    counter = _EntryCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.pop()


def _note_scores(shape: tuple[int, ...], heads: int) -> None:
    if _COUNTERS:
        _COUNTERS[-1].add(int(np.prod(shape)) // heads)


# token layouts: permutation of [T,H,W,M,d] into [batch..., tokens, dim],
# the token-matrix shape, and the inverse permutation back to [T,H,W,M,d]
def _layout(mode: str, direction: str, t: int, h: int, w: int, m: int, d: int):
    if mode == "intra":
        if direction == "h":
            return (0, 3, 1, 2, 4), (t, m, h, w * d), (t, m, h, w, d), (0, 2, 3, 1, 4)
        return (0, 3, 2, 1, 4), (t, m, w, h * d), (t, m, w, h, d), (0, 3, 2, 1, 4)
    if mode == "inter":
        if direction == "h":
            return (1, 3, 0, 2, 4), (h, m, t, w * d), (h, m, t, w, d), (2, 0, 3, 1, 4)
        return (2, 3, 0, 1, 4), (w, m, t, h * d), (w, m, t, h, d), (2, 3, 0, 1, 4)
    if mode == "joint":
        if direction == "h":
            return (3, 0, 1, 2, 4), (m, t * h, w * d), (m, t, h, w, d), (1, 2, 3, 0, 4)
        return (3, 0, 2, 1, 4), (m, t * w, h * d), (m, t, w, h, d), (1, 3, 2, 0, 4)
    raise ValueError(f"unknown attention mode {mode!r}")


def _project_heads(x_half: DiffTensor, proj: DiffTensor, heads: int) -> DiffTensor:
    t, h, w, cp = x_half.shape
    flat = ad.reshape(x_half, (t * h * w, cp))
    y = ad.matmul(flat, proj)
    return ad.reshape(y, (t, h, w, heads, cp // heads))


def _branch_attended(
    x_half: DiffTensor, p: StripAttentionParams, mode: str, direction: str
) -> DiffTensor:
    """One direction's attended features, [T,H,W,C'] in and out."""
    t, h, w, cp = x_half.shape
    m = p.heads
    d = cp // m
    pq, pk, pv = (
        (p.pq_h, p.pk_h, p.pv_h) if direction == "h" else (p.pq_v, p.pk_v, p.pv_v)
    )
    q5 = _project_heads(x_half, pq, m)
    k5 = _project_heads(x_half, pk, m)
    v5 = _project_heads(x_half, pv, m)

    perm, tok_shape, back_shape, inv_perm = _layout(mode, direction, t, h, w, m, d)
    qt = ad.reshape(ad.transpose(q5, perm), tok_shape)
    kt = ad.reshape(ad.transpose(k5, perm), tok_shape)
    vt = ad.reshape(ad.transpose(v5, perm), tok_shape)

    swap = tuple(range(len(tok_shape) - 2)) + (len(tok_shape) - 1, len(tok_shape) - 2)
    scores = ad.scale(ad.matmul(qt, ad.transpose(kt, swap)), 1.0 / np.sqrt(tok_shape[-1]))
    _note_scores(scores.shape, m)
    ctx = ad.matmul(ad.softmax_last_axis(scores), vt)

    ctx = ad.transpose(ad.reshape(ctx, back_shape), inv_perm)
    return ad.reshape(ctx, (t, h, w, cp))


def _split_halves(x: DiffTensor) -> tuple[DiffTensor, DiffTensor]:
    c = x.shape[3]
    half = _check_channels(c, 1)
    return ad.narrow(x, 3, 0, half), ad.narrow(x, 3, half, half)


def _attended_pair(
    x: DiffTensor, p: StripAttentionParams, mode: str
) -> tuple[DiffTensor, DiffTensor]:
    if x.value.ndim != 4:
        raise ValueError(f"expected [T,H,W,C] input, got shape {x.shape}")
    _check_channels(x.shape[3], p.heads)
    normed = ad.layer_norm_channels(x, p.ln1_gamma, p.ln1_beta)
    xh, xv = _split_halves(normed)
    return (
        _branch_attended(xh, p, mode, "h"),
        _branch_attended(xv, p, mode, "v"),
    )


def intra_sa_attended(x: DiffTensor, p: StripAttentionParams):
    """Pre-fusion attended features (horizontal, vertical) of the intra block."""
    return _attended_pair(x, p, "intra")


def inter_sa_attended(x: DiffTensor, p: StripAttentionParams):
    """Pre-fusion attended features of the inter (cross-frame) block."""
    return _attended_pair(x, p, "inter")


def joint_attended(x: DiffTensor, p: StripAttentionParams):
    """Pre-fusion attended features of the joint all-frames variant."""
    return _attended_pair(x, p, "joint")


def _apply_direction_gate(
    x: DiffTensor, pair: tuple[DiffTensor, DiffTensor], directions: str
) -> tuple[DiffTensor, DiffTensor]:
    if directions not in DIRECTIONS:
        raise ValueError(f"directions must be one of {DIRECTIONS}, got {directions!r}")
    oh, ov = pair
    if directions == "h":
        ov = x.tape.leaf(np.zeros(ov.shape))
    elif directions == "v":
        oh = x.tape.leaf(np.zeros(oh.shape))
    return oh, ov


def _output_stage(
    x: DiffTensor, oh: DiffTensor, ov: DiffTensor, p: StripAttentionParams
) -> DiffTensor:
    t, h, w, c = x.shape
    fused = ad.conv2d(ad.concat([oh, ov], axis=3), p.fuse_w, p.fuse_b)
    pre = ad.add(fused, x)
    normed = ad.layer_norm_channels(pre, p.ln2_gamma, p.ln2_beta)
    flat = ad.reshape(normed, (t * h * w, c))
    hidden = ad.gelu(ad.add_bias(ad.matmul(flat, p.mlp_w1), p.mlp_b1))
    out = ad.add_bias(ad.matmul(hidden, p.mlp_w2), p.mlp_b2)
    return ad.add(ad.reshape(out, (t, h, w, c)), pre)


def intra_sa_block(
    x: DiffTensor, p: StripAttentionParams, directions: str = "both"
) -> DiffTensor:
    """Per-frame strip attention block; frames never mix."""
    pair = _apply_direction_gate(x, intra_sa_attended(x, p), directions)
    return _output_stage(x, *pair, p)


def inter_sa_block(
    x: DiffTensor, p: StripAttentionParams, directions: str = "both"
) -> DiffTensor:
    """Cross-frame strip attention block over co-located strips."""
    pair = _apply_direction_gate(x, inter_sa_attended(x, p), directions)
    return _output_stage(x, *pair, p)


def joint_strip_attention(
    x: DiffTensor, p: StripAttentionParams, directions: str = "both"
) -> DiffTensor:
    """Ablation variant: all strips of all frames attend in one matrix."""
    pair = _apply_direction_gate(x, joint_attended(x, p), directions)
    return _output_stage(x, *pair, p)


def _pixel_attention_attended(x: DiffTensor, p: StripAttentionParams) -> DiffTensor:
    """Vanilla attention with every pixel of every frame as a token.

    Only used as the footprint comparator; runs on the horizontal half.
    """
    t, h, w, c = x.shape
    m = p.heads
    normed = ad.layer_norm_channels(x, p.ln1_gamma, p.ln1_beta)
    xh, _ = _split_halves(normed)
    d = xh.shape[3] // m
    q5 = _project_heads(xh, p.pq_h, m)
    k5 = _project_heads(xh, p.pk_h, m)
    v5 = _project_heads(xh, p.pv_h, m)
    tok = (m, t * h * w, d)
    qt = ad.reshape(ad.transpose(q5, (3, 0, 1, 2, 4)), tok)
    kt = ad.reshape(ad.transpose(k5, (3, 0, 1, 2, 4)), tok)
    vt = ad.reshape(ad.transpose(v5, (3, 0, 1, 2, 4)), tok)
    scores = ad.scale(ad.matmul(qt, ad.transpose(kt, (0, 2, 1))), 1.0 / np.sqrt(d))
    _note_scores(scores.shape, m)
    ctx = ad.matmul(ad.softmax_last_axis(scores), vt)
    ctx = ad.transpose(ad.reshape(ctx, (m, t, h, w, d)), (1, 2, 3, 0, 4))
    return ad.reshape(ctx, (t, h, w, xh.shape[3]))


def footprint_closed_forms(t: int, h: int, w: int) -> dict[str, int]:
    """Attention-entry counts per head set, as closed-form expressions."""
    return {
        "intra": t * (h * h + w * w),
        "inter": (h + w) * t * t,
        "joint": t * t * (h * h + w * w),
        "full": (h * w * t) ** 2,
    }


@dataclass
class FootprintReport:
    """Measured vs closed-form attention-entry counts for one (T,H,W)."""

    frames: int
    height: int
    width: int
    intra_entries: int
    inter_entries: int
    joint_entries: int
    full_entries: int | None
    closed_form: dict[str, int]
    seconds: dict[str, float] | None = None

    def measured(self) -> dict[str, int | None]:
        return {
            "intra": self.intra_entries,
            "inter": self.inter_entries,
            "joint": self.joint_entries,
            "full": self.full_entries,
        }

    def matches(self) -> bool:
        return all(
            v is None or v == self.closed_form[k] for k, v in self.measured().items()
        )


# measuring full attention above this many score entries is pointless at desk scale
_FULL_MEASURE_LIMIT = 1 << 22


def attention_footprint(
    t: int,
    h: int,
    w: int,
    *,
    channels: int = 4,
    heads: int = 2,
    measure_full: bool | None = None,
    seed: int = 0,
) -> FootprintReport:
    """Run each mechanism on a random input and count score-matrix entries."""
    if min(t, h, w) < 1:
        raise ValueError(f"extents must be positive, got T={t} H={h} W={w}")
    closed = footprint_closed_forms(t, h, w)
    if measure_full is None:
        measure_full = closed["full"] <= _FULL_MEASURE_LIMIT

    rng = np.random.default_rng(seed)
    weights = init_strip_attention(rng, channels, heads)
    x_arr = rng.normal(size=(t, h, w, channels))
    seconds: dict[str, float] = {}

    def run(kind: str) -> int:
        tape = ad.Tape()
        p = bind_strip_attention(
            {k: tape.leaf(v) for k, v in weights.items()}, heads
        )
        x = tape.leaf(x_arr)
        start = time.perf_counter()
        with count_attention_entries() as counter:
            if kind == "full":
                _pixel_attention_attended(x, p)
            else:
                _attended_pair(x, p, kind)
        seconds[kind] = time.perf_counter() - start
        return counter.entries

    return FootprintReport(
        frames=t,
        height=h,
        width=w,
        intra_entries=run("intra"),
        inter_entries=run("inter"),
        joint_entries=run("joint"),
        full_entries=run("full") if measure_full else None,
        closed_form=closed,
        seconds=seconds,
    )
