"""Encoder-decoder restoration model over frame stacks.

Layout: two feature-extraction blocks (FEBs) encode each frame (the second
at stride 2), a stack of attention blocks mixes strips at the bottleneck,
and two decoder FEBs with a nearest-neighbor upsample mirror the encoder.
Skip connections are additive; the final 3x3 projection starts at zero so a
fresh model with the global residual is the identity.

All learnable state lives in one flat name -> array dict; `bind_weights`
turns it into tape leaves for a differentiable forward pass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import attention as sa
from . import autodiff as ad
from . import vstf
from .autodiff import DiffTensor, Tape

__all__ = [
    "ModelConfig",
    "model_shapes",
    "init_model_weights",
    "bind_weights",
    "feb_forward",
    "stsa_forward",
    "model_forward",
    "restore_frames",
    "param_count",
    "paper_scale_config",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("stsa", "joint")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; validation happens in __post_init__."""

    num_stsa_blocks: int = 2
    base_channels: int = 16
    heads: int = 8
    frame_window: int = 4
    global_residual: bool = True
    directions: str = "both"
    variant: str = "stsa"

    def __post_init__(self):
        if self.num_stsa_blocks < 1:
            raise ValueError(
                f"num_stsa_blocks must be >= 1, got {self.num_stsa_blocks}"
            )
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.frame_window < 1:
            raise ValueError(f"frame_window must be >= 1, got {self.frame_window}")
        if self.heads < 1 or self.base_channels % self.heads != 0:
            raise ValueError(
                f"heads = {self.heads} is incompatible with base_channels = "
                f"{self.base_channels}: each attention branch is base_channels "
                f"wide and must divide evenly into heads"
            )
        if self.directions not in sa.DIRECTIONS:
            raise ValueError(
                f"directions must be one of {sa.DIRECTIONS}, got {self.directions!r}"
            )
        if self.variant not in VARIANTS:
            raise ValueError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )

    @property
    def bottleneck_channels(self) -> int:
        return 2 * self.base_channels

    @property
    def encoder_scales(self) -> tuple[tuple[int, int], ...]:
        """(stride, output channels) per encoder stage."""
        return ((1, self.base_channels), (2, self.bottleneck_channels))


def _feb_shapes(cin: int, cout: int) -> dict[str, tuple[int, ...]]:
    shapes = {"conv_w": (3, 3, cin, cout), "conv_b": (cout,)}
    for i in (1, 2, 3):
        shapes[f"res{i}_w1"] = (3, 3, cout, cout)
        shapes[f"res{i}_b1"] = (cout,)
        shapes[f"res{i}_w2"] = (3, 3, cout, cout)
        shapes[f"res{i}_b2"] = (cout,)
    return shapes


def model_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Flat name -> shape map of every learnable tensor."""
    c0 = cfg.base_channels
    cb = cfg.bottleneck_channels
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix, cin, cout in [
        ("enc1", 3, c0),
        ("enc2", c0, cb),
        ("dec1", cb, c0),
        ("dec2", c0, c0),
    ]:
        for name, shape in _feb_shapes(cin, cout).items():
            shapes[f"{prefix}.{name}"] = shape
    att = sa.strip_attention_shapes(cb, cfg.heads)
    parts = ("intra", "inter") if cfg.variant == "stsa" else ("joint",)
    for i in range(cfg.num_stsa_blocks):
        for part in parts:
            for name, shape in att.items():
                shapes[f"blocks.{i}.{part}.{name}"] = shape
    shapes["head.proj_w"] = (3, 3, c0, 3)
    shapes["head.proj_b"] = (3,)
    return shapes


def init_model_weights(
    cfg: ModelConfig, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Fresh weights; the output projection starts at zero (identity model)."""
    weights: dict[str, np.ndarray] = {}
    for name, shape in model_shapes(cfg).items():
        short = name.rsplit(".", 1)[-1]
        if name.startswith("head."):
            weights[name] = np.zeros(shape)
        elif short.endswith("gamma"):
            weights[name] = np.ones(shape)
        elif short.endswith(("beta", "_b", "b1", "b2")) and len(shape) == 1:
            weights[name] = np.zeros(shape)
        else:
            fan_in = shape[-2] if len(shape) == 2 else int(np.prod(shape[:-1]))
            weights[name] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)
    return weights


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in model_shapes(cfg).values())


def paper_scale_config() -> ModelConfig:
    """Full-scale configuration; desk runs use much smaller ones."""
    return ModelConfig(
        num_stsa_blocks=4, base_channels=112, heads=8, frame_window=16
    )


def bind_weights(tape: Tape, weights: dict[str, np.ndarray]) -> dict[str, DiffTensor]:
    return {name: tape.leaf(arr) for name, arr in weights.items()}


def feb_forward(
    x: DiffTensor, store: dict[str, DiffTensor], prefix: str, stride: int = 1
) -> DiffTensor:
    """One conv (optionally strided) followed by three residual blocks."""
    y = ad.conv2d(x, store[f"{prefix}.conv_w"], store[f"{prefix}.conv_b"], stride=stride)
    for i in (1, 2, 3):
        r = ad.conv2d(y, store[f"{prefix}.res{i}_w1"], store[f"{prefix}.res{i}_b1"])
        r = ad.leaky_relu(r, slope=0.1)
        r = ad.conv2d(r, store[f"{prefix}.res{i}_w2"], store[f"{prefix}.res{i}_b2"])
        y = ad.add(y, r)
    return y


def stsa_forward(
    x: DiffTensor,
    store: dict[str, DiffTensor],
    prefix: str,
    cfg: ModelConfig,
) -> DiffTensor:
    """One bottleneck mixing block: intra then inter, or the joint variant."""
    if cfg.variant == "stsa":
        intra = sa.bind_strip_attention(store, cfg.heads, f"{prefix}.intra.")
        inter = sa.bind_strip_attention(store, cfg.heads, f"{prefix}.inter.")
        y = sa.intra_sa_block(x, intra, directions=cfg.directions)
        return sa.inter_sa_block(y, inter, directions=cfg.directions)
    joint = sa.bind_strip_attention(store, cfg.heads, f"{prefix}.joint.")
    return sa.joint_strip_attention(x, joint, directions=cfg.directions)


def model_forward(
    x: DiffTensor, store: dict[str, DiffTensor], cfg: ModelConfig
) -> DiffTensor:
    """Restore a [T,H,W,3] frame stack; output shape equals input shape."""
    if x.value.ndim != 4 or x.shape[3] != 3:
        raise ValueError(f"expected [T,H,W,3] input, got shape {x.shape}")
    t_n, h_n, w_n, _ = x.shape
    if h_n % 2 or w_n % 2:
        raise ValueError(
            f"H and W must be divisible by 2 (encoder stride), got {h_n}x{w_n}"
        )
    e1 = feb_forward(x, store, "enc1", stride=1)
    e2 = feb_forward(e1, store, "enc2", stride=2)
    b = e2
    for i in range(cfg.num_stsa_blocks):
        b = stsa_forward(b, store, f"blocks.{i}", cfg)
    b = ad.add(b, e2)
    d1 = feb_forward(ad.upsample_nearest2(b), store, "dec1", stride=1)
    d1 = ad.add(d1, e1)
    d2 = feb_forward(d1, store, "dec2", stride=1)
    out = ad.conv2d(d2, store["head.proj_w"], store["head.proj_b"])
    if cfg.global_residual:
        out = ad.add(out, x)
    return out


def restore_frames(
    frames: np.ndarray, weights: dict[str, np.ndarray], cfg: ModelConfig
) -> np.ndarray:
    """Forward pass without gradient bookkeeping kept around."""
    tape = Tape()
    return model_forward(tape.leaf(frames), bind_weights(tape, weights), cfg).value


_CKPT_MAGIC = b"VSCK"


def save_checkpoint(
    path, cfg: ModelConfig, weights: dict[str, np.ndarray]
) -> None:
    """Checkpoint = config JSON, a (name, offset, shape) table, then tensor
    records.  Tensors use the float64 record version so reload is bit-exact."""
    payloads: list[bytes] = []
    table: list[tuple[str, int, tuple[int, ...]]] = []
    offset = 0
    for name, arr in weights.items():
        raw = vstf.dumps(arr, version=2)
        table.append((name, offset, np.asarray(arr).shape))
        payloads.append(raw)
        offset += len(raw)
    cfg_raw = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(_CKPT_MAGIC)
        fp.write(struct.pack("<II", 1, len(cfg_raw)))
        fp.write(cfg_raw)
        fp.write(struct.pack("<I", len(table)))
        for name, off, shape in table:
            raw_name = name.encode("utf-8")
            fp.write(struct.pack("<H", len(raw_name)))
            fp.write(raw_name)
            fp.write(struct.pack("<QB", off, len(shape)))
            fp.write(struct.pack(f"<{len(shape)}Q", *shape))
        for raw in payloads:
            fp.write(raw)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, cfg_len = struct.unpack("<II", fp.read(8))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig(**json.loads(fp.read(cfg_len).decode("utf-8")))
        (n_entries,) = struct.unpack("<I", fp.read(4))
        table = []
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<H", fp.read(2))
            name = fp.read(nlen).decode("utf-8")
            off, rank = struct.unpack("<QB", fp.read(9))
            shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
            table.append((name, off, shape))
        base = fp.tell()
        weights: dict[str, np.ndarray] = {}
        for name, off, shape in table:
            fp.seek(base + off)
            arr = vstf.read_tensor(fp)
            if arr.shape != shape:
                raise ValueError(
                    f"checkpoint entry {name}: table shape {shape} does not "
                    f"match record shape {arr.shape}"
                )
            weights[name] = arr
    expected = model_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise ValueError(f"checkpoint missing tensors: {missing[:5]}")
    return cfg, weights
