"""Independent oracles the test suite trusts.

The attention oracle here is deliberately pedestrian: tokens are gathered
with explicit per-strip loops and attention is one dense masked computation.
None of the production reshape/transpose tricks are shared, so agreement
between the two routes is evidence, not tautology.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "masked_full_attention",
    "strip_tokens",
    "scatter_strip_tokens",
    "intra_mask",
    "inter_mask",
    "joint_mask",
    "reference_layer_norm",
    "finite_diff_check",
    "locality_probe",
]


def masked_full_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: float
) -> np.ndarray:
    """Scaled dot-product attention over explicit token matrices with a boolean mask.

    `q`, `k`, `v` are [n_tokens, dim]; `mask[i, j]` says query i may attend to
    key j.  Disallowed scores are -inf before the softmax.  Every query must
    be allowed at least one key.
    """
    n = q.shape[0]
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} tokens")
    allowed_per_query = mask.sum(axis=1)
    if np.any(allowed_per_query == 0):
        bad = int(np.argmin(allowed_per_query))
        raise ValueError(f"query {bad} has no allowed keys")
    scores = (q @ k.T) / scale
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights[~mask] = 0.0
    weights = weights / weights.sum(axis=1, keepdims=True)
    return weights @ v


def strip_tokens(
    x: np.ndarray, proj: np.ndarray, head: int, heads: int, direction: str
) -> np.ndarray:
    """Gather one head's strip tokens from [T,H,W,Cp] features, loop by loop.

    Horizontal tokens are rows (one per (frame, row)), vertical tokens are
    columns.  Token order is frame-major, strip-minor.
    """
    t_n, h_n, w_n, cp = x.shape
    d = cp // heads
    projected = np.empty((t_n, h_n, w_n, d))
    block = proj[:, head * d : (head + 1) * d]
    for t in range(t_n):
        for i in range(h_n):
            for j in range(w_n):
                projected[t, i, j] = x[t, i, j] @ block
    tokens = []
    if direction == "h":
        for t in range(t_n):
            for i in range(h_n):
                tokens.append(
                    np.concatenate([projected[t, i, j] for j in range(w_n)])
                )
    elif direction == "v":
        for t in range(t_n):
            for j in range(w_n):
                tokens.append(
                    np.concatenate([projected[t, i, j] for i in range(h_n)])
                )
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return np.stack(tokens)


def scatter_strip_tokens(
    tokens: np.ndarray, t_n: int, h_n: int, w_n: int, heads_d: int, direction: str
) -> np.ndarray:
    """Inverse of `strip_tokens` for one head: tokens back to [T,H,W,d]."""
    out = np.empty((t_n, h_n, w_n, heads_d))
    idx = 0
    if direction == "h":
        for t in range(t_n):
            for i in range(h_n):
                row = tokens[idx].reshape(w_n, heads_d)
                for j in range(w_n):
                    out[t, i, j] = row[j]
                idx += 1
    elif direction == "v":
        for t in range(t_n):
            for j in range(w_n):
                col = tokens[idx].reshape(h_n, heads_d)
                for i in range(h_n):
                    out[t, i, j] = col[i]
                idx += 1
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return out


def _token_frames(t_n: int, strips: int) -> np.ndarray:
    return np.repeat(np.arange(t_n), strips)


def _token_strips(t_n: int, strips: int) -> np.ndarray:
    return np.tile(np.arange(strips), t_n)


def intra_mask(t_n: int, strips: int) -> np.ndarray:
    """Allowed pairs: same frame (tokens ordered frame-major, strip-minor)."""
    f = _token_frames(t_n, strips)
    return f[:, None] == f[None, :]


def inter_mask(t_n: int, strips: int) -> np.ndarray:
    """Allowed pairs: same strip index across frames."""
    s = _token_strips(t_n, strips)
    return s[:, None] == s[None, :]


def joint_mask(t_n: int, strips: int) -> np.ndarray:
    """All strips of one direction attend to each other across all frames."""
    n = t_n * strips
    return np.ones((n, n), dtype=bool)


def reference_layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Plain-numpy per-location channel normalization, for oracle input prep."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def finite_diff_check(
    loss_and_grads,
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    coords_per_tensor: int = 64,
    rng: np.random.Generator | None = None,
    loss_fn=None,
) -> dict:
    """Compare tape gradients against central finite differences.

    `loss_and_grads(params) -> (float, dict[str, ndarray])` must be a
    deterministic pure function of the parameter dict.  Large tensors are
    probed on `coords_per_tensor` sampled coordinates; smaller ones on all.
    Relative error uses denominator max(|a|, |b|, 1e-8).  `loss_fn`, if
    given, evaluates the loss without gradients for the bump evaluations.
    """
    rng = rng or np.random.default_rng(0)
    if loss_fn is None:
        loss_fn = lambda p: loss_and_grads(p)[0]  # noqa: E731
    base, grads = loss_and_grads(params)
    if not np.isfinite(base):
        raise ValueError(f"loss is not finite: {base}")
    worst = 0.0
    per_tensor = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        n = flat.size
        if n <= coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_tensor, replace=False)
        g_analytic = grads[name].reshape(-1)
        t_worst = 0.0
        for c in coords:
            saved = flat[c]
            flat[c] = saved + h
            up = loss_fn(params)
            flat[c] = saved - h
            down = loss_fn(params)
            flat[c] = saved
            fd = (up - down) / (2 * h)
            a = g_analytic[c]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            t_worst = max(t_worst, err)
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
    return {"max_rel_err": worst, "per_tensor": per_tensor, "loss": base}


def locality_probe(
    block_fn, x: np.ndarray, site: tuple, delta: float = 1e-3
) -> np.ndarray:
    """Boolean map of output entries changed by perturbing one input entry."""
    base = block_fn(x)
    xp = x.copy()
    xp[site] += delta
    bumped = block_fn(xp)
    return base != bumped
