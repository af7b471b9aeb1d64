"""Pure-numpy implementations of the hot kernels.

Reference semantics for the numba backend; every function here must agree
with its numba twin to float rounding. Selected at import time by
``FORMATION_LAB_BACKEND=numpy``.
"""

import numpy as np


def directed_hausdorff(a, b):
    """max over rows of ``a`` of the min distance to any row of ``b``."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    return float(np.max(np.min(d, axis=1)))


def collision_count(pos, active, safe_radius):
    """Number of ordered active pairs (i, j), i != j, closer than safe_radius."""
    idx = np.flatnonzero(active)
    if idx.size < 2:
        return 0
    p = pos[idx]
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    hits = (d < safe_radius)
    np.fill_diagonal(hits, False)
    return int(np.count_nonzero(hits))


def gae_advantages(rewards, values, discount, lam):
    """Reverse-scan GAE: adv[t] = delta[t] + discount*lam*adv[t+1].

    ``values`` has length T+1 (bootstrap last).
    """
    T = rewards.shape[0]
    adv = np.zeros(T, dtype=rewards.dtype)
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + discount * values[t + 1] - values[t]
        running = delta + discount * lam * running
        adv[t] = running
    return adv


def attention_forward(q, k, v, offsets, scale):
    """Ragged multi-head attention: one query row per segment of K/V rows.

    q: (B, H, D), k/v: (R, H, D) where rows [offsets[b], offsets[b+1]) belong
    to query b. Returns (out (B, H, D), weights (R, H)).
    """
    B, H, D = q.shape
    R = k.shape[0]
    counts = np.diff(offsets)
    maxr = int(counts.max()) if B else 0
    # pad_idx[b, r] indexes a real row or repeats the segment's first row
    pad_idx = offsets[:-1, None] + np.minimum(np.arange(maxr)[None, :], counts[:, None] - 1)
    mask = np.arange(maxr)[None, :] < counts[:, None]          # (B, maxr)
    kp = k[pad_idx]                                            # (B, maxr, H, D)
    vp = v[pad_idx]
    scores = np.einsum("bhd,brhd->brh", q, kp) * scale         # (B, maxr, H)
    scores = np.where(mask[:, :, None], scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)                          # (B, maxr, H)
    out = np.einsum("brh,brhd->bhd", w, vp)
    weights = np.zeros((R, H), dtype=q.dtype)
    rows = pad_idx[mask]
    weights[rows] = w[mask]
    return out, weights


def attention_backward(d_out, q, k, v, offsets, weights, scale):
    """Backward pass of attention_forward.

    Rows are owned by exactly one query, so dK/dV are direct writes.
    Returns (dQ, dK, dV).
    """
    B, H, D = q.shape
    counts = np.diff(offsets)
    maxr = int(counts.max()) if B else 0
    pad_idx = offsets[:-1, None] + np.minimum(np.arange(maxr)[None, :], counts[:, None] - 1)
    mask = np.arange(maxr)[None, :] < counts[:, None]
    kp = k[pad_idx]
    vp = v[pad_idx]
    wp = weights[pad_idx[..., None], np.arange(H)[None, None, :]]   # (B, maxr, H)
    wp = np.where(mask[:, :, None], wp, 0.0)

    dv_p = wp[..., None] * d_out[:, None, :, :]                     # (B, maxr, H, D)
    dw = np.einsum("bhd,brhd->brh", d_out, vp)
    # softmax backward: ds = w * (dw - sum_r w*dw)
    dot = np.sum(wp * dw, axis=1, keepdims=True)
    ds = wp * (dw - dot)                                            # (B, maxr, H)
    dq = np.einsum("brh,brhd->bhd", ds, kp) * scale
    dk_p = ds[..., None] * q[:, None, :, :] * scale                 # (B, maxr, H, D)

    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    rows = pad_idx[mask]
    dk[rows] = dk_p[mask]
    dv[rows] = dv_p[mask]
    return dq, dk, dv


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    """Bias-corrected Adam, in place on flat float arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mh = m / (1.0 - beta1 ** step)
    vh = v / (1.0 - beta2 ** step)
    p -= lr * mh / (np.sqrt(vh) + eps)
