"""Numba-jitted twins of the numpy kernels.

Same signatures and semantics as ``numpy_impl``; the ragged attention loops
avoid the padded temporaries the numpy path needs. fastmath stays off so the
two backends agree to rounding and gradient checks stay crisp.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def directed_hausdorff(a, b):
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    worst = 0.0
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            d = np.sqrt(dx * dx + dy * dy)
            if d < best:
                best = d
        if best > worst:
            worst = best
    return worst


@njit(cache=True)
def collision_count(pos, active, safe_radius):
    n = pos.shape[0]
    count = 0
    for i in range(n):
        if not active[i]:
            continue
        for j in range(n):
            if i == j or not active[j]:
                continue
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            if np.sqrt(dx * dx + dy * dy) < safe_radius:
                count += 1
    return count


@njit(cache=True)
def gae_advantages(rewards, values, discount, lam):
    T = rewards.shape[0]
    adv = np.zeros(T, dtype=rewards.dtype)
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + discount * values[t + 1] - values[t]
        running = delta + discount * lam * running
        adv[t] = running
    return adv


@njit(cache=True)
def attention_forward(q, k, v, offsets, scale):
    B, H, D = q.shape
    R = k.shape[0]
    out = np.zeros((B, H, D), dtype=q.dtype)
    weights = np.zeros((R, H), dtype=q.dtype)
    for b in range(B):
        lo = offsets[b]
        hi = offsets[b + 1]
        for h in range(H):
            mx = -np.inf
            for r in range(lo, hi):
                s = 0.0
                for c in range(D):
                    s += q[b, h, c] * k[r, h, c]
                s *= scale
                weights[r, h] = s
                if s > mx:
                    mx = s
            total = 0.0
            for r in range(lo, hi):
                e = np.exp(weights[r, h] - mx)
                weights[r, h] = e
                total += e
            for r in range(lo, hi):
                weights[r, h] /= total
            for c in range(D):
                acc = 0.0
                for r in range(lo, hi):
                    acc += weights[r, h] * v[r, h, c]
                out[b, h, c] = acc
    return out, weights


@njit(cache=True)
def attention_backward(d_out, q, k, v, offsets, weights, scale):
    B, H, D = q.shape
    R = k.shape[0]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dw = np.empty(R, dtype=q.dtype)
    for b in range(B):
        lo = offsets[b]
        hi = offsets[b + 1]
        for h in range(H):
            dot = 0.0
            for r in range(lo, hi):
                acc = 0.0
                for c in range(D):
                    dv[r, h, c] = weights[r, h] * d_out[b, h, c]
                    acc += d_out[b, h, c] * v[r, h, c]
                dw[r] = acc
                dot += weights[r, h] * acc
            for r in range(lo, hi):
                ds = weights[r, h] * (dw[r] - dot) * scale
                for c in range(D):
                    dq[b, h, c] += ds * k[r, h, c]
                    dk[r, h, c] = ds * q[b, h, c]
    return dq, dk, dv


@njit(cache=True)
def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
