"""Trainable building blocks on top of the autodiff tape.

Parameter stores pair every named array with a gradient buffer and Adam
moments. Forward helpers (affine stacks, multi-head attention, Gaussian
log-densities) build tape graphs; ``finite_diff_check`` is the harness that
keeps every analytic gradient honest against central differences.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels


def orthogonal(rng, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight init (QR of a Gaussian draw, sign-fixed)."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class ParamStore:
    """Named parameters with paired grad buffers and Adam moments.

    float64 by default; float32 exists for the long supervised runs where
    the budget demands it (gradient checks always run at float64).
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros(arr.size, dtype=self.dtype)
        self._v[name] = np.zeros(arr.size, dtype=self.dtype)

    def bind(self) -> dict:
        """Fresh leaf tensors over the current parameter arrays."""
        return {name: ad.parameter(arr) for name, arr in self.params.items()}

    def accumulate(self, leaves: dict):
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self.grads[name] += leaf.grad

    def zero_grads(self):
        for g in self.grads.values():
            g[:] = 0.0

    def grad_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return math.sqrt(total)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_values(self) -> dict:
        return {name: arr.copy() for name, arr in self.params.items()}

    def load_values(self, values: dict):
        for name, arr in values.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: "
                    f"{self.params[name].shape} vs {arr.shape}"
                )
            self.params[name][:] = arr


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    norm = store.grad_norm()
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in store.grads.values():
            g *= factor
    return norm


def adam_step(store: ParamStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam over every parameter; gradients are consumed."""
    store.step += 1
    for name, p in store.params.items():
        kernels.adam_update(
            p.reshape(-1), store.grads[name].reshape(-1),
            store._m[name], store._v[name],
            store.step, lr, beta1, beta2, eps,
        )
    store.zero_grads()


# -- affine stacks -------------------------------------------------------

_ACTIVATIONS = {
    None: lambda x: x,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softmax": ad.softmax_rows,
}


@dataclass
class MlpSpec:
    name: str
    sizes: tuple                 # (in, hidden..., out)
    hidden_act: str = "tanh"
    out_act: str | None = None
    out_gain: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1


def init_mlp(store: ParamStore, spec: MlpSpec, rng):
    for i in range(spec.n_layers):
        rows, cols = spec.sizes[i], spec.sizes[i + 1]
        gain = spec.out_gain if i == spec.n_layers - 1 else 1.0
        store.add(f"{spec.name}.w{i}", orthogonal(rng, rows, cols, gain))
        store.add(f"{spec.name}.b{i}", np.zeros(cols))


def mlp_forward(leaves: dict, spec: MlpSpec, x):
    """Alternating affine layers and activations; final activation per spec."""
    out = x if isinstance(x, ad.Tensor) else ad.constant(x)
    if out.value.shape[-1] != spec.sizes[0]:
        raise ValueError(
            f"{spec.name}: expected input width {spec.sizes[0]}, "
            f"got {out.value.shape[-1]}"
        )
    for i in range(spec.n_layers):
        out = ad.add(ad.matmul(out, leaves[f"{spec.name}.w{i}"]),
                     leaves[f"{spec.name}.b{i}"])
        act = spec.hidden_act if i < spec.n_layers - 1 else spec.out_act
        out = _ACTIVATIONS[act](out)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (plain numpy)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# -- attention -------------------------------------------------------------

@dataclass
class AttentionConfig:
    heads: int
    model_dim: int
    out_dim: int

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def att_scale(self) -> float:
        # scale constant is the per-head key width
        return 1.0 / math.sqrt(self.head_dim)


def init_attention(store: ParamStore, config: AttentionConfig, rng, name="attn"):
    """Projection matrices, stored split along the [message || distance-code]
    row halves so the fused forward can project each half separately."""
    dm, dh = config.model_dim, config.head_dim
    half = dm // 2
    for mat in ("w_q", "w_k", "w_v"):
        blocks = [orthogonal(rng, dm, dh) for _ in range(config.heads)]
        full = np.concatenate(blocks, axis=1)
        store.add(f"{name}.{mat}_msg", full[:half])
        store.add(f"{name}.{mat}_de", full[half:])
    store.add(f"{name}.w_o", orthogonal(rng, dm, config.out_dim))


def attention_matrix(leaves: dict, mat: str, name: str = "attn"):
    """Whole projection matrix, re-joined from its stored halves."""
    return ad.concat_rows(leaves[f"{name}.{mat}_msg"], leaves[f"{name}.{mat}_de"])


def multi_head_attention(leaves: dict, q, k, v, config: AttentionConfig,
                         name: str = "attn"):
    """Dense multi-head attention: every query row attends over all K/V rows.

    Composed from primitive tape ops; the ragged kernel path used in the
    policy is cross-checked against this one in the tests.
    """
    q = q if isinstance(q, ad.Tensor) else ad.constant(q)
    k = k if isinstance(k, ad.Tensor) else ad.constant(k)
    v = v if isinstance(v, ad.Tensor) else ad.constant(v)
    if k.value.shape[0] != v.value.shape[0]:
        raise ValueError("K and V must have the same number of rows")
    qp = ad.matmul(q, attention_matrix(leaves, "w_q", name))
    kp = ad.matmul(k, attention_matrix(leaves, "w_k", name))
    vp = ad.matmul(v, attention_matrix(leaves, "w_v", name))
    dh = config.head_dim
    heads = []
    for h in range(config.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(qp, lo, hi)
        kh = ad.slice_cols(kp, lo, hi)
        vh = ad.slice_cols(vp, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), config.att_scale)
        heads.append(ad.matmul(ad.softmax_rows(scores), vh))
    out = heads[0]
    for part in heads[1:]:
        out = ad.concat_cols(out, part)
    return ad.matmul(out, leaves[f"{name}.w_o"])


def ragged_attention(leaves: dict, m_self, msg_base, dists, self_pos, offsets,
                     config: AttentionConfig, name: str = "attn",
                     de_name: str = "dist_enc"):
    """Kernel-backed attention over rows of [message || distance code].

    Exploits the structure of the rows instead of materializing them: the
    distance code is affine in a scalar, so its share of each projection
    collapses to a rank-one term, and the message half projects at half
    width. Only the self rows (written into ``msg_base`` at ``self_pos``)
    carry gradients; neighbor messages are data. Numerically equal to the
    dense composition up to float reassociation.
    """
    B = m_self.value.shape[0]
    R = msg_base.shape[0]
    w_d = leaves[f"{de_name}.w0"]                       # (1, msg_dim)
    b_d = ad.reshape(leaves[f"{de_name}.b0"], (1, -1))  # (1, msg_dim)
    dists_c = ad.constant(dists)

    def project(mat: str):
        msg_part = ad.scatter_matmul(
            msg_base, m_self, self_pos, leaves[f"{name}.{mat}_msg"]
        )
        dist_vec = ad.matmul(w_d, leaves[f"{name}.{mat}_de"])   # (1, model)
        bias_vec = ad.matmul(b_d, leaves[f"{name}.{mat}_de"])   # (1, model)
        return ad.add(ad.add(msg_part, ad.matmul(dists_c, dist_vec)), bias_vec)

    # the query is each sample's own row, whose distance code is the bias
    qp = ad.add(
        ad.matmul(m_self, leaves[f"{name}.w_q_msg"]),
        ad.matmul(b_d, leaves[f"{name}.w_q_de"]),
    )
    shape_q = (B, config.heads, config.head_dim)
    shape_kv = (R, config.heads, config.head_dim)
    q3 = ad.reshape(qp, shape_q)
    k3 = ad.reshape(project("w_k"), shape_kv)
    v3 = ad.reshape(project("w_v"), shape_kv)
    out = ad.attention(q3, k3, v3, offsets, config.att_scale)
    return ad.matmul(ad.reshape(out, (B, config.model_dim)), leaves[f"{name}.w_o"])


# -- Gaussian policy math -----------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_logprob(mu, sigma: float, u: np.ndarray):
    """Log-density of ``u`` under a diagonal Gaussian with constant sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = mu if isinstance(mu, ad.Tensor) else ad.constant(mu)
    dims = mu.value.shape[-1]
    z = ad.scale(ad.sub(ad.constant(u), mu), 1.0 / sigma)
    quad = ad.sum_axis(ad.square(z), axis=-1)
    return ad.add(ad.scale(quad, -0.5),
                  ad.constant(-dims * (0.5 * _LOG_2PI + math.log(sigma))))


def gaussian_entropy(sigma: float, dims: int) -> float:
    """Entropy of the diagonal Gaussian: sum of 0.5*ln(2*pi*e*sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return dims * 0.5 * (1.0 + _LOG_2PI + 2.0 * math.log(sigma))


def gaussian_logprob_entropy(mu, sigma: float, u):
    logp = gaussian_logprob(mu, sigma, np.asarray(u, dtype=np.float64))
    mu_arr = mu.value if isinstance(mu, ad.Tensor) else np.asarray(mu)
    return logp, gaussian_entropy(sigma, mu_arr.shape[-1])


# -- value normalization -----------------------------------------------------

class ValueNormalizer:
    """Running mean/std of return targets (Welford batch merges)."""

    def __init__(self):
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64).reshape(-1)
        n = batch.size
        if n == 0:
            return
        b_mean = batch.mean()
        b_m2 = ((batch - b_mean) ** 2).sum()
        delta = b_mean - self.mean
        total = self.count + n
        self.mean += delta * n / total
        self.m2 += b_m2 + delta * delta * self.count * n / total
        self.count = total

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return math.sqrt(self.m2 / self.count) + 1e-8

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def state(self) -> np.ndarray:
        return np.array([self.count, self.mean, self.m2])

    def load(self, state: np.ndarray):
        self.count, self.mean, self.m2 = (float(s) for s in state)


# -- gradient verification -----------------------------------------------------

@dataclass
class GradCheckReport:
    blocks: dict = field(default_factory=dict)  # name -> max relative error
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.blocks.values()) if self.blocks else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [
            f"  {name:<28s} {err:.3e}" for name, err in sorted(self.blocks.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  max {self.max_error:.3e} vs tol {self.tolerance:.1e}: {verdict}")
        return "\n".join(lines)


def finite_diff_check(loss_fn, stores, rel_step: float = 1e-5,
                      tolerance: float = 1e-4, max_coords: int | None = None,
                      rng=None, corrupt_block: str | None = None) -> GradCheckReport:
    """Central differences vs analytic gradients, per parameter block.

    ``loss_fn`` takes no arguments and returns ``(loss, binds)`` where
    ``binds`` maps store names to the leaf dicts it bound, so the harness
    can collect analytic gradients. ``corrupt_block`` deliberately skews
    one analytic block, as a self-test that the harness catches broken
    gradients.
    """
    if isinstance(stores, ParamStore):
        stores = {"store": stores}
    for store in stores.values():
        store.zero_grads()
    loss, binds = loss_fn()
    ad.backward(loss)
    for sname, leaves in binds.items():
        stores[sname].accumulate(leaves)
    analytic = {
        (sname, pname): store.grads[pname].copy()
        for sname, store in stores.items()
        for pname in store.params
    }
    if corrupt_block is not None:
        for key in analytic:
            if key[1] == corrupt_block:
                analytic[key] *= 1.01
    report = GradCheckReport(tolerance=tolerance)
    for (sname, pname), a_grad in analytic.items():
        p = stores[sname].params[pname]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        a_flat = a_grad.reshape(-1)
        for c in coords:
            orig = flat[c]
            h = rel_step * max(1.0, abs(orig))
            with ad.no_grad():
                flat[c] = orig + h
                up = float(loss_fn()[0].value)
                flat[c] = orig - h
                down = float(loss_fn()[0].value)
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[c] - numeric) / (abs(a_flat[c]) + abs(numeric) + 1e-6)
            worst = max(worst, err)
        report.blocks[f"{sname}.{pname}"] = worst
    for store in stores.values():
        store.zero_grads()
    return report
