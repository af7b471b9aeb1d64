"""The communicating formation policy.

Two halves share one parameter convention. The consensus half (store
``psi``) encodes neighbor distances, folds the agent's previous message
with its observation, attends over neighbor messages and estimates a
distribution over the global observation. The action half (store
``theta``) encodes the observation, gates the consensus vector into the
next outgoing message and emits a Gaussian action mean. All agents share
parameters; outputs differ only through inputs.

Batches are ragged: each agent-step owns one query row plus a segment of
message rows (itself first, then neighbors by ascending distance).
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn

MODES = ("consmac", "consmac-no-ce", "no-comm")


@dataclass(frozen=True)
class PolicyArch:
    n_max: int = 8
    message_dim: int = 256
    hidden_dim: int = 256
    heads: int = 4
    act_dim: int = 2
    act_limit: float = 0.5
    # raw coordinates span ~[-2, 12] m; scaling network inputs keeps the
    # first tanh layers out of saturation across the whole workspace
    input_scale: float = 0.1

    @property
    def obs_dim(self) -> int:
        return 4 * self.n_max

    @property
    def model_dim(self) -> int:
        # message plus same-width distance encoding, concatenated per row
        return 2 * self.message_dim

    def attention_config(self) -> nn.AttentionConfig:
        return nn.AttentionConfig(
            heads=self.heads, model_dim=self.model_dim, out_dim=self.message_dim
        )

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max, "message_dim": self.message_dim,
            "hidden_dim": self.hidden_dim, "heads": self.heads,
            "act_dim": self.act_dim, "act_limit": self.act_limit,
            "input_scale": self.input_scale,
        }


@dataclass
class AttentionBatch:
    """Ragged inputs for a batch of agent-steps."""

    obs: np.ndarray        # (B, obs_dim)
    mem_input: np.ndarray  # (B, message_dim + obs_dim): [own message || obs]
    rows_msg: np.ndarray   # (R, message_dim); self rows zero, filled on the tape
    rows_dist: np.ndarray  # (R, 1)
    offsets: np.ndarray    # (B + 1,) int64 segment bounds
    self_pos: np.ndarray   # (B,) row index of each sample's own slot

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    def astype(self, dtype) -> "AttentionBatch":
        dtype = np.dtype(dtype)
        if self.obs.dtype == dtype:
            return self
        return AttentionBatch(
            obs=self.obs.astype(dtype),
            mem_input=self.mem_input.astype(dtype),
            rows_msg=self.rows_msg.astype(dtype),
            rows_dist=self.rows_dist.astype(dtype),
            offsets=self.offsets,
            self_pos=self.self_pos,
        )


def batch_from_locals(locals_, arch: PolicyArch) -> AttentionBatch:
    """Assemble the ragged batch for one environment step."""
    B = len(locals_)
    counts = np.array([1 + ls.nb_idx.size for ls in locals_], dtype=np.int64)
    offsets = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    R = int(offsets[-1])
    rows_msg = np.zeros((R, arch.message_dim))
    rows_dist = np.zeros((R, 1))
    obs = np.zeros((B, arch.obs_dim))
    mem_input = np.zeros((B, arch.message_dim + arch.obs_dim))
    for b, ls in enumerate(locals_):
        lo = offsets[b]
        obs[b] = ls.obs
        mem_input[b, : arch.message_dim] = ls.self_msg
        mem_input[b, arch.message_dim :] = ls.obs
        if ls.nb_idx.size:
            rows_msg[lo + 1 : lo + 1 + ls.nb_idx.size] = ls.nb_msgs
            rows_dist[lo + 1 : lo + 1 + ls.nb_idx.size, 0] = ls.nb_dist
    return AttentionBatch(
        obs=obs, mem_input=mem_input, rows_msg=rows_msg, rows_dist=rows_dist,
        offsets=offsets, self_pos=offsets[:-1].copy(),
    )


@dataclass
class ActResult:
    actions: np.ndarray    # (B, act_dim) pre-clamp, as executed by the env after clamping
    messages: np.ndarray   # (B, message_dim) to broadcast for the next step
    mu: np.ndarray         # (B, act_dim) deterministic means
    h: np.ndarray | None   # (B, message_dim) consensus vectors, None in no-comm mode


def sigma_schedule(episode: int, episodes: int,
                   start: float = 0.5, end: float = 0.01) -> float:
    """Linear decay of the exploration noise across training."""
    frac = episode / max(episodes - 1, 1)
    return start + (end - start) * min(max(frac, 0.0), 1.0)


def sample_action(mu: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Gaussian exploration around the mean; the env clamps on execution."""
    if not 0.01 <= sigma <= 0.5:
        raise ValueError(f"sigma {sigma} outside the training range [0.01, 0.5]")
    return mu + sigma * rng.standard_normal(mu.shape)


class CommPolicy:
    def __init__(self, arch: PolicyArch, mode: str = "consmac", dtype=np.float64):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.arch = arch
        self.mode = mode
        self.dtype = np.dtype(dtype)
        self.theta = nn.ParamStore(dtype)
        self.psi = nn.ParamStore(dtype)
        a = arch
        self._spec_dist = nn.MlpSpec("dist_enc", (1, a.message_dim))
        self._spec_memory = nn.MlpSpec(
            "memory", (a.message_dim + a.obs_dim, a.hidden_dim, a.message_dim)
        )
        self._spec_estimator = nn.MlpSpec(
            "estimator", (a.message_dim, a.hidden_dim, a.obs_dim)
        )
        self._spec_obs_enc = nn.MlpSpec(
            "obs_enc", (a.obs_dim, a.hidden_dim, a.message_dim)
        )
        self._spec_gate = nn.MlpSpec(
            "gate", (a.obs_dim, a.hidden_dim, 1), out_act="sigmoid"
        )
        self._spec_executor = nn.MlpSpec(
            "executor", (a.message_dim, a.act_dim), out_gain=0.01
        )
        self._att_config = arch.attention_config()
        # input scaling mask for the memory updater: messages pass through,
        # the appended raw observation is compressed
        self._mem_scale = np.concatenate(
            [np.ones(a.message_dim), np.full(a.obs_dim, a.input_scale)]
        )

    def init_params(self, rng):
        nn.init_mlp(self.psi, self._spec_dist, rng)
        nn.init_mlp(self.psi, self._spec_memory, rng)
        nn.init_attention(self.psi, self._att_config, rng)
        nn.init_mlp(self.psi, self._spec_estimator, rng)
        nn.init_mlp(self.theta, self._spec_obs_enc, rng)
        nn.init_mlp(self.theta, self._spec_gate, rng)
        nn.init_mlp(self.theta, self._spec_executor, rng)
        return self

    def clone(self) -> "CommPolicy":
        other = CommPolicy(self.arch, self.mode, dtype=self.dtype)
        for mine, theirs in ((self.theta, other.theta), (self.psi, other.psi)):
            for name, arr in mine.params.items():
                theirs.add(name, arr.copy())
        return other

    # -- forward passes ------------------------------------------------

    def consensus_forward(self, psi_leaves: dict, batch: AttentionBatch,
                          with_estimate: bool = True):
        """(h, estimator logits) for a ragged batch, on the tape."""
        mem_in = ad.mul(
            ad.constant(batch.mem_input),
            ad.constant(self._mem_scale.astype(batch.mem_input.dtype)),
        )
        m_updated = nn.mlp_forward(psi_leaves, self._spec_memory, mem_in)
        h = nn.ragged_attention(
            psi_leaves, m_updated, batch.rows_msg, batch.rows_dist,
            batch.self_pos, batch.offsets, self._att_config,
        )
        if not with_estimate:
            return h, None
        logits = nn.mlp_forward(psi_leaves, self._spec_estimator, h)
        return h, logits

    def distance_encode(self, psi_leaves: dict, distances):
        """Latent code for scalar distances (one affine layer)."""
        d = np.asarray(distances, dtype=self.dtype).reshape(-1, 1)
        if np.any(d < 0):
            raise ValueError("distances must be non-negative")
        return nn.mlp_forward(psi_leaves, self._spec_dist, d)

    def memory_update(self, psi_leaves: dict, message, obs):
        """Fold the previous own message and the observation into a new one."""
        message = np.asarray(message, dtype=self.dtype)
        obs = np.asarray(obs, dtype=self.dtype)
        if message.shape[-1] != self.arch.message_dim:
            raise ValueError(
                f"expected message width {self.arch.message_dim}, "
                f"got {message.shape[-1]}"
            )
        joint = np.concatenate([message, obs], axis=-1)
        if joint.ndim == 1:
            joint = joint[None, :]
        joint = joint * self._mem_scale.astype(joint.dtype)
        return nn.mlp_forward(psi_leaves, self._spec_memory, joint)

    def action_forward(self, theta_leaves: dict, obs, h):
        """(mu, gate, next message) from observation and consensus input.

        ``h`` is either a tape node (distillation trains through it) or a
        detached constant (the PPO path must not reach the consensus
        parameters); pass None in no-comm mode.
        """
        obs = obs if isinstance(obs, ad.Tensor) else ad.constant(obs)
        obs_in = ad.scale(obs, self.arch.input_scale)
        e_o = nn.mlp_forward(theta_leaves, self._spec_obs_enc, obs_in)
        gate = nn.mlp_forward(theta_leaves, self._spec_gate, obs_in)
        if h is None:
            m_next = e_o
        else:
            m_next = ad.add(e_o, ad.mul(gate, h))
        raw = nn.mlp_forward(theta_leaves, self._spec_executor, m_next)
        mu = ad.scale(ad.tanh(raw), self.arch.act_limit)
        return mu, gate, m_next

    def global_estimate(self, logits) -> np.ndarray:
        """Probability vector over the flattened global observation layout."""
        value = logits.value if isinstance(logits, ad.Tensor) else logits
        return nn.softmax(value)

    # -- rollout driver ------------------------------------------------

    def act(self, locals_, sigma: float = 0.0, rng=None) -> ActResult:
        """One decentralized decision round; deterministic when rng is None."""
        batch = batch_from_locals(locals_, self.arch).astype(self.dtype)
        with ad.no_grad():
            theta_leaves = self.theta.bind()
            if self.mode == "no-comm":
                h = None
            else:
                h, _ = self.consensus_forward(self.psi.bind(), batch,
                                              with_estimate=False)
            mu, _, m_next = self.action_forward(
                theta_leaves, batch.obs, None if h is None else ad.detach(h)
            )
        mu_val = mu.value
        if rng is None:
            actions = mu_val.copy()
        else:
            actions = sample_action(mu_val, sigma, rng)
        if self.mode == "no-comm":
            messages = np.zeros((batch.size, self.arch.message_dim))
        else:
            messages = m_next.value
        return ActResult(
            actions=actions,
            messages=messages,
            mu=mu_val,
            h=None if h is None else h.value,
        )
