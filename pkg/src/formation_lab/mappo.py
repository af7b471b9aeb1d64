"""Centralized training loop: rollouts, GAE, clipped PPO, consensus supervision.

One update per episode. Each update epoch recomputes action means, global
estimates and values on the stored inputs, maximizes the clipped surrogate
plus value objective over the action/critic parameters (consensus vectors
enter as constants), and separately minimizes the consensus KL over the
communication parameters. The two optimizer steps never touch each other's
stores, which is what the stop-gradient tests pin down.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import nn
from .env import SwarmEnv
from .policy import AttentionBatch, CommPolicy, PolicyArch, sigma_schedule


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 350
    epochs: int = 20
    discount: float = 0.8
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.01
    learning_rate: float = 1e-4
    # the critic chases a moving return distribution; at the actor's rate its
    # explained variance stays near zero for the first third of training
    critic_learning_rate: float = 5e-4
    grad_clip: float = 10.0
    sigma_start: float = 0.5
    sigma_end: float = 0.01
    # episodes at the start where only the critic (and consensus head) train;
    # an uncalibrated value baseline feeds time structure, not action quality,
    # into the advantages, and the policy chases it
    critic_warmup: int = 15
    mode: str = "consmac"
    seed: int = 0


class Critic:
    """Centralized value head.

    Input is the zero-padded global observation plus the two lagged reward
    components; the lag recursion makes rewards depend on them, so without
    them the value target is not a function of the critic's input.
    """

    def __init__(self, arch: PolicyArch):
        self.arch = arch
        self.spec = nn.MlpSpec(
            "critic", (arch.obs_dim + 2, arch.hidden_dim, arch.hidden_dim, 1)
        )
        self.phi = nn.ParamStore()

    def init_params(self, rng):
        nn.init_mlp(self.phi, self.spec, rng)
        return self

    def clone(self) -> "Critic":
        other = Critic(self.arch)
        for name, arr in self.phi.params.items():
            other.phi.add(name, arr.copy())
        return other

    def forward(self, leaves: dict, og) -> ad.Tensor:
        og = og if isinstance(og, ad.Tensor) else ad.constant(og)
        out = nn.mlp_forward(leaves, self.spec, ad.scale(og, self.arch.input_scale))
        return ad.reshape(out, (out.value.shape[0],))

    def values(self, og: np.ndarray, normalizer: nn.ValueNormalizer) -> np.ndarray:
        """Denormalized state values, off the tape."""
        with ad.no_grad():
            v = self.forward(self.phi.bind(), og).value
        return normalizer.denormalize(v)


@dataclass
class RolloutBuffer:
    """One episode of synchronized act-message-step, time-major."""

    agent_ids: np.ndarray        # (n,)
    obs: np.ndarray              # (T, n, obs_dim)
    og: np.ndarray               # (T + 1, obs_dim)
    lag: np.ndarray              # (T + 1, 2) reward-lag state per step
    outbox_hist: np.ndarray      # (T, n_max, message_dim) readable at each t
    nb_idx: np.ndarray           # (T, n, n_max - 1), -1 padded
    nb_count: np.ndarray         # (T, n)
    nb_dist: np.ndarray          # (T, n, n_max - 1)
    actions: np.ndarray          # (T, n, act_dim) pre-clamp
    rewards: np.ndarray          # (T,)
    components: np.ndarray       # (T, 3)
    sigma: float
    logp_old: np.ndarray | None = None   # (T, n)
    v_old: np.ndarray | None = None      # (T + 1,)
    advantages: np.ndarray | None = None  # (T,)

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.agent_ids.shape[0]

    @property
    def size(self) -> int:
        return self.horizon * self.n_agents

    def flat_actions(self) -> np.ndarray:
        return self.actions.reshape(self.size, -1)

    def critic_input(self) -> np.ndarray:
        return np.concatenate([self.og, self.lag], axis=1)

    def flat_batch(self, arch: PolicyArch) -> AttentionBatch:
        """Ragged batch over every agent-step, time-major then agent order."""
        T, n = self.horizon, self.n_agents
        B = T * n
        counts = (1 + self.nb_count).reshape(B)
        offsets = np.zeros(B + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        R = int(offsets[-1])
        rows_msg = np.zeros((R, arch.message_dim))
        rows_dist = np.zeros((R, 1))
        mem_input = np.zeros((B, arch.message_dim + arch.obs_dim))
        obs = self.obs.reshape(B, arch.obs_dim)
        for t in range(T):
            for j in range(n):
                b = t * n + j
                lo = offsets[b]
                k = self.nb_count[t, j]
                mem_input[b, : arch.message_dim] = self.outbox_hist[t, self.agent_ids[j]]
                if k:
                    ids = self.nb_idx[t, j, :k]
                    rows_msg[lo + 1 : lo + 1 + k] = self.outbox_hist[t, ids]
                    rows_dist[lo + 1 : lo + 1 + k, 0] = self.nb_dist[t, j, :k]
        mem_input[:, arch.message_dim :] = obs
        return AttentionBatch(
            obs=obs.copy(), mem_input=mem_input, rows_msg=rows_msg,
            rows_dist=rows_dist, offsets=offsets, self_pos=offsets[:-1].copy(),
        )


def collect_rollout(env: SwarmEnv, policy: CommPolicy, sigma: float,
                    env_seed, noise_rng) -> RolloutBuffer:
    """Run one episode with a frozen policy snapshot; deterministic per seed."""
    cfg = env.config
    arch = policy.arch
    if cfg.message_dim != arch.message_dim or cfg.n_max != arch.n_max:
        raise ValueError(
            f"env ({cfg.message_dim=}, {cfg.n_max=}) does not match the policy "
            f"({arch.message_dim=}, {arch.n_max=})"
        )
    T = cfg.episode_length
    env.reset(env_seed)
    ids = env.active_ids
    n = len(ids)
    buf = RolloutBuffer(
        agent_ids=ids.copy(),
        obs=np.zeros((T, n, cfg.obs_dim)),
        og=np.zeros((T + 1, cfg.obs_dim)),
        lag=np.zeros((T + 1, 2)),
        outbox_hist=np.zeros((T, cfg.n_max, cfg.message_dim)),
        nb_idx=np.full((T, n, cfg.n_max - 1), -1, dtype=np.int64),
        nb_count=np.zeros((T, n), dtype=np.int64),
        nb_dist=np.zeros((T, n, cfg.n_max - 1)),
        actions=np.zeros((T, n, arch.act_dim)),
        rewards=np.zeros(T),
        components=np.zeros((T, 3)),
        sigma=sigma,
    )
    locals_ = env.local_states()
    for t in range(T):
        buf.og[t] = env.global_observation()
        buf.lag[t] = (env.state.prev_r_f, env.state.prev_r_v)
        buf.outbox_hist[t] = env.state.outbox
        for j, ls in enumerate(locals_):
            buf.obs[t, j] = ls.obs
            k = ls.nb_idx.size
            buf.nb_count[t, j] = k
            if k:
                buf.nb_idx[t, j, :k] = ls.nb_idx
                buf.nb_dist[t, j, :k] = ls.nb_dist
        act = policy.act(locals_, sigma=sigma, rng=noise_rng)
        result = env.step(act.actions, act.messages)
        buf.actions[t] = act.actions
        buf.rewards[t] = result.reward
        buf.components[t] = result.components
        locals_ = result.locals
    buf.og[T] = env.global_observation()
    buf.lag[T] = (env.state.prev_r_f, env.state.prev_r_v)
    return buf


def evaluate_snapshot(policy: CommPolicy, critic: Critic,
                      normalizer: nn.ValueNormalizer, buf: RolloutBuffer,
                      batch: AttentionBatch):
    """Fill logp_old and bootstrapped v_old with the frozen snapshot.

    Uses the same batched code path the update epochs use, so the first
    epoch's ratios are exactly one.
    """
    with ad.no_grad():
        if policy.mode == "no-comm":
            h = None
        else:
            h, _ = policy.consensus_forward(policy.psi.bind(), batch,
                                            with_estimate=False)
        mu, _, _ = policy.action_forward(
            policy.theta.bind(), batch.obs, None if h is None else ad.detach(h)
        )
        logp = nn.gaussian_logprob(mu, buf.sigma, buf.flat_actions()).value
    buf.logp_old = logp.reshape(buf.horizon, buf.n_agents)
    buf.v_old = critic.values(buf.critic_input(), normalizer)


def gae(rewards, values, bootstrap: float, discount: float, lam: float) -> np.ndarray:
    """Exponentially weighted TD-residual sum (matches the double-sum oracle)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape[0] != values.shape[0]:
        raise ValueError("rewards and values must have equal length")
    vb = np.concatenate([values, [bootstrap]])
    return kernels.gae_advantages(rewards, vb, discount, lam)


def ppo_policy_objective(logp_new, logp_old, advantages, clip_ratio: float):
    """Clipped pessimistic surrogate, mean over agent-steps (a tape node)."""
    logp_old = ad.constant(logp_old)
    adv = ad.constant(advantages)
    ratio = ad.exp(ad.sub(logp_new, logp_old))
    plain = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio), adv)
    return ad.mean(ad.minimum(plain, clipped))


def value_objective(v_new, advantages, v_old):
    """Negated MSE against the GAE return target."""
    target = ad.constant(np.asarray(advantages) + np.asarray(v_old))
    return ad.neg(ad.mean(ad.square(ad.sub(v_new, target))))


def consensus_loss(logits, og_batch: np.ndarray):
    """Pointwise KL from softmaxed global observation to the estimate."""
    labels = nn.softmax(og_batch)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(labels > 0.0, labels * np.log(labels), 0.0)
    label_entropy_term = float(np.mean(np.sum(xlogx, axis=-1)))
    log_ehat = ad.log_softmax_rows(logits)
    cross = ad.mean(ad.sum_axis(ad.mul(ad.constant(labels), log_ehat), axis=-1))
    return ad.sub(ad.constant(label_entropy_term), cross)


@dataclass
class UpdateReport:
    policy_objective: float = 0.0
    value_objective: float = 0.0
    ce_loss: float = 0.0
    entropy: float = 0.0
    objective: float = 0.0
    grad_norm_theta: float = 0.0
    grad_norm_phi: float = 0.0
    grad_norm_psi: float = 0.0


def update_step(policy: CommPolicy, critic: Critic, normalizer: nn.ValueNormalizer,
                buf: RolloutBuffer, config: TrainConfig,
                ppo: bool = True, ce: bool | None = None,
                actor: bool = True) -> UpdateReport:
    """One full update over a completed rollout buffer.

    The action-side epochs run against the consensus vectors of the
    episode-start communication parameters (a constant input, per the
    stop-gradient rule); the consensus epochs follow with their own
    optimizer, so neither side ever touches the other's parameters.
    """
    if ce is None:
        ce = config.mode == "consmac"
    arch = policy.arch
    T, n = buf.horizon, buf.n_agents
    batch = buf.flat_batch(arch)
    u_flat = buf.flat_actions()
    logp_old = buf.logp_old.reshape(T * n)

    adv_step = buf.advantages
    adv_flat = np.repeat(adv_step, n)
    adv_norm = (adv_flat - adv_flat.mean()) / (adv_flat.std() + 1e-8)

    targets = adv_step + buf.v_old[:T]
    normalizer.update(targets)
    std = normalizer.std
    v_old_norm = normalizer.normalize(buf.v_old[:T])
    adv_scaled = adv_step / std

    entropy = nn.gaussian_entropy(buf.sigma, arch.act_dim)
    report = UpdateReport(entropy=entropy)
    use_consensus = policy.mode != "no-comm"

    if use_consensus:
        with ad.no_grad():
            h0, _ = policy.consensus_forward(policy.psi.bind(), batch,
                                             with_estimate=False)
        h_const = ad.constant(h0.value)
    else:
        h_const = None

    if ppo:
        critic_in = buf.critic_input()[:T]
        for _ in range(config.epochs):
            phi_leaves = critic.phi.bind()
            v_pred = critic.forward(phi_leaves, critic_in)
            j_v = value_objective(v_pred, adv_scaled, v_old_norm)
            if actor:
                theta_leaves = policy.theta.bind()
                mu, _, _ = policy.action_forward(theta_leaves, batch.obs, h_const)
                logp = nn.gaussian_logprob(mu, buf.sigma, u_flat)
                j_pi = ppo_policy_objective(
                    logp, logp_old, adv_norm, config.clip_ratio
                )
                loss = ad.neg(ad.add(j_pi, j_v))
            else:
                j_pi = None
                loss = ad.neg(j_v)
            ad.backward(loss)
            critic.phi.accumulate(phi_leaves)
            report.grad_norm_phi = nn.clip_grad_norm(critic.phi, config.grad_clip)
            nn.adam_step(critic.phi, config.critic_learning_rate)
            if actor:
                policy.theta.accumulate(theta_leaves)
                report.grad_norm_theta = nn.clip_grad_norm(
                    policy.theta, config.grad_clip
                )
                nn.adam_step(policy.theta, config.learning_rate)
                report.policy_objective += float(j_pi.value) / config.epochs
            report.value_objective += float(j_v.value) / config.epochs

    if ce and use_consensus:
        og_samples = np.repeat(buf.og[:T], n, axis=0)
        for _ in range(config.epochs):
            psi_leaves = policy.psi.bind()
            _, logits = policy.consensus_forward(psi_leaves, batch)
            kl = consensus_loss(logits, og_samples)
            ad.backward(kl)
            policy.psi.accumulate(psi_leaves)
            report.grad_norm_psi = nn.clip_grad_norm(policy.psi, config.grad_clip)
            nn.adam_step(policy.psi, config.learning_rate)
            report.ce_loss += float(kl.value) / config.epochs

    report.objective = (
        report.policy_objective + report.value_objective
        + config.entropy_coef * entropy
    )
    for name, val in (
        ("policy", report.policy_objective),
        ("value", report.value_objective),
        ("consensus", report.ce_loss),
    ):
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite {name} loss: {val}")
    return report


@dataclass
class TrainResult:
    policy: CommPolicy
    critic: Critic
    normalizer: nn.ValueNormalizer
    metrics: list = field(default_factory=list)


def train_teacher(env_config, train_config: TrainConfig, arch: PolicyArch,
                  progress=None) -> TrainResult:
    """Full training run for one fleet size; emits one metrics row per episode."""
    env = SwarmEnv(env_config)
    ss = np.random.SeedSequence(train_config.seed)
    init_seq, noise_seq, env_seq = ss.spawn(3)
    rng_init = np.random.default_rng(init_seq)
    noise_rng = np.random.default_rng(noise_seq)
    episode_seeds = env_seq.spawn(train_config.episodes)

    policy = CommPolicy(arch, mode=train_config.mode).init_params(rng_init)
    critic = Critic(arch).init_params(rng_init)
    normalizer = nn.ValueNormalizer()
    result = TrainResult(policy=policy, critic=critic, normalizer=normalizer)

    for ep in range(train_config.episodes):
        sigma = sigma_schedule(
            ep, train_config.episodes, train_config.sigma_start, train_config.sigma_end
        )
        snapshot = policy.clone()
        snapshot_critic = critic.clone()
        buf = collect_rollout(env, snapshot, sigma, episode_seeds[ep], noise_rng)
        if train_config.mode == "no-comm" and np.any(buf.outbox_hist):
            raise AssertionError("no-comm mode must produce zero messages")
        batch = buf.flat_batch(arch)
        evaluate_snapshot(snapshot, snapshot_critic, normalizer, buf, batch)
        buf.advantages = gae(
            buf.rewards, buf.v_old[:-1], buf.v_old[-1],
            train_config.discount, train_config.gae_lambda,
        )
        report = update_step(
            policy, critic, normalizer, buf, train_config,
            actor=ep >= train_config.critic_warmup,
        )
        row = {
            "episode": ep,
            "reward_mean": float(buf.rewards.mean()),
            "r_f_mean": float(buf.components[:, 0].mean()),
            "r_v_mean": float(buf.components[:, 1].mean()),
            "r_c_mean": float(buf.components[:, 2].mean()),
            "policy_loss": report.policy_objective,
            "value_loss": report.value_objective,
            "ce_loss": report.ce_loss,
            "entropy": report.entropy,
            "sigma": sigma,
            "message_max_abs": float(np.abs(buf.outbox_hist).max()),
        }
        result.metrics.append(row)
        if progress is not None:
            progress(row)
    return result
