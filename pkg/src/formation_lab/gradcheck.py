"""End-to-end gradient verification on miniature network widths.

Four loss paths are checked against central differences: the clipped policy
surrogate, the value regression, the consensus KL, and the distillation
regression. Widths are tiny so full-coordinate checks stay under a minute.
"""

import numpy as np

from . import autodiff as ad
from . import nn
from .mappo import Critic, consensus_loss, ppo_policy_objective, value_objective
from .distill import distill_loss
from .policy import AttentionBatch, CommPolicy, PolicyArch


def tiny_arch() -> PolicyArch:
    return PolicyArch(n_max=3, message_dim=8, hidden_dim=8, heads=2)


def synthetic_batch(arch: PolicyArch, rng, size: int = 5) -> AttentionBatch:
    """Random ragged inputs shaped like one batch of agent-steps."""
    counts = rng.integers(0, arch.n_max, size=size)  # neighbors per sample
    offsets = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(1 + counts, out=offsets[1:])
    R = int(offsets[-1])
    obs = rng.normal(size=(size, arch.obs_dim))
    self_msg = rng.normal(size=(size, arch.message_dim))
    rows_msg = np.zeros((R, arch.message_dim))
    rows_dist = np.zeros((R, 1))
    for b in range(size):
        lo, hi = offsets[b], offsets[b + 1]
        rows_msg[lo + 1 : hi] = rng.normal(size=(hi - lo - 1, arch.message_dim))
        rows_dist[lo + 1 : hi, 0] = rng.uniform(0.1, 3.0, size=hi - lo - 1)
    return AttentionBatch(
        obs=obs,
        mem_input=np.concatenate([self_msg, obs], axis=1),
        rows_msg=rows_msg,
        rows_dist=rows_dist,
        offsets=offsets,
        self_pos=offsets[:-1].copy(),
    )


def check_policy_path(arch: PolicyArch, seed: int = 0,
                      corrupt_block: str | None = None) -> nn.GradCheckReport:
    """Action-mean pipeline into the clipped surrogate, gradients in theta.

    The consensus vector enters as a constant, mirroring the training-time
    stop-gradient, so only the action-side parameters are perturbed.
    """
    rng = np.random.default_rng(seed)
    policy = CommPolicy(arch).init_params(rng)
    batch = synthetic_batch(arch, rng)
    with ad.no_grad():
        h_const, _ = policy.consensus_forward(policy.psi.bind(), batch)
    h_value = h_const.value
    u = rng.uniform(-0.4, 0.4, size=(batch.size, arch.act_dim))
    sigma = 0.3
    adv = rng.normal(size=batch.size)
    with ad.no_grad():
        theta_leaves = policy.theta.bind()
        mu0, _, _ = policy.action_forward(theta_leaves, batch.obs, ad.constant(h_value))
        logp0 = nn.gaussian_logprob(mu0, sigma, u).value
    logp_old = logp0 + rng.uniform(-0.1, 0.1, size=batch.size)

    def loss_fn():
        leaves = policy.theta.bind()
        mu, _, _ = policy.action_forward(leaves, batch.obs, ad.constant(h_value))
        logp = nn.gaussian_logprob(mu, sigma, u)
        j_pi = ppo_policy_objective(logp, logp_old, adv, clip_ratio=0.2)
        return ad.neg(j_pi), {"theta": leaves}

    return nn.finite_diff_check(loss_fn, {"theta": policy.theta},
                                corrupt_block=corrupt_block)


def check_value_path(arch: PolicyArch, seed: int = 0,
                     corrupt_block: str | None = None) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    critic = Critic(arch).init_params(rng)
    og = rng.normal(size=(6, arch.obs_dim + 2))  # global obs plus lag state
    adv = rng.normal(size=6)
    v_old = rng.normal(size=6)

    def loss_fn():
        leaves = critic.phi.bind()
        v_pred = critic.forward(leaves, og)
        return ad.neg(value_objective(v_pred, adv, v_old)), {"phi": leaves}

    return nn.finite_diff_check(loss_fn, {"phi": critic.phi},
                                corrupt_block=corrupt_block)


def check_consensus_path(arch: PolicyArch, seed: int = 0,
                         corrupt_block: str | None = None) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    policy = CommPolicy(arch).init_params(rng)
    batch = synthetic_batch(arch, rng)
    og = rng.normal(size=(batch.size, arch.obs_dim))

    def loss_fn():
        leaves = policy.psi.bind()
        _, logits = policy.consensus_forward(leaves, batch)
        return consensus_loss(logits, og), {"psi": leaves}

    return nn.finite_diff_check(loss_fn, {"psi": policy.psi},
                                corrupt_block=corrupt_block)


def check_distill_path(arch: PolicyArch, seed: int = 0,
                       corrupt_block: str | None = None) -> nn.GradCheckReport:
    """Joint student check: the regression trains both parameter stores and
    gradients flow through the consensus vector into the attention stack."""
    rng = np.random.default_rng(seed)
    student = CommPolicy(arch).init_params(rng)
    batch = synthetic_batch(arch, rng)
    # targets near the student's own outputs keep the loss small, so the
    # central differences stay clear of truncation noise
    with ad.no_grad():
        h0, _ = student.consensus_forward(student.psi.bind(), batch,
                                          with_estimate=False)
        mu0, _, _ = student.action_forward(student.theta.bind(), batch.obs, h0)
    u_target = mu0.value + 0.1 * rng.normal(size=(batch.size, arch.act_dim))
    h_target = h0.value + 0.1 * rng.normal(size=(batch.size, arch.message_dim))

    def loss_fn():
        psi_leaves = student.psi.bind()
        theta_leaves = student.theta.bind()
        h_s, _ = student.consensus_forward(psi_leaves, batch)
        mu_s, _, _ = student.action_forward(theta_leaves, batch.obs, h_s)
        loss = distill_loss(mu_s, h_s, u_target, h_target)
        return loss, {"psi": psi_leaves, "theta": theta_leaves}

    return nn.finite_diff_check(
        loss_fn, {"psi": student.psi, "theta": student.theta},
        corrupt_block=corrupt_block,
    )


PATHS = {
    "policy": check_policy_path,
    "value": check_value_path,
    "consensus": check_consensus_path,
    "distill": check_distill_path,
}


def run_all(seed: int = 0, corrupt_block: str | None = None,
            arch: PolicyArch | None = None) -> dict:
    arch = arch or tiny_arch()
    return {
        name: fn(arch, seed=seed, corrupt_block=corrupt_block)
        for name, fn in PATHS.items()
    }
