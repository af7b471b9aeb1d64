"""Trainer: GAE, clipped surrogate, update separation, rollout bookkeeping."""

import numpy as np
import pytest

from formation_lab import autodiff as ad
from formation_lab import nn
from formation_lab.env import EnvConfig, SwarmEnv
from formation_lab.mappo import (
    Critic, RolloutBuffer, TrainConfig, TrainingDiverged, collect_rollout,
    consensus_loss, evaluate_snapshot, gae, ppo_policy_objective, train_teacher,
    update_step, value_objective,
)
from formation_lab.policy import CommPolicy, PolicyArch


def gae_double_sum(rewards, values, bootstrap, gamma, lam):
    """O(T^2) oracle straight from the definition."""
    vb = np.concatenate([values, [bootstrap]])
    delta = rewards + gamma * vb[1:] - vb[:-1]
    T = len(rewards)
    return np.array([
        sum((gamma * lam) ** l * delta[t + l] for l in range(T - t))
        for t in range(T)
    ])


def tiny_setup(mode="consmac", seed=0, n=5, episode_length=8):
    env = SwarmEnv(EnvConfig(n_active=n, obs_radius=3.0,
                             episode_length=episode_length, message_dim=16))
    arch = PolicyArch(n_max=8, message_dim=16, hidden_dim=16, heads=2)
    policy = CommPolicy(arch, mode=mode).init_params(np.random.default_rng(seed))
    critic = Critic(arch).init_params(np.random.default_rng(seed + 1))
    return env, arch, policy, critic


def rollout_with_values(env, policy, critic, sigma=0.3, seed=0):
    normalizer = nn.ValueNormalizer()
    buf = collect_rollout(env, policy, sigma, seed, np.random.default_rng(seed))
    batch = buf.flat_batch(policy.arch)
    evaluate_snapshot(policy, critic, normalizer, buf, batch)
    buf.advantages = gae(buf.rewards, buf.v_old[:-1], buf.v_old[-1], 0.8, 0.95)
    return buf, normalizer


class TestGae:
    def test_single_step(self):
        adv = gae([1.0], [0.5], 0.25, 0.8, 0.95)
        assert adv[0] == pytest.approx(1.0 + 0.8 * 0.25 - 0.5)

    def test_worked_example(self):
        adv = gae([1.0], [0.5], 0.0, 0.8, 0.95)
        assert adv[0] == pytest.approx(0.5)

    def test_lambda_zero_is_td(self, rng):
        rewards = rng.normal(size=10)
        values = rng.normal(size=11)
        adv = gae(rewards, values[:-1], values[-1], 0.8, 0.0)
        delta = rewards + 0.8 * values[1:] - values[:-1]
        np.testing.assert_allclose(adv, delta, atol=1e-12)

    def test_against_double_sum(self, rng):
        for _ in range(20):
            T = int(rng.integers(1, 101))
            rewards = rng.normal(size=T)
            values = rng.normal(size=T)
            bootstrap = float(rng.normal())
            np.testing.assert_allclose(
                gae(rewards, values, bootstrap, 0.8, 0.95),
                gae_double_sum(rewards, values, bootstrap, 0.8, 0.95),
                atol=1e-10,
            )

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], 0.0, 0.8, 0.95)


class TestPpoObjective:
    def logp_pair(self, ratios):
        logp_old = np.zeros(len(ratios))
        return ad.constant(np.log(np.asarray(ratios))), logp_old

    def test_unit_ratio_gives_mean_advantage(self, rng):
        adv = rng.normal(size=16)
        logp_new, logp_old = self.logp_pair(np.ones(16))
        j = ppo_policy_objective(logp_new, logp_old, adv, 0.2)
        assert float(j.value) == pytest.approx(adv.mean())

    def test_clip_positive_advantage(self):
        logp_new, logp_old = self.logp_pair([1.5])
        j = ppo_policy_objective(logp_new, logp_old, np.array([1.0]), 0.2)
        assert float(j.value) == pytest.approx(1.2)

    def test_pessimistic_negative_advantage(self):
        logp_new, logp_old = self.logp_pair([0.5])
        j = ppo_policy_objective(logp_new, logp_old, np.array([-1.0]), 0.2)
        assert float(j.value) == pytest.approx(-0.8)

    def test_huge_clip_equals_plain_ratio(self, rng):
        adv = rng.normal(size=64)
        ratios = np.exp(rng.normal(size=64) * 0.3)
        logp_new, logp_old = self.logp_pair(ratios)
        clipped = ppo_policy_objective(logp_new, logp_old, adv, 1e9)
        plain = np.mean(ratios * adv)
        assert float(clipped.value) == pytest.approx(plain, abs=1e-10)


class TestValueObjective:
    def test_zero_at_exact_target(self, rng):
        adv = rng.normal(size=8)
        v_old = rng.normal(size=8)
        j = value_objective(ad.constant(adv + v_old), adv, v_old)
        assert float(j.value) == pytest.approx(0.0)

    def test_off_by_one(self):
        j = value_objective(ad.constant(np.array([1.0])), np.array([0.0]),
                            np.array([0.0]))
        assert float(j.value) == pytest.approx(-1.0)

    def test_never_positive(self, rng):
        for _ in range(20):
            j = value_objective(
                ad.constant(rng.normal(size=6)), rng.normal(size=6),
                rng.normal(size=6),
            )
            assert float(j.value) <= 0


class TestConsensusLoss:
    def test_zero_at_match(self, rng):
        og = rng.normal(size=(5, 8))
        logits = ad.constant(og.copy())  # softmax(logits) == softmax(og)
        assert float(consensus_loss(logits, og).value) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        og = np.zeros((1, 2))                      # label [0.5, 0.5]
        logits = ad.constant(np.log(np.array([[1.0, 3.0]])))  # [0.25, 0.75]
        expected = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
        assert float(consensus_loss(logits, og).value) == pytest.approx(expected)
        assert expected == pytest.approx(0.5 * np.log(4.0 / 3.0))

    def test_nonnegative(self, rng):
        for _ in range(200):
            og = rng.normal(size=(4, 6)) * 3
            logits = ad.constant(rng.normal(size=(4, 6)) * 3)
            assert float(consensus_loss(logits, og).value) >= -1e-12


class TestCollectRollout:
    def test_buffer_accounting(self):
        env, arch, policy, critic = tiny_setup()
        buf = collect_rollout(env, policy, 0.3, 0, np.random.default_rng(0))
        assert buf.horizon == 8 and buf.n_agents == 5
        assert buf.size == 40
        assert buf.obs.shape == (8, 5, 32)

    def test_logp_finite(self):
        env, arch, policy, critic = tiny_setup()
        buf, _ = rollout_with_values(env, policy, critic)
        assert np.all(np.isfinite(buf.logp_old))

    def test_replay_reproduces_rewards(self):
        """Driving a fresh env with the stored actions recreates the stored
        reward sequence exactly (messages never touch the dynamics)."""
        env, arch, policy, critic = tiny_setup()
        buf = collect_rollout(env, policy, 0.3, 123, np.random.default_rng(7))
        env2 = SwarmEnv(env.config)
        env2.reset(123)
        n = buf.n_agents
        msgs = np.zeros((n, env.config.message_dim))
        for t in range(buf.horizon):
            res = env2.step(buf.actions[t], msgs)
            assert res.reward == buf.rewards[t]
            np.testing.assert_array_equal(res.components, buf.components[t])

    def test_deterministic_given_seeds(self):
        env, arch, policy, critic = tiny_setup()
        a = collect_rollout(env, policy, 0.3, 5, np.random.default_rng(11))
        b = collect_rollout(env, policy, 0.3, 5, np.random.default_rng(11))
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.actions, b.actions)


class TestSnapshotDiscipline:
    def test_first_epoch_ratio_is_one(self):
        env, arch, policy, critic = tiny_setup()
        buf, normalizer = rollout_with_values(env, policy, critic)
        batch = buf.flat_batch(arch)
        with ad.no_grad():
            h, _ = policy.consensus_forward(policy.psi.bind(), batch,
                                            with_estimate=False)
            mu, _, _ = policy.action_forward(
                policy.theta.bind(), batch.obs, ad.detach(h)
            )
            logp = nn.gaussian_logprob(mu, buf.sigma, buf.flat_actions()).value
        np.testing.assert_array_equal(
            logp, buf.logp_old.reshape(buf.size)
        )


class TestUpdateStep:
    def test_stop_gradient_ppo_only(self):
        env, arch, policy, critic = tiny_setup()
        buf, normalizer = rollout_with_values(env, policy, critic)
        psi_before = {k: v.copy() for k, v in policy.psi.params.items()}
        theta_before = {k: v.copy() for k, v in policy.theta.params.items()}
        update_step(policy, critic, normalizer, buf,
                    TrainConfig(epochs=2), ppo=True, ce=False)
        for name, arr in policy.psi.params.items():
            np.testing.assert_array_equal(arr, psi_before[name])
        assert any(
            not np.array_equal(policy.theta.params[k], theta_before[k])
            for k in theta_before
        )

    def test_stop_gradient_ce_only(self):
        env, arch, policy, critic = tiny_setup()
        buf, normalizer = rollout_with_values(env, policy, critic)
        theta_before = {k: v.copy() for k, v in policy.theta.params.items()}
        phi_before = {k: v.copy() for k, v in critic.phi.params.items()}
        psi_before = {k: v.copy() for k, v in policy.psi.params.items()}
        update_step(policy, critic, normalizer, buf,
                    TrainConfig(epochs=2), ppo=False, ce=True)
        for name, arr in policy.theta.params.items():
            np.testing.assert_array_equal(arr, theta_before[name])
        for name, arr in critic.phi.params.items():
            np.testing.assert_array_equal(arr, phi_before[name])
        assert any(
            not np.array_equal(policy.psi.params[k], psi_before[k])
            for k in psi_before
        )

    def test_entropy_is_closed_form(self):
        env, arch, policy, critic = tiny_setup()
        buf, normalizer = rollout_with_values(env, policy, critic)
        report = update_step(policy, critic, normalizer, buf, TrainConfig(epochs=1))
        assert report.entropy == pytest.approx(nn.gaussian_entropy(buf.sigma, 2))
        assert report.objective == pytest.approx(
            report.policy_objective + report.value_objective
            + 0.01 * report.entropy
        )

    def test_divergence_detected(self):
        env, arch, policy, critic = tiny_setup()
        buf, normalizer = rollout_with_values(env, policy, critic)
        policy.theta.params["executor.w0"][:] = np.nan
        with pytest.raises(TrainingDiverged):
            update_step(policy, critic, normalizer, buf, TrainConfig(epochs=1))


class TestTrainTeacher:
    def test_smoke_run(self):
        env_config = EnvConfig(n_active=5, obs_radius=3.0, message_dim=16)
        cfg = TrainConfig(episodes=3, epochs=2, seed=0)
        arch = PolicyArch(message_dim=16, hidden_dim=16, heads=2)
        result = train_teacher(env_config, cfg, arch)
        assert len(result.metrics) == 3
        for row in result.metrics:
            assert np.isfinite(row["reward_mean"])
            assert row["sigma"] <= 0.5

    def test_no_comm_produces_zero_messages(self):
        env_config = EnvConfig(n_active=5, obs_radius=3.0, message_dim=16)
        cfg = TrainConfig(episodes=2, epochs=1, seed=0, mode="no-comm")
        arch = PolicyArch(message_dim=16, hidden_dim=16, heads=2)
        result = train_teacher(env_config, cfg, arch)
        assert all(row["message_max_abs"] == 0.0 for row in result.metrics)

    def test_deterministic_metrics(self):
        env_config = EnvConfig(n_active=5, obs_radius=3.0, message_dim=16)
        cfg = TrainConfig(episodes=2, epochs=2, seed=3)
        arch = PolicyArch(message_dim=16, hidden_dim=16, heads=2)
        a = train_teacher(env_config, cfg, arch)
        b = train_teacher(env_config, cfg, arch)
        assert a.metrics == b.metrics
