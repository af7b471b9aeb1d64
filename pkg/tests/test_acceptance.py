"""Acceptance gate: one test per criterion, at the stated tolerances.

Training-backed criteria cache their artifacts under
``FORMATION_LAB_ACCEPTANCE_CACHE`` (default ``tests/.acceptance_cache``),
keyed by the full run configuration, so reruns of the suite are fast while a
fresh checkout pays the real training cost. Each cached artifact records the
wall time of the run that produced it; the runtime assertions use that.

Run with: pytest tests/test_acceptance.py -v -m acceptance
"""

import dataclasses
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from formation_lab import autodiff as ad
from formation_lab import checkpoint as ckpt
from formation_lab import gradcheck, nn
from formation_lab.cli import main as cli_main
from formation_lab.distill import (
    DistillConfig, collect_replay, distill_loss, train_student,
)
from formation_lab.env import EnvConfig, SwarmEnv
from formation_lab.evaluate import eval_adaptive, eval_formation_cost
from formation_lab.geometry import hausdorff
from formation_lab.kernels import gae_advantages
from formation_lab.mappo import (
    Critic, TrainConfig, collect_rollout, consensus_loss, evaluate_snapshot,
    gae, train_teacher, update_step, value_objective,
)
from formation_lab.policy import CommPolicy, PolicyArch

pytestmark = pytest.mark.acceptance

CACHE = Path(
    os.environ.get(
        "FORMATION_LAB_ACCEPTANCE_CACHE", Path(__file__).parent / ".acceptance_cache"
    )
)
ARCH = PolicyArch()


def _cache_key(kind: str, payload: dict) -> Path:
    blob = json.dumps(payload, sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:16]
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE / f"{kind}-{digest}"


def cached_teacher(env_cfg: EnvConfig, train_cfg: TrainConfig):
    """Train (or reload) one teacher; returns (policy, metrics, seconds)."""
    payload = {
        "env": dataclasses.asdict(env_cfg),
        "train": dataclasses.asdict(train_cfg),
        "arch": ARCH.to_dict(),
    }
    base = _cache_key("teacher", payload)
    bin_path = base.with_suffix(".bin")
    meta_path = base.with_suffix(".meta.json")
    if bin_path.exists() and meta_path.exists():
        policy, _, _, _ = ckpt.load_policy_checkpoint(bin_path)
        meta = json.loads(meta_path.read_text())
        return policy, meta["metrics"], meta["seconds"]
    t0 = time.monotonic()
    result = train_teacher(env_cfg, train_cfg, ARCH)
    seconds = time.monotonic() - t0
    ckpt.save_policy_checkpoint(
        bin_path, result.policy,
        {"tag": f"n{env_cfg.n_active}", "seed": train_cfg.seed,
         "config_hash": "acceptance", "env": dataclasses.asdict(env_cfg)},
        critic=result.critic, normalizer=result.normalizer,
    )
    meta_path.write_text(json.dumps({
        "metrics": result.metrics, "seconds": seconds,
    }))
    return result.policy, result.metrics, seconds


def eval_formation_episodes(policy, env_cfg, episodes=20, seed_base=50_000):
    """(mean initial d_HD, mean final-step d_HD) over deterministic episodes."""
    env = SwarmEnv(env_cfg)
    init_d, final_d = [], []
    for k in range(episodes):
        env.reset(seed_base + k)
        init_d.append(env.formation_distance())
        locals_ = env.local_states()
        for _ in range(env_cfg.episode_length):
            act = policy.act(locals_)
            locals_ = env.step(act.actions, act.messages).locals
        final_d.append(env.formation_distance())
    return float(np.mean(init_d)), float(np.mean(final_d))


def reward_trend(metrics):
    first = np.mean([r["reward_mean"] for r in metrics[:50]])
    last = np.mean([r["reward_mean"] for r in metrics[-50:]])
    return first, last


HD_N5 = EnvConfig(n_active=5, obs_radius=3.0)
TRAIN_SEEDS = (0, 1, 2)


# -- criterion 1: geometry oracle ------------------------------------------------

def brute_directed(a, b):
    worst = 0.0
    for x in a:
        best = min(math.sqrt((x[0] - y[0]) ** 2 + (x[1] - y[1]) ** 2) for y in b)
        worst = max(worst, best)
    return worst


def test_criterion_1_geometry_oracle():
    rng = np.random.default_rng(1)
    t0 = time.monotonic()
    for _ in range(500):
        a = rng.uniform(-20, 20, size=(rng.integers(1, 11), 2))
        b = rng.uniform(-20, 20, size=(rng.integers(1, 11), 2))
        expected = max(brute_directed(a, b), brute_directed(b, a))
        assert hausdorff(a, b) == expected
    elapsed = time.monotonic() - t0
    print(f"\n[criterion 1] 500 pairs exact, {elapsed:.2f}s")
    assert elapsed < 1.0


# -- criterion 2: GAE oracle ------------------------------------------------

def test_criterion_2_gae_oracle():
    rng = np.random.default_rng(2)
    gamma, lam = 0.8, 0.95
    for _ in range(100):
        rewards = rng.normal(size=100)
        values = rng.normal(size=101)
        adv = gae_advantages(rewards, values, gamma, lam)
        delta = rewards + gamma * values[1:] - values[:-1]
        direct = np.array([
            sum((gamma * lam) ** l * delta[t + l] for l in range(100 - t))
            for t in range(100)
        ])
        np.testing.assert_allclose(adv, direct, atol=1e-10)
    print("\n[criterion 2] 100 random sequences within 1e-10")


# -- criterion 3: gradient suite ------------------------------------------------

def test_criterion_3_gradient_suite():
    t0 = time.monotonic()
    reports = gradcheck.run_all(seed=0)
    elapsed = time.monotonic() - t0
    for name, report in reports.items():
        print(f"\n[criterion 3] {name}: max rel err {report.max_error:.2e}")
        assert report.passed, f"{name} path failed:\n{report}"
    assert set(reports) == {"policy", "value", "consensus", "distill"}
    assert elapsed < 60.0


# -- criterion 4: stop-gradient contract -----------------------------------------

def test_criterion_4_stop_gradient():
    env = SwarmEnv(EnvConfig(n_active=5, obs_radius=3.0, episode_length=10,
                             message_dim=16))
    arch = PolicyArch(message_dim=16, hidden_dim=16, heads=2)
    policy = CommPolicy(arch).init_params(np.random.default_rng(0))
    critic = Critic(arch).init_params(np.random.default_rng(1))
    normalizer = nn.ValueNormalizer()
    buf = collect_rollout(env, policy, 0.3, 0, np.random.default_rng(2))
    evaluate_snapshot(policy, critic, normalizer, buf, buf.flat_batch(arch))
    buf.advantages = gae(buf.rewards, buf.v_old[:-1], buf.v_old[-1], 0.8, 0.95)

    def snap(store):
        return {k: v.tobytes() for k, v in store.params.items()}

    psi0 = snap(policy.psi)
    update_step(policy, critic, normalizer, buf, TrainConfig(epochs=3),
                ppo=True, ce=False)
    assert snap(policy.psi) == psi0, "PPO-only update touched consensus params"

    theta0, phi0 = snap(policy.theta), snap(critic.phi)
    update_step(policy, critic, normalizer, buf, TrainConfig(epochs=3),
                ppo=False, ce=True)
    assert snap(policy.theta) == theta0, "CE-only update touched action params"
    assert snap(critic.phi) == phi0, "CE-only update touched critic params"
    print("\n[criterion 4] stop-gradient holds bit-exactly both ways")


# -- criterion 5: loss identities ------------------------------------------------

def test_criterion_5_loss_identities():
    rng = np.random.default_rng(5)
    og = rng.normal(size=(4, 8)) * 2
    assert float(consensus_loss(ad.constant(og.copy()), og).value) == \
        pytest.approx(0.0, abs=1e-12)
    for _ in range(1000):
        og = rng.normal(size=(1, 6)) * 3
        logits = ad.constant(rng.normal(size=(1, 6)) * 3)
        assert float(consensus_loss(logits, og).value) >= -1e-12

    u = rng.normal(size=(8, 2))
    h = rng.normal(size=(8, 16))
    assert float(distill_loss(ad.constant(u), ad.constant(h), u, h).value) == 0.0

    adv = rng.normal(size=16)
    v_old = rng.normal(size=16)
    assert float(value_objective(ad.constant(adv + v_old), adv, v_old).value) == \
        pytest.approx(0.0)
    print("\n[criterion 5] loss identities hold")


# -- criterion 6: training progress ------------------------------------------------

@pytest.fixture(scope="module")
def hd_teachers():
    return {
        seed: cached_teacher(HD_N5, TrainConfig(seed=seed))
        for seed in TRAIN_SEEDS
    }


def test_criterion_6_training_progress(hd_teachers):
    passes = 0
    for seed, (policy, metrics, seconds) in hd_teachers.items():
        first, last = reward_trend(metrics)
        init_d, final_d = eval_formation_episodes(policy, HD_N5)
        ok = last > first and final_d <= 0.5 * init_d
        passes += ok
        print(f"\n[criterion 6] seed {seed}: reward {first:.1f}->{last:.1f}, "
              f"d_HD {init_d:.3f}->{final_d:.3f} "
              f"({seconds / 60:.1f} min) {'PASS' if ok else 'fail'}")
        assert seconds < 45 * 60, f"seed {seed} exceeded the 45 min budget"
    assert passes >= 2, f"only {passes}/3 seeds show the required progress"


# -- criterion 7: HD vs PTP direction ---------------------------------------------

def test_criterion_7_hd_vs_ptp(hd_teachers):
    hd_policy = hd_teachers[0][0]
    ptp_env = dataclasses.replace(HD_N5, formation_metric="ptp")
    ptp_policy, _, _ = cached_teacher(ptp_env, TrainConfig(seed=0))

    _, hd_summary = eval_formation_cost(hd_policy, HD_N5, rounds=50,
                                        threshold=0.1, metric_label="hd")
    _, ptp_summary = eval_formation_cost(ptp_policy, ptp_env, rounds=50,
                                         threshold=0.1, metric_label="ptp")
    print(f"\n[criterion 7] hd: dist {hd_summary.distance_mean:.3f} "
          f"time {hd_summary.time_mean:.2f} ({hd_summary.achieved}/50) | "
          f"ptp: dist {ptp_summary.distance_mean:.3f} "
          f"time {ptp_summary.time_mean:.2f} ({ptp_summary.achieved}/50)")
    assert hd_summary.achieved > 0, "HD policy never reached the threshold"
    assert ptp_summary.achieved > 0, "PTP policy never reached the threshold"
    assert hd_summary.distance_mean <= 0.8 * ptp_summary.distance_mean
    assert hd_summary.time_mean <= 0.8 * ptp_summary.time_mean


# -- criterion 8: communication ablation -----------------------------------------

STRICT_ENV = EnvConfig(n_active=5, obs_radius=2.0)


@pytest.fixture(scope="module")
def strict_teachers():
    out = {}
    for mode in ("consmac", "no-comm"):
        for seed in TRAIN_SEEDS:
            out[mode, seed] = cached_teacher(
                STRICT_ENV, TrainConfig(seed=seed, mode=mode)
            )
    return out


def test_criterion_8_ablation_direction(strict_teachers):
    wins = 0
    for seed in TRAIN_SEEDS:
        _, full_metrics, _ = strict_teachers["consmac", seed]
        _, none_metrics, _ = strict_teachers["no-comm", seed]
        full_last = np.mean([r["reward_mean"] for r in full_metrics[-50:]])
        none_last = np.mean([r["reward_mean"] for r in none_metrics[-50:]])
        wins += full_last >= none_last
        print(f"\n[criterion 8] seed {seed}: consmac {full_last:.2f} "
              f"vs no-comm {none_last:.2f}")
    assert wins >= 2, f"communication won in only {wins}/3 seeds"


# -- criterion 9: distillation fidelity -------------------------------------------

@pytest.fixture(scope="module")
def distilled_student(strict_teachers):
    teachers = {5: strict_teachers["consmac", 0][0]}
    for n in (6, 7, 8):
        env_cfg = dataclasses.replace(STRICT_ENV, n_active=n)
        teachers[n], _, _ = cached_teacher(env_cfg, TrainConfig(seed=0))

    payload = {"kind": "student", "teachers": "strict-seed0",
               "steps": 10_000, "episodes": 20_000, "batch": 500}
    base = _cache_key("student", payload)
    bin_path = base.with_suffix(".bin")
    meta_path = base.with_suffix(".meta.json")
    if bin_path.exists() and meta_path.exists():
        student, _, _, _ = ckpt.load_policy_checkpoint(bin_path)
        return student, json.loads(meta_path.read_text())

    t0 = time.monotonic()
    memory = collect_replay(teachers, STRICT_ENV, steps_per_teacher=10_000, seed=9)
    config = DistillConfig(episodes=20_000, batch_size=500,
                           steps_per_teacher=10_000, eval_every=2_000,
                           seed=0, dtype="float32")
    result = train_student(memory, config, ARCH)
    seconds = time.monotonic() - t0
    meta = {
        "seconds": seconds,
        "init": result.init_metrics,
        "final": result.final_metrics,
    }
    ckpt.save_policy_checkpoint(
        bin_path, result.student,
        {"tag": "student", "seed": 0, "config_hash": "acceptance",
         "env": dataclasses.asdict(STRICT_ENV)},
    )
    meta_path.write_text(json.dumps(meta))
    return result.student, meta


def test_criterion_9_distillation_fidelity(distilled_student):
    _, meta = distilled_student
    print(f"\n[criterion 9] {meta['seconds'] / 60:.1f} min, "
          f"u_mse {meta['final']['u_mse']:.5f}, "
          f"h_mse {meta['init']['h_mse']:.4f}->{meta['final']['h_mse']:.5f}")
    assert meta["final"]["u_mse"] < 0.01
    assert meta["final"]["h_mse"] <= meta["init"]["h_mse"] / 10
    assert meta["seconds"] < 30 * 60


# -- criterion 10: adaptive recovery ---------------------------------------------

def test_criterion_10_adaptive_recovery(distilled_student):
    student, _ = distilled_student
    env_cfg = dataclasses.replace(STRICT_ENV, n_active=8)
    passes = 0
    for seed in TRAIN_SEEDS:
        rows = eval_adaptive(student, env_cfg, straggle_every=100,
                             total_steps=400, seed=700 + seed,
                             drop_seed=seed)
        metric = np.array([r.neg_hd for r in rows])
        ok = True
        details = []
        for w0 in (100, 200, 300):
            prev_best = metric[max(0, w0 - 100):w0].max()
            window_best = metric[w0:w0 + 100].max()
            details.append(f"{prev_best:.2f}->{window_best:.2f}")
            if window_best < prev_best - 0.3:
                ok = False
        passes += ok
        print(f"\n[criterion 10] seed {seed}: windows {details} "
              f"{'PASS' if ok else 'fail'}")
    assert passes >= 2, f"recovery held in only {passes}/3 seeds"


# -- criterion 11: plumbing -------------------------------------------------------

def test_criterion_11_plumbing(tmp_path):
    # checkpoint round trip is bit-exact
    policy = CommPolicy(PolicyArch(message_dim=16, hidden_dim=16, heads=2))
    policy.init_params(np.random.default_rng(3))
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    ckpt.save_policy_checkpoint(p1, policy, {"tag": "n5", "seed": 3})
    arrays, meta = ckpt.load_checkpoint(p1)
    ckpt.save_checkpoint(p2, arrays, meta)
    assert p1.read_bytes() == p2.read_bytes()

    # any command reruns identically from config plus seed
    args = lambda out: [
        "train", "--n", "5", "--episodes", "2", "--seed", "4",
        "--out", str(out),
        "--set", "arch.message_dim=16", "--set", "arch.hidden_dim=16",
        "--set", "arch.heads=2", "--set", "env.message_dim=16",
        "--set", "env.episode_length=10", "--set", "train.epochs=2",
        "--set", "train.critic_warmup=0",
    ]
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli_main(args(out1)) == 0
    assert cli_main(args(out2)) == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "checkpoint.bin").read_bytes() == \
        (out2 / "checkpoint.bin").read_bytes()
    print("\n[criterion 11] bit-exact checkpoints and deterministic reruns")
