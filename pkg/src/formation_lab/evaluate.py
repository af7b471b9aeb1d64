"""Evaluation protocols: formation cost tables and straggler-driven runs.

Both drive checkpoints deterministically (actions are the policy means).
Formation cost counts per-agent path length and steps until the swarm's
centred shape first comes within a threshold of its template; rounds that
never get there are reported but excluded from the means. The adaptive
protocol drops a random agent on a fixed cadence and logs the plain
negated Hausdorff distance to the current template each step.
"""

from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, SwarmEnv
from .geometry import N_MIN
from .policy import CommPolicy


@dataclass
class CostRound:
    seed: int
    achieved: bool
    distance: float  # mean per-agent path length at achievement
    steps: int


@dataclass
class CostSummary:
    n: int
    metric: str
    rounds: int
    achieved: int
    distance_mean: float
    time_mean: float
    failed_rounds: list = field(default_factory=list)


def eval_formation_cost(policy: CommPolicy, env_config: EnvConfig,
                        rounds: int = 50, threshold: float = 0.1,
                        seed_base: int = 0, metric_label: str = "hd"):
    """-> (per-round records, summary). Formation achieved when the centred
    swarm's Hausdorff distance to its template first drops below threshold."""
    env = SwarmEnv(env_config)
    records = []
    for r in range(rounds):
        seed = seed_base + r
        env.reset(seed)
        ids = env.active_ids
        path = np.zeros(len(ids))
        achieved = env.formation_distance() < threshold
        steps = 0
        locals_ = env.local_states()
        while not achieved and steps < env_config.episode_length:
            before = env.state.positions[ids].copy()
            act = policy.act(locals_)
            result = env.step(act.actions, act.messages)
            locals_ = result.locals
            path += np.hypot(*(env.state.positions[ids] - before).T)
            steps += 1
            achieved = env.formation_distance() < threshold
        records.append(CostRound(
            seed=seed,
            achieved=achieved,
            distance=float(path.mean()) if achieved else float("nan"),
            steps=steps if achieved else -1,
        ))
    done = [rec for rec in records if rec.achieved]
    summary = CostSummary(
        n=env_config.n_active,
        metric=metric_label,
        rounds=rounds,
        achieved=len(done),
        distance_mean=float(np.mean([rec.distance for rec in done])) if done else float("nan"),
        time_mean=float(np.mean([rec.steps for rec in done])) if done else float("nan"),
        failed_rounds=[rec.seed for rec in records if not rec.achieved],
    )
    return records, summary


@dataclass
class AdaptiveRow:
    t: int
    n_active: int
    neg_hd: float  # plain negated Hausdorff distance to the current template


def eval_adaptive(policy: CommPolicy, env_config: EnvConfig,
                  straggle_every: int = 100, total_steps: int = 400,
                  seed: int = 0, drop_seed: int = 0):
    """Start full, drop one random active agent every ``straggle_every`` steps
    down to the minimum fleet, logging the formation metric each step."""
    env = SwarmEnv(env_config)
    env.reset(seed)
    drop_rng = np.random.default_rng(drop_seed)
    rows = [AdaptiveRow(0, env.n_active, -env.formation_distance())]
    locals_ = env.local_states()
    for t in range(1, total_steps + 1):
        if straggle_every and t % straggle_every == 0 and env.n_active > N_MIN:
            victim = int(drop_rng.choice(env.active_ids))
            env.deactivate_agent(victim)
            locals_ = env.local_states()
        act = policy.act(locals_)
        result = env.step(act.actions, act.messages)
        locals_ = result.locals
        rows.append(AdaptiveRow(t, env.n_active, -env.formation_distance()))
    return rows
