"""Policy distillation: fold the per-fleet-size teachers into one student.

Teachers are rolled out deterministically in their own environments; every
agent-step contributes a tuple of (local inputs, action mean, consensus
vector). The student consumes the same ragged input layout regardless of
which teacher produced a tuple (absent agents are zero slots) and regresses
both the action mean and the consensus vector with a squared loss, which
trains its action and communication parameters jointly.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .env import EnvConfig, SwarmEnv
from .geometry import N_MAX, N_MIN
from .policy import AttentionBatch, CommPolicy, PolicyArch


@dataclass
class DistillConfig:
    episodes: int = 200_000
    batch_size: int = 500
    learning_rate: float = 2e-4
    steps_per_teacher: int = 60_000
    holdout_fraction: float = 0.1
    eval_every: int = 1000
    grad_clip: float = 10.0
    seed: int = 0
    # float32 roughly halves the wall time of the long supervised run;
    # gradient checks and PPO training stay at float64
    dtype: str = "float64"


@dataclass
class TeacherRecord:
    """All tuples harvested from one teacher, stored compactly.

    Tuple m maps to (step m // n, agent m % n); messages live once per step
    in ``outbox_hist`` and are gathered on demand. float32 storage keeps the
    memory for a full harvest in the hundreds of MB.
    """

    n: int
    agent_ids: np.ndarray     # (n,)
    obs: np.ndarray           # (M, obs_dim) float32
    outbox_hist: np.ndarray   # (S, n_max, message_dim) float32
    nb_idx: np.ndarray        # (M, n_max - 1) int16, -1 padded
    nb_count: np.ndarray      # (M,) int16
    nb_dist: np.ndarray       # (M, n_max - 1) float32
    u: np.ndarray             # (M, act_dim) float32
    h: np.ndarray             # (M, message_dim) float32

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    def step_agent(self, idx: np.ndarray):
        n = self.agent_ids.shape[0]
        return idx // n, self.agent_ids[idx % n]


@dataclass
class DistillBatch:
    att: AttentionBatch
    u: np.ndarray         # (B, act_dim)
    h: np.ndarray         # (B, message_dim)
    source_n: np.ndarray  # (B,)


class ReplayMemory:
    """Per-teacher tuple stores with a train/held-out split.

    Batches draw the source teacher uniformly per tuple, so each teacher's
    share of any long run of batches converges to one quarter.
    """

    def __init__(self, records: dict, holdout_fraction: float = 0.1):
        self.records = dict(sorted(records.items()))
        self.holdout_fraction = holdout_fraction
        self._train_idx = {}
        self._held_idx = {}
        for n, rec in self.records.items():
            cut = rec.size - int(round(rec.size * holdout_fraction))
            self._train_idx[n] = np.arange(cut)
            self._held_idx[n] = np.arange(cut, rec.size)

    @property
    def teacher_sizes(self) -> dict:
        return {n: rec.size for n, rec in self.records.items()}

    def _gather(self, rec: TeacherRecord, idx: np.ndarray, dtype):
        """Ragged rows for the selected tuples of one teacher."""
        steps, agents = rec.step_agent(idx)
        counts = rec.nb_count[idx].astype(np.int64)
        obs = rec.obs[idx].astype(dtype)
        self_msg = rec.outbox_hist[steps, agents].astype(dtype)
        k_max = rec.nb_idx.shape[1]
        padded_ids = np.maximum(rec.nb_idx[idx], 0)
        padded_msgs = rec.outbox_hist[steps[:, None], padded_ids]  # (m, k_max, D)
        mask = np.arange(k_max)[None, :] < counts[:, None]
        return obs, self_msg, counts, (
            padded_msgs[mask].astype(dtype),
            rec.nb_dist[idx][mask].astype(dtype),
        )

    def build_batch(self, picks: dict, arch: PolicyArch,
                    dtype=np.float64) -> DistillBatch:
        """Assemble a mixed batch from {teacher_n: tuple indices}."""
        dtype = np.dtype(dtype)
        obs_parts, mem_parts, count_parts = [], [], []
        row_msg_parts, row_dist_parts = [], []
        u_parts, h_parts, src_parts = [], [], []
        for n, idx in picks.items():
            if idx.size == 0:
                continue
            rec = self.records[n]
            obs, self_msg, counts, (nb_rows, nb_dists) = self._gather(rec, idx, dtype)
            obs_parts.append(obs)
            mem_parts.append(np.concatenate([self_msg, obs], axis=1))
            count_parts.append(counts)
            row_msg_parts.append(nb_rows)
            row_dist_parts.append(nb_dists)
            u_parts.append(rec.u[idx].astype(dtype))
            h_parts.append(rec.h[idx].astype(dtype))
            src_parts.append(np.full(idx.size, n, dtype=np.int64))
        obs = np.concatenate(obs_parts)
        mem_input = np.concatenate(mem_parts)
        counts = np.concatenate(count_parts)
        B = obs.shape[0]
        offsets = np.zeros(B + 1, dtype=np.int64)
        np.cumsum(1 + counts, out=offsets[1:])
        R = int(offsets[-1])
        rows_msg = np.zeros((R, arch.message_dim), dtype=dtype)
        rows_dist = np.zeros((R, 1), dtype=dtype)
        nb_rows = np.concatenate(row_msg_parts)
        nb_dists = np.concatenate(row_dist_parts)
        # neighbor rows sit right after each sample's self slot
        nb_positions = np.repeat(offsets[:-1] + 1, counts) + _within_segment(counts)
        rows_msg[nb_positions] = nb_rows
        rows_dist[nb_positions, 0] = nb_dists
        att = AttentionBatch(
            obs=obs, mem_input=mem_input, rows_msg=rows_msg, rows_dist=rows_dist,
            offsets=offsets, self_pos=offsets[:-1].copy(),
        )
        return DistillBatch(
            att=att,
            u=np.concatenate(u_parts),
            h=np.concatenate(h_parts),
            source_n=np.concatenate(src_parts),
        )

    def sample_batch(self, rng, batch_size: int, arch: PolicyArch,
                     dtype=np.float64) -> DistillBatch:
        teachers = np.array(sorted(self.records))
        choice = rng.integers(0, len(teachers), size=batch_size)
        picks = {}
        for i, n in enumerate(teachers):
            m = int(np.sum(choice == i))
            pool = self._train_idx[n]
            picks[n] = pool[rng.integers(0, pool.size, size=m)]
        return self.build_batch(picks, arch, dtype)

    def heldout_batches(self, arch: PolicyArch, chunk: int = 2048,
                        dtype=np.float64):
        for n in sorted(self.records):
            idx = self._held_idx[n]
            for lo in range(0, idx.size, chunk):
                yield self.build_batch({n: idx[lo : lo + chunk]}, arch, dtype)

    # -- persistence -----------------------------------------------------

    def save(self, path: str):
        arrays = {}
        for n, rec in self.records.items():
            for name in ("obs", "outbox_hist", "nb_idx", "nb_count",
                         "nb_dist", "u", "h", "agent_ids"):
                arrays[f"t{n}_{name}"] = getattr(rec, name)
        np.savez(path, **arrays)
        sidecar = {
            "holdout_fraction": self.holdout_fraction,
            "teachers": sorted(self.records),
            "counts": {str(n): rec.size for n, rec in self.records.items()},
            "widths": {
                "obs": int(next(iter(self.records.values())).obs.shape[1]),
                "message": int(next(iter(self.records.values())).h.shape[1]),
            },
            "source_n_histogram": {
                str(n): rec.size for n, rec in self.records.items()
            },
        }
        with open(_sidecar_path(path), "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "ReplayMemory":
        with open(_sidecar_path(path)) as fh:
            sidecar = json.load(fh)
        data = np.load(path)
        records = {}
        for n in sidecar["teachers"]:
            records[n] = TeacherRecord(
                n=n,
                agent_ids=data[f"t{n}_agent_ids"],
                obs=data[f"t{n}_obs"],
                outbox_hist=data[f"t{n}_outbox_hist"],
                nb_idx=data[f"t{n}_nb_idx"],
                nb_count=data[f"t{n}_nb_count"],
                nb_dist=data[f"t{n}_nb_dist"],
                u=data[f"t{n}_u"],
                h=data[f"t{n}_h"],
            )
        return cls(records, sidecar["holdout_fraction"])


def _sidecar_path(path) -> str:
    path = str(path)
    base = path[:-4] if path.endswith(".npz") else path
    return base + ".json"


def _within_segment(counts: np.ndarray) -> np.ndarray:
    """[0..c0-1, 0..c1-1, ...] for ragged placement."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    return np.arange(total, dtype=np.int64) - starts


def collect_replay(teachers: dict, env_config: EnvConfig, steps_per_teacher: int,
                   seed: int = 0, holdout_fraction: float = 0.1) -> ReplayMemory:
    """Deterministic teacher rollouts; tuples per teacher = steps x fleet size."""
    expected = set(range(N_MIN, N_MAX + 1))
    if set(teachers) != expected:
        missing = sorted(expected - set(teachers))
        raise ValueError(f"missing teachers for fleet sizes {missing}")
    records = {}
    ss = np.random.SeedSequence(seed)
    teacher_seqs = dict(zip(sorted(teachers), ss.spawn(len(teachers))))
    for n, policy in sorted(teachers.items()):
        records[n] = _harvest_one(
            policy, replace(env_config, n_active=n), steps_per_teacher,
            teacher_seqs[n],
        )
    return ReplayMemory(records, holdout_fraction)


def _harvest_one(policy: CommPolicy, cfg: EnvConfig, steps: int,
                 seq) -> TeacherRecord:
    arch = policy.arch
    env = SwarmEnv(cfg)
    n = cfg.n_active
    M = steps * n
    rec = TeacherRecord(
        n=n,
        agent_ids=np.arange(n),
        obs=np.zeros((M, cfg.obs_dim), dtype=np.float32),
        outbox_hist=np.zeros((steps, cfg.n_max, cfg.message_dim), dtype=np.float32),
        nb_idx=np.full((M, cfg.n_max - 1), -1, dtype=np.int16),
        nb_count=np.zeros(M, dtype=np.int16),
        nb_dist=np.zeros((M, cfg.n_max - 1), dtype=np.float32),
        u=np.zeros((M, arch.act_dim), dtype=np.float32),
        h=np.zeros((M, arch.message_dim), dtype=np.float32),
    )
    episodes = -(-steps // cfg.episode_length)
    episode_seeds = seq.spawn(episodes)
    s = 0
    for ep in range(episodes):
        env.reset(episode_seeds[ep])
        locals_ = env.local_states()
        for _ in range(cfg.episode_length):
            if s >= steps:
                break
            rec.outbox_hist[s] = env.state.outbox
            act = policy.act(locals_)
            for j, ls in enumerate(locals_):
                m = s * n + j
                rec.obs[m] = ls.obs
                k = ls.nb_idx.size
                rec.nb_count[m] = k
                if k:
                    rec.nb_idx[m, :k] = ls.nb_idx
                    rec.nb_dist[m, :k] = ls.nb_dist
            rec.u[s * n : (s + 1) * n] = act.mu
            rec.h[s * n : (s + 1) * n] = act.h
            result = env.step(act.actions, act.messages)
            locals_ = result.locals
            s += 1
    return rec


def distill_loss(u_student, h_student, u_target, h_target):
    """Batch-mean squared error on action means plus consensus vectors."""
    if u_student.value.shape != u_target.shape:
        raise ValueError("action shape mismatch")
    if h_student.value.shape != h_target.shape:
        raise ValueError("consensus shape mismatch")
    du = ad.sum_axis(ad.square(ad.sub(u_student, ad.constant(u_target))), axis=1)
    dh = ad.sum_axis(ad.square(ad.sub(h_student, ad.constant(h_target))), axis=1)
    return ad.mean(ad.add(du, dh))


def heldout_metrics(student: CommPolicy, memory: ReplayMemory) -> dict:
    """Per-component MSEs of the student against held-out teacher tuples."""
    arch = student.arch
    u_sq = h_sq = 0.0
    u_count = h_count = 0
    with ad.no_grad():
        for batch in memory.heldout_batches(arch, dtype=student.dtype):
            psi_leaves = student.psi.bind()
            theta_leaves = student.theta.bind()
            h_s, _ = student.consensus_forward(psi_leaves, batch.att,
                                               with_estimate=False)
            mu_s, _, _ = student.action_forward(theta_leaves, batch.att.obs, h_s)
            u_sq += float(np.sum((mu_s.value - batch.u) ** 2))
            h_sq += float(np.sum((h_s.value - batch.h) ** 2))
            u_count += batch.u.size
            h_count += batch.h.size
    return {"u_mse": u_sq / max(u_count, 1), "h_mse": h_sq / max(h_count, 1)}


@dataclass
class DistillResult:
    student: CommPolicy
    history: list = field(default_factory=list)
    init_metrics: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)


def train_student(memory: ReplayMemory, config: DistillConfig,
                  arch: PolicyArch, progress=None) -> DistillResult:
    ss = np.random.SeedSequence(config.seed)
    init_seq, sample_seq = ss.spawn(2)
    dtype = np.dtype(config.dtype)
    student = CommPolicy(arch, dtype=dtype).init_params(np.random.default_rng(init_seq))
    rng = np.random.default_rng(sample_seq)
    result = DistillResult(student=student)
    result.init_metrics = heldout_metrics(student, memory)

    for ep in range(config.episodes):
        batch = memory.sample_batch(rng, config.batch_size, arch, dtype)
        psi_leaves = student.psi.bind()
        theta_leaves = student.theta.bind()
        h_s, _ = student.consensus_forward(psi_leaves, batch.att,
                                           with_estimate=False)
        mu_s, _, _ = student.action_forward(theta_leaves, batch.att.obs, h_s)
        loss = distill_loss(mu_s, h_s, batch.u, batch.h)
        ad.backward(loss)
        student.psi.accumulate(psi_leaves)
        student.theta.accumulate(theta_leaves)
        nn.clip_grad_norm(student.psi, config.grad_clip)
        nn.clip_grad_norm(student.theta, config.grad_clip)
        nn.adam_step(student.psi, config.learning_rate)
        nn.adam_step(student.theta, config.learning_rate)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise RuntimeError(f"distillation diverged at episode {ep}")
        if (ep + 1) % config.eval_every == 0 or ep == config.episodes - 1:
            metrics = heldout_metrics(student, memory)
            row = {"episode": ep, "loss": loss_val, **metrics}
            result.history.append(row)
            if progress is not None:
                progress(row)
    result.final_metrics = heldout_metrics(student, memory)
    return result
