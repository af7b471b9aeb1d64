"""Command-line surface: train | distill | eval-cost | eval-adaptive | gradcheck.

Every command resolves a run directory (``runs/<timestamp>-<command>`` unless
--out is given), serializes its full config there, and writes metrics as CSV
plus a human log. Reruns from the same config and seed produce identical
metrics and checkpoint bytes.
"""

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfg_mod
from . import distill as distill_mod
from . import evaluate, gradcheck, mappo
from .env import EnvConfig
from .geometry import N_MAX, N_MIN


class RunLog:
    def __init__(self, path):
        self._fh = open(path, "w")

    def line(self, msg: str):
        stamp = time.strftime("%H:%M:%S")
        print(msg)
        self._fh.write(f"[{stamp}] {msg}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _run_dir(args, command: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_config(args) -> cfg_mod.RunConfig:
    config = cfg_mod.load_config(args.config)
    return cfg_mod.apply_overrides(config, getattr(args, "set", None))


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.12g}"
    return value


def _seed_of(args) -> int:
    return args.seed if args.seed is not None else cfg_mod.default_seed()


# -- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    config = _resolve_config(args)
    env_kwargs = {}
    if args.n is not None:
        env_kwargs["n_active"] = args.n
    if args.obs_radius is not None:
        env_kwargs["obs_radius"] = args.obs_radius
    if args.metric is not None:
        env_kwargs["formation_metric"] = args.metric
    if env_kwargs:
        config.env = dataclasses.replace(config.env, **env_kwargs)
    train_kwargs = {"seed": _seed_of(args)}
    if args.mode is not None:
        train_kwargs["mode"] = args.mode
    if args.episodes is not None:
        train_kwargs["episodes"] = args.episodes
    config.train = dataclasses.replace(config.train, **train_kwargs)

    out = _run_dir(args, "train")
    log = RunLog(out / "log.txt")
    cfg_mod.save_config(config, out / "config.json",
                        extra={"command": "train", "seed": config.train.seed})
    log.line(
        f"train: n={config.env.n_active} obs_radius={config.env.obs_radius} "
        f"mode={config.train.mode} metric={config.env.formation_metric} "
        f"episodes={config.train.episodes} seed={config.train.seed}"
    )
    t0 = time.monotonic()

    def progress(row):
        if row["episode"] % 10 == 0 or row["episode"] == config.train.episodes - 1:
            log.line(
                f"  ep {row['episode']:>4d} reward {row['reward_mean']:9.3f} "
                f"r_f {row['r_f_mean']:7.3f} ce {row['ce_loss']:.4f} "
                f"sigma {row['sigma']:.3f}"
            )

    result = mappo.train_teacher(config.env, config.train, config.arch, progress)
    columns = ["episode", "reward_mean", "r_f_mean", "r_v_mean", "r_c_mean",
               "policy_loss", "value_loss", "ce_loss", "entropy", "sigma",
               "message_max_abs"]
    _write_csv(out / "metrics.csv", result.metrics, columns)
    if config.train.mode == "no-comm":
        worst = max(row["message_max_abs"] for row in result.metrics)
        log.line(f"no-comm check: max |message| over run = {worst} (must be 0)")
    meta = {
        "tag": f"n{config.env.n_active}",
        "seed": config.train.seed,
        "config_hash": config.config_hash(),
        "mode": config.train.mode,
        "env": _env_meta(config.env),
    }
    ckpt.save_policy_checkpoint(out / "checkpoint.bin", result.policy, meta,
                                critic=result.critic, normalizer=result.normalizer)
    log.line(f"done in {time.monotonic() - t0:.1f}s -> {out}")
    log.close()
    return 0


def _env_meta(env_config: EnvConfig) -> dict:
    data = dataclasses.asdict(env_config)
    data["destination"] = list(data["destination"])
    return data


def _env_from_meta(meta: dict) -> EnvConfig:
    data = dict(meta)
    data["destination"] = tuple(data["destination"])
    return EnvConfig(**data)


# -- distill ------------------------------------------------------------------

def cmd_distill(args) -> int:
    config = _resolve_config(args)
    seed = _seed_of(args)
    distill_kwargs = {"seed": seed}
    if args.episodes is not None:
        distill_kwargs["episodes"] = args.episodes
    if args.batch_size is not None:
        distill_kwargs["batch_size"] = args.batch_size
    if args.steps_per_teacher is not None:
        distill_kwargs["steps_per_teacher"] = args.steps_per_teacher
    config.distill = dataclasses.replace(config.distill, **distill_kwargs)

    out = _run_dir(args, "distill")
    log = RunLog(out / "log.txt")
    cfg_mod.save_config(config, out / "config.json",
                        extra={"command": "distill", "seed": seed})
    t0 = time.monotonic()

    if args.replay:
        log.line(f"loading replay memory from {args.replay}")
        memory = distill_mod.ReplayMemory.load(args.replay)
    else:
        teachers = {}
        env_meta = None
        for path in args.teacher or ():
            policy, _, _, meta = ckpt.load_policy_checkpoint(path)
            tag = meta.get("tag", "")
            if not tag.startswith("n"):
                raise SystemExit(f"{path}: expected a teacher checkpoint, got tag {tag!r}")
            teachers[int(tag[1:])] = policy
            env_meta = env_meta or meta["env"]
        log.line(f"harvesting {config.distill.steps_per_teacher} steps from "
                 f"teachers {sorted(teachers)}")
        memory = distill_mod.collect_replay(
            teachers, _env_from_meta(env_meta),
            config.distill.steps_per_teacher, seed=seed,
            holdout_fraction=config.distill.holdout_fraction,
        )
        if args.save_replay:
            memory.save(args.save_replay)
            log.line(f"replay memory saved to {args.save_replay}")

    log.line(f"teacher tuple counts: {memory.teacher_sizes}")

    def progress(row):
        log.line(
            f"  ep {row['episode']:>6d} loss {row['loss']:10.6f} "
            f"heldout u_mse {row['u_mse']:.6f} h_mse {row['h_mse']:.6f}"
        )

    result = distill_mod.train_student(memory, config.distill, config.arch, progress)
    log.line(f"init heldout: {result.init_metrics}")
    log.line(f"final heldout: {result.final_metrics}")
    rows = (
        [{"episode": -1, "loss": float("nan"), **result.init_metrics}]
        + result.history
    )
    _write_csv(out / "metrics.csv", rows, ["episode", "loss", "u_mse", "h_mse"])
    meta = {
        "tag": "student",
        "seed": seed,
        "config_hash": config.config_hash(),
        "mode": "consmac",
        "env": _env_meta(config.env),
        "init_metrics": result.init_metrics,
        "final_metrics": result.final_metrics,
    }
    ckpt.save_policy_checkpoint(out / "checkpoint.bin", result.student, meta)
    log.line(f"done in {time.monotonic() - t0:.1f}s -> {out}")
    log.close()
    return 0


# -- eval-cost ------------------------------------------------------------------

def cmd_eval_cost(args) -> int:
    out = _run_dir(args, "eval-cost")
    log = RunLog(out / "log.txt")
    seed = _seed_of(args)
    summaries = {}
    all_rows = []
    for path in args.checkpoint:
        policy, _, _, meta = ckpt.load_policy_checkpoint(path)
        env_config = _env_from_meta(meta["env"])
        if args.n is not None and f"n{args.n}" != meta.get("tag"):
            if not args.force:
                raise SystemExit(
                    f"{path}: checkpoint tag {meta.get('tag')!r} does not match "
                    f"requested fleet size n{args.n}; pass --force to override"
                )
            env_config = dataclasses.replace(env_config, n_active=args.n)
        metric = args.metric or env_config.formation_metric
        log.line(f"eval-cost {path}: n={env_config.n_active} metric={metric} "
                 f"rounds={args.rounds} threshold={args.threshold}")
        records, summary = evaluate.eval_formation_cost(
            policy, env_config, rounds=args.rounds, threshold=args.threshold,
            seed_base=seed, metric_label=metric,
        )
        summaries[env_config.n_active] = summary
        for rec in records:
            all_rows.append({
                "n": env_config.n_active, "metric": metric, "seed": rec.seed,
                "achieved": int(rec.achieved), "distance": rec.distance,
                "steps": rec.steps,
            })
        log.line(
            f"  achieved {summary.achieved}/{summary.rounds} "
            f"distance {summary.distance_mean:.4f} time {summary.time_mean:.2f}"
        )
    _write_csv(out / "metrics.csv", all_rows,
               ["n", "metric", "seed", "achieved", "distance", "steps"])
    _write_cost_table(out / "cost_table.csv", summaries)
    log.line(f"-> {out}")
    log.close()
    return 0


def _write_cost_table(path, summaries: dict):
    """Cost table: one distance row and one time row per metric, n columns."""
    metrics = sorted({s.metric for s in summaries.values()})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row"] + [f"n{n}" for n in range(N_MIN, N_MAX + 1)])
        for metric in metrics:
            for kind, attr in (("distance", "distance_mean"), ("time", "time_mean")):
                row = [f"{metric}-{kind}"]
                for n in range(N_MIN, N_MAX + 1):
                    summary = summaries.get(n)
                    if summary is None or summary.metric != metric:
                        row.append("")
                    else:
                        row.append(f"{getattr(summary, attr):.6g}")
                writer.writerow(row)


# -- eval-adaptive ------------------------------------------------------------------

def cmd_eval_adaptive(args) -> int:
    out = _run_dir(args, "eval-adaptive")
    log = RunLog(out / "log.txt")
    seed = _seed_of(args)
    policy, _, _, meta = ckpt.load_policy_checkpoint(args.checkpoint)
    if meta.get("tag") != "student" and not args.force:
        raise SystemExit(
            f"{args.checkpoint}: adaptive evaluation expects a student checkpoint "
            f"(tag {meta.get('tag')!r}); pass --force to run it anyway"
        )
    env_config = dataclasses.replace(
        _env_from_meta(meta["env"]), n_active=args.start_n
    )
    if args.obs_radius is not None:
        env_config = dataclasses.replace(env_config, obs_radius=args.obs_radius)
    log.line(
        f"eval-adaptive: start n={env_config.n_active} straggler every "
        f"{args.straggle_every} steps, {args.steps} steps total, seed {seed}"
    )
    rows = evaluate.eval_adaptive(
        policy, env_config, straggle_every=args.straggle_every,
        total_steps=args.steps, seed=seed, drop_seed=seed + 1,
    )
    _write_csv(out / "metrics.csv",
               [dataclasses.asdict(r) for r in rows], ["t", "n_active", "neg_hd"])
    switches = [r.t for i, r in enumerate(rows[1:], 1)
                if rows[i - 1].n_active != r.n_active]
    log.line(f"fleet size switches at steps {switches}")
    log.line(f"-> {out}")
    log.close()
    return 0


# -- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    out = _run_dir(args, "gradcheck")
    log = RunLog(out / "log.txt")
    corrupt = "executor.w0" if args.inject_bug else None
    if args.inject_bug:
        log.line("self-test: corrupting one analytic gradient block on purpose")
    reports = gradcheck.run_all(seed=_seed_of(args), corrupt_block=corrupt)
    failed = []
    for name, report in reports.items():
        log.line(f"{name} path:")
        for line in str(report).splitlines():
            log.line(line)
        if not report.passed:
            failed.append(name)
    with open(out / "report.txt", "w") as fh:
        for name, report in reports.items():
            fh.write(f"{name}\n{report}\n")
    if failed:
        log.line(f"FAILED paths: {failed}")
        log.close()
        return 1
    log.line("all gradient paths pass")
    log.close()
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="formation-lab",
        description="Swarm formation lab: consensus-communication policies, "
                    "multi-agent PPO, policy distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or TOML run config")
        p.add_argument("--out", help="output directory (default runs/<ts>-<cmd>)")
        p.add_argument("--seed", type=int, default=None,
                       help=f"run seed (default ${cfg_mod.SEED_ENV_VAR} or 0)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config value")

    p = sub.add_parser("train", help="train one fleet-size teacher")
    common(p)
    p.add_argument("--n", type=int, help="fleet size")
    p.add_argument("--obs-radius", type=float, dest="obs_radius")
    p.add_argument("--mode", choices=["consmac", "consmac-no-ce", "no-comm"])
    p.add_argument("--metric", choices=["hd", "ptp"], help="formation reward metric")
    p.add_argument("--episodes", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="merge teacher policies into one student")
    common(p)
    p.add_argument("--teacher", action="append", help="teacher checkpoint (repeat)")
    p.add_argument("--replay", help="reuse a saved replay memory (.npz)")
    p.add_argument("--save-replay", help="persist the harvested replay memory")
    p.add_argument("--episodes", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--steps-per-teacher", type=int, dest="steps_per_teacher")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval-cost", help="formation distance/time cost table")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--metric", choices=["hd", "ptp"])
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--n", type=int, help="expected fleet size of the checkpoint")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval_cost)

    p = sub.add_parser("eval-adaptive", help="straggler-driven adaptive formation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--straggle-every", type=int, default=100, dest="straggle_every")
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--start-n", type=int, default=N_MAX, dest="start_n")
    p.add_argument("--obs-radius", type=float, dest="obs_radius")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval_adaptive)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--inject-bug", action="store_true",
                   help="corrupt one gradient block to prove the check bites")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
