"""Command-line entry point (``simplerl`` or ``python -m simplerl``).

Exit status: 0 success, 2 usage error, 3 runtime failure. Run directories
default to ``$SIMPLERL_OUTPUT_ROOT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .envs import EnvSpec, ReplayBuffer, collect, make_env, random_policy, run_episode
from .metrics import comparison_rows, score_stats
from .ppo import PPOLearner, evaluate
from .simple_loop import RunReport, finetune_real, run_ppo_baseline, run_simple
from .world_model import WorldModelTrainer, build_model, one_step_accuracy, rollout_accuracy

OUTPUT_ROOT_VAR = "SIMPLERL_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_VAR, "runs"))


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock on a run directory for the duration of a training command."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"run directory {run_dir} is locked by another process") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", default="", help="comma-separated preset names")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--env", help="environment name (env.name)")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable; run.seeds)")
    p.add_argument("--run-dir", help="run directory (default under the output root)")


def _resolve(args) -> cfgmod.RunConfig:
    overrides = cfgmod.parse_assignments(args.set)
    if args.env:
        overrides["env.name"] = args.env
    if args.seed:
        overrides["run.seeds"] = list(args.seed)
    return cfgmod.load_config(args.config, args.preset, overrides)


def _run_dir(args, cfg, kind: str) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    base = Path(cfg.run.output_dir) if cfg.run.output_dir else output_root()
    preset = (cfg.run.preset or "default").replace(",", "+")
    return base / f"{kind}-{cfg.env.name}-{preset}"


def _seed_dirs(root: Path, seeds):
    return [(s, root / f"seed{s}") for s in seeds]


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# -- commands ------------------------------------------------------------------

def cmd_train_simple(args):
    cfg = _resolve(args)
    root = _run_dir(args, cfg, "simple")
    out = []
    for seed, d in _seed_dirs(root, cfg.run.seeds):
        with run_lock(d):
            cfgmod.save_config(cfg, d / "config.txt")
            loop = replace(cfg.loop, eval_episodes=cfg.run.eval_episodes,
                           eval_temperature=cfg.run.eval_temperature)
            rep = run_simple(cfg.env, cfg.model, cfg.ppo, loop, seed, d,
                             dry_run=args.dry_run, resume=args.resume,
                             log=lambda m, s=seed: print(f"[seed {s}] {m}", file=sys.stderr,
                                                             flush=True))
        out.append({"seed": seed, "run_dir": str(d), **rep.counters(),
                    "final_scores": rep.final_scores})
    _print(out)


def cmd_train_ppo_baseline(args):
    cfg = _resolve(args)
    root = _run_dir(args, cfg, "ppo")
    steps = args.steps or cfg.run.baseline_steps or cfg.loop.total_real_interactions
    out = []
    for seed, d in _seed_dirs(root, cfg.run.seeds):
        with run_lock(d):
            cfgmod.save_config(cfg, d / "config.txt")
            rep = run_ppo_baseline(cfg.env, cfg.ppo, steps, seed, cfg.run.baseline_envs,
                                   eval_every=args.eval_every or max(1, steps // 8),
                                   eval_episodes=cfg.run.eval_episodes,
                                   eval_temperature=cfg.run.eval_temperature,
                                   sticky=cfg.loop.sticky_actions, run_dir=d)
        out.append({"seed": seed, "run_dir": str(d), **rep.counters(),
                    "final_scores": rep.final_scores})
    _print(out)


def cmd_train_world_model(args):
    cfg = _resolve(args)
    root = _run_dir(args, cfg, "world-model")
    steps = args.steps or cfg.loop.scaled(cfg.loop.model_steps_first)
    n_data = args.interactions or cfg.loop.total_real_interactions
    out = []
    for seed, d in _seed_dirs(root, cfg.run.seeds):
        with run_lock(d):
            cfgmod.save_config(cfg, d / "config.txt")
            rng = np.random.default_rng(seed)
            env = make_env(replace(cfg.env, seed=cfg.env.seed + 7919 * seed),
                           cfg.loop.sticky_actions)
            model_cfg = replace(cfg.model, n_actions=env.n_actions)
            buf, held = ReplayBuffer(env.spec), ReplayBuffer(env.spec)
            collect(env, random_policy(env.n_actions), n_data, rng, buf)
            env.reset(cfg.env.seed + 7919 * seed + 1000)
            collect(env, random_policy(env.n_actions), max(200, n_data // 8), rng, held)
            trainer = WorldModelTrainer(build_model(model_cfg, seed), steps, seed)
            trace = trainer.train(buf, steps, rng)
            trainer.save(d / "world_model.bin")
            buf.save(d / "buffer.bin")
            res = {"seed": seed, "run_dir": str(d), "model_steps": steps,
                   "final_loss": trace[-1]["total"],
                   "one_step_accuracy": one_step_accuracy(trainer.model, held),
                   "rollout_accuracy_10": rollout_accuracy(trainer.model, held, 10,
                                                           np_rng=np.random.default_rng(seed))}
            with open(d / "trace.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(trace[0]))
                w.writeheader()
                w.writerows(trace)
            (d / "metrics.json").write_text(json.dumps(res, indent=1, sort_keys=True))
        out.append(res)
    _print(out)


def cmd_finetune(args):
    cfg = _resolve(args)
    root = _run_dir(args, cfg, "finetune")
    out = []
    for seed, d in _seed_dirs(root, cfg.run.seeds):
        with run_lock(d):
            cfgmod.save_config(cfg, d / "config.txt")
            rep = finetune_real(args.checkpoint, cfg.env, None, args.steps, seed,
                                cfg.run.baseline_envs, eval_episodes=cfg.run.eval_episodes,
                                eval_temperature=cfg.run.eval_temperature, run_dir=d)
        out.append({"seed": seed, "tag": rep.tag, "before": rep.iterations[0]["eval_mean"],
                    "after": rep.iterations[-1]["eval_mean"], **rep.counters()})
    _print(out)


def cmd_evaluate(args):
    cfg = _resolve(args)
    env_spec = replace(cfg.env, seed=cfg.env.seed + 100_000)
    if args.checkpoint:
        learner = PPOLearner.load(args.checkpoint)
        scores = evaluate(learner.policy, lambda: make_env(env_spec), args.episodes,
                          args.temperature, seed=cfg.run.seeds[0])
    else:
        rng = np.random.default_rng(cfg.run.seeds[0])
        env = make_env(env_spec)
        scores = [run_episode(env, random_policy(env.n_actions), rng, seed=i)
                  for i in range(args.episodes)]
    st = score_stats(scores)
    _print({"policy": args.checkpoint or "random", "episodes": args.episodes,
            "temperature": args.temperature, "scores": scores, "mean": st.mean, "std": st.std})


def _reports(dirs) -> list[RunReport]:
    found = []
    for d in dirs:
        d = Path(d)
        paths = [d / "report.json"] if (d / "report.json").exists() else sorted(d.glob("*/report.json"))
        if not paths:
            raise FileNotFoundError(f"no report.json under {d}")
        found += [RunReport.load(p.parent) for p in paths]
    return found


def cmd_compare(args):
    simple = _reports(args.simple)
    base = _reports(args.baseline)
    env_names = sorted({r.env for r in simple})
    rows = []
    for name in env_names:
        finals = [np.mean(r.final_scores) for r in simple if r.env == name and r.final_scores]
        runs = [r for r in base if r.env == name]
        if not finals or not runs:
            raise ValueError(f"missing simple or baseline reports for {name}")
        steps = sorted({row["real_steps"] for r in runs for row in r.iterations})
        curve = [(s, float(np.mean([row["eval_mean"] for r in runs for row in r.iterations
                                    if row["real_steps"] == s]))) for s in steps]
        budget = max(r.real_interactions for r in simple if r.env == name)
        if args.random_score is not None:
            rand = args.random_score
        else:
            env = make_env(EnvSpec(name, seed=123_456))
            rng = np.random.default_rng(0)
            rand = float(np.mean([run_episode(env, random_policy(env.n_actions), rng, seed=i)
                                  for i in range(16)]))
        rows += comparison_rows(name, finals, curve, rand, budget)
        rows.append({"env": name, "metric": "random_score", "value": rand})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["env", "metric", "value"])
        w.writeheader()
        w.writerows(rows)
    _print(rows)


def cmd_plot(args):
    from . import plots

    out = Path(args.out)
    written = []
    if args.runs:
        reports = _reports(args.runs)
        curves: dict[str, list] = {}
        for r in reports:
            curves.setdefault(f"{r.tag}:{r.env}", []).append(r.score_curve)
        written.append(plots.score_curves(curves, out / "score_curves.png"))
        simple = [r.score_curve for r in reports if r.tag == "simple" and r.score_curve]
        if simple:
            written.append(plots.best_iteration_plot(simple, out / "best_iteration_cdf.png"))
    if args.compare:
        path = Path(args.compare)
        if not path.exists():
            raise FileNotFoundError(f"comparison table {path} not found")
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        budget = max(float(r["value"]) for r in rows if r["metric"] == "budget")
        written.append(plots.steps_to_match_bars(rows, out / "steps_to_match.png", budget))
    if not written:
        raise UsageError("plot needs --runs and/or --compare")
    _print([str(p) for p in written])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="simplerl", description="Model-based RL on toy pixel games.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-simple", help="full model-based training loop")
    _config_args(s)
    s.add_argument("--dry-run", action="store_true", help="accounting only, no training")
    s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    s.set_defaults(fn=cmd_train_simple)

    s = sub.add_parser("train-ppo-baseline", help="model-free PPO on the real env")
    _config_args(s)
    s.add_argument("--steps", type=int, default=0, help="real interactions (default: loop budget)")
    s.add_argument("--eval-every", type=int, default=0)
    s.set_defaults(fn=cmd_train_ppo_baseline)

    s = sub.add_parser("train-world-model", help="fit a world model on random-policy data")
    _config_args(s)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--interactions", type=int, default=0)
    s.set_defaults(fn=cmd_train_world_model)

    s = sub.add_parser("finetune", help="continue PPO on the real env from a policy")
    _config_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int, default=0)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("evaluate", help="score a policy checkpoint")
    _config_args(s)
    s.add_argument("--checkpoint", help="policy file (omit for the random policy)")
    s.add_argument("--episodes", type=int, default=8)
    s.add_argument("--temperature", type=float, default=0.5)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("compare", help="model-based vs baseline tables")
    s.add_argument("--simple", nargs="+", required=True)
    s.add_argument("--baseline", nargs="+", required=True)
    s.add_argument("--random-score", type=float)
    s.add_argument("--out", default="comparison.csv")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("plot", help="render figures from reports")
    s.add_argument("--runs", nargs="*", default=[])
    s.add_argument("--compare")
    s.add_argument("--out", default="plots")
    s.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
