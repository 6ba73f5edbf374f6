"""The full training cycle: collect real data, fit the world model, train the
policy inside it, repeat.

Counts in :class:`LoopConfig` are given at full scale and divided by
``scale`` for small runs, so the structure of the schedule (15 iterations,
where the longer PPO phases fall) stays the same at every size.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn as snn
from .envs import FRAME_SKIP, EnvSpec, ReplayBuffer, collect, make_env, random_policy
from .ppo import PPOConfig, PPOLearner, evaluate, real_batch, transitions_batch
from .sim_env import rollout
from .world_model import ModelConfig, WorldModelTrainer, build_model


@dataclass(frozen=True)
class LoopConfig:
    iterations: int = 15
    interactions_per_iter: int = 6400
    initial_collection: int = 6400
    model_steps_first: int = 45_000
    model_steps_rest: int = 15_000
    ppo_epoch_unit: int = 1000
    z_overrides: tuple = ((8, 2), (12, 2))
    z_final: int = 3
    n_agents: int = 16
    rollout_N: int = 50
    gamma: float = 0.95
    random_starts: bool = True
    long_training_multiplier: int = 1
    scale: int = 1
    real_data_ppo: bool = True
    exact_rollouts: bool = False
    sticky_actions: float = 0.0
    eval_episodes: int = 8
    eval_temperature: float = 0.5
    collect_temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "z_overrides",
                           tuple(tuple(int(v) for v in p) for p in self.z_overrides))
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.scale < 1 or self.long_training_multiplier < 1:
            raise ValueError("scale and long_training_multiplier must be at least 1")
        counts = ("interactions_per_iter", "initial_collection", "model_steps_first",
                  "model_steps_rest", "ppo_epoch_unit", "n_agents", "rollout_N", "z_final")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def scaled(self, n: int) -> int:
        return max(1, n // self.scale)

    def z(self, iteration: int) -> int:
        if iteration == self.iterations:
            return self.z_final
        return dict(self.z_overrides).get(iteration, 1)

    @property
    def total_real_interactions(self) -> int:
        return (self.scaled(self.initial_collection)
                + self.iterations * self.scaled(self.interactions_per_iter))


@dataclass(frozen=True)
class IterationPlan:
    iteration: int
    z: int
    model_steps: int
    ppo_epochs: int
    sim_interactions: int
    real_interactions: int


def plan(config: LoopConfig, iteration: int) -> IterationPlan:
    if not 1 <= iteration <= config.iterations:
        raise ValueError(f"iteration {iteration} outside 1..{config.iterations}")
    z = config.z(iteration)
    steps = config.model_steps_first if iteration == 1 else config.model_steps_rest
    model_steps = config.scaled(steps) * config.long_training_multiplier
    epochs = z * config.scaled(config.ppo_epoch_unit)
    return IterationPlan(iteration, z, model_steps, epochs,
                         epochs * config.n_agents * config.rollout_N,
                         config.scaled(config.interactions_per_iter))


class StageError(RuntimeError):
    def __init__(self, iteration: int, stage: str, cause: BaseException):
        super().__init__(f"iteration {iteration}, stage {stage!r}: {cause!r}")
        self.iteration, self.stage = iteration, stage


COUNTERS = ("real_interactions", "sim_interactions", "model_steps", "ppo_updates",
            "real_ppo_updates", "iterations_completed")


@dataclass
class RunReport:
    tag: str
    env: str
    seed: int
    config: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    final_scores: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    real_interactions: int = 0
    sim_interactions: int = 0
    model_steps: int = 0
    ppo_updates: int = 0
    real_ppo_updates: int = 0
    iterations_completed: int = 0

    def counters(self) -> dict:
        return {k: getattr(self, k) for k in COUNTERS}

    def counters_json(self) -> str:
        rows = [{k: r[k] for k in ("iteration", "real_steps", "sim_steps", "model_steps",
                                   "ppo_epochs")} for r in self.iterations]
        return json.dumps({"counters": self.counters(), "iterations": rows}, sort_keys=True)

    @property
    def score_curve(self) -> list[float]:
        return [r["eval_mean"] for r in self.iterations]

    @property
    def real_frames(self) -> int:
        """Real interactions in raw game frames; counters elsewhere are agent steps."""
        return self.real_interactions * FRAME_SKIP

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "real_frames": self.real_frames}, indent=1,
                          sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**{k: v for k, v in data.items() if k != "real_frames"})

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def save(self, run_dir):
        run_dir = Path(run_dir)
        (run_dir / "report.json").write_text(self.to_json())
        lines = ["iteration,real_steps,sim_steps,eval_mean,eval_std"]
        lines += [f"{r['iteration']},{r['real_steps']},{r['sim_steps']},"
                  f"{r['eval_mean']!r},{r['eval_std']!r}" for r in self.iterations]
        (run_dir / "scores.csv").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, run_dir) -> "RunReport":
        return cls.from_json((Path(run_dir) / "report.json").read_text())


def config_snapshot(env_spec, model_cfg, ppo_cfg, loop_cfg) -> dict:
    return {"env": asdict(env_spec), "model": asdict(model_cfg), "ppo": asdict(ppo_cfg),
            "loop": asdict(loop_cfg)}


def _score_stats(scores):
    std = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
    return float(np.mean(scores)), std


# -- checkpoints ------------------------------------------------------------

def _write(path: Path, data: bytes):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt_dir, iteration, trainer, learner, buffer, rng, report):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    state = {"iteration": iteration, "rng": rng.bit_generator.state,
             "report": json.loads(report.to_json())}
    arrays = {"meta/state": snn.text_array(json.dumps(state, sort_keys=True))}
    _write(ckpt_dir / "state.bin", snn.encode_params(arrays))
    if trainer is not None:
        _write(ckpt_dir / "world_model.bin", snn.encode_params(trainer.arrays()))
    _write(ckpt_dir / "policy.bin", snn.encode_params(learner.arrays()))
    _write(ckpt_dir / "buffer.bin", buffer.to_bytes())


def load_checkpoint(ckpt_dir):
    """(iteration, trainer or None, learner, buffer, rng, report) from a checkpoint."""
    ckpt_dir = Path(ckpt_dir)
    state = json.loads(snn.array_text(snn.load_params(ckpt_dir / "state.bin")["meta/state"]))
    wm = ckpt_dir / "world_model.bin"
    trainer = WorldModelTrainer.load(wm) if wm.exists() else None
    learner = PPOLearner.load(ckpt_dir / "policy.bin")
    buffer = ReplayBuffer.load(ckpt_dir / "buffer.bin")
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng"]
    return state["iteration"], trainer, learner, buffer, rng, RunReport.from_dict(state["report"])


def latest_checkpoint(run_dir) -> Path | None:
    found = sorted((Path(run_dir) / "checkpoints").glob("iter_*"))
    found = [p for p in found if (p / "state.bin").exists()]
    return found[-1] if found else None


# -- the loop ----------------------------------------------------------------

def _env_for(spec: EnvSpec, cfg: LoopConfig, offset: int):
    return make_env(replace(spec, seed=spec.seed + offset), cfg.sticky_actions)


def run_simple(env_spec: EnvSpec, model_cfg: ModelConfig, ppo_cfg: PPOConfig,
               loop_cfg: LoopConfig, seed: int = 0, run_dir=None, dry_run: bool = False,
               resume: bool = False, log=None) -> RunReport:
    """Run the whole schedule; with ``dry_run`` only the interaction accounting.

    A dry run still collects the real data (with the untrained policy) but
    skips model training, simulated rollouts and evaluation.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    spec = replace(env_spec, seed=env_spec.seed + 7919 * seed)
    env = _env_for(spec, loop_cfg, 0)
    obs_shape, n_actions = env.observation_shape, env.n_actions
    model_cfg = replace(model_cfg, n_actions=n_actions,
                        frame_height=obs_shape[1], frame_width=obs_shape[2])
    first_steps = plan(loop_cfg, 1).model_steps
    say = log or (lambda msg: None)

    start = 1
    ckpt = latest_checkpoint(run_dir) if (resume and run_dir is not None) else None
    if ckpt is not None:
        done_iter, trainer, learner, buffer, rng, report = load_checkpoint(ckpt)
        start = done_iter + 1
        if trainer is None:
            trainer = WorldModelTrainer(build_model(model_cfg, seed), first_steps, seed)
        say(f"resuming after iteration {done_iter}")
    else:
        rng = np.random.default_rng(seed)
        trainer = WorldModelTrainer(build_model(model_cfg, seed), first_steps, seed)
        learner = PPOLearner(obs_shape, n_actions, ppo_cfg, seed)
        buffer = ReplayBuffer(spec)
        report = RunReport("simple", spec.name, seed,
                           config_snapshot(env_spec, model_cfg, ppo_cfg, loop_cfg))
        t0 = time.perf_counter()
        env.reset(int(rng.integers(2**31)))
        collect(env, random_policy(n_actions), loop_cfg.scaled(loop_cfg.initial_collection),
                rng, buffer)
        report.real_interactions = buffer.total_interactions
        report.wall_clock["initial_collection"] = time.perf_counter() - t0
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / "iter_00", 0, trainer, learner,
                            buffer, rng, report)

    for k in range(start, loop_cfg.iterations + 1):
        p = plan(loop_cfg, k)
        row = {"iteration": k, "z": p.z, "model_steps": 0, "ppo_epochs": 0, "sim_steps": 0,
               "eval_mean": float("nan"), "eval_std": float("nan"), "wall": {}}

        def stage(name, fn):
            t = time.perf_counter()
            try:
                out = fn()
            except Exception as e:  # noqa: BLE001
                raise StageError(k, name, e) from e
            row["wall"][name] = time.perf_counter() - t
            return out

        if not dry_run:
            trace = stage("train_world_model",
                          lambda: trainer.train(buffer, p.model_steps, rng))
            row["model_steps"] = p.model_steps
            row["model_loss"] = trace[-1]["total"] if trace else float("nan")
            report.model_steps += p.model_steps

            def train_rl():
                for _ in range(p.ppo_epochs):
                    batch = rollout(trainer.model, learner.policy, buffer, loop_cfg.n_agents,
                                    loop_cfg.rollout_N, loop_cfg.gamma, rng,
                                    loop_cfg.random_starts, exact=loop_cfg.exact_rollouts)
                    learner.update(batch.to_ppo_batch(ppo_cfg.gae_lambda), rng)
                    row["sim_steps"] += batch.n_transitions

            stage("train_policy", train_rl)
            row["ppo_epochs"] = p.ppo_epochs
            report.ppo_updates += p.ppo_epochs
            report.sim_interactions += row["sim_steps"]

        def gather():
            env.reset(int(rng.integers(2**31)))
            actor = (random_policy(n_actions) if dry_run
                     else learner.actor(loop_cfg.collect_temperature))
            return collect(env, actor, p.real_interactions, rng, buffer)

        transitions = stage("collect", gather)
        report.real_interactions += len(transitions)
        if loop_cfg.real_data_ppo and not dry_run:
            stage("real_ppo", lambda: learner.update(transitions_batch(learner, transitions), rng))
            report.real_ppo_updates += 1

        if not dry_run:
            scores = stage("evaluate", lambda: evaluate(
                learner.policy, lambda: _env_for(spec, loop_cfg, 100_000), loop_cfg.eval_episodes,
                loop_cfg.eval_temperature, seed=seed * 1000 + k))
            row["eval_mean"], row["eval_std"] = _score_stats(scores)
            if k == loop_cfg.iterations:
                report.final_scores = [float(s) for s in scores]
        row["real_steps"] = report.real_interactions
        report.iterations.append(row)
        report.iterations_completed = k
        say(f"iteration {k}: real {report.real_interactions} sim {report.sim_interactions} "
            f"eval {row['eval_mean']:.2f}")
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"iter_{k:02d}", k, trainer, learner,
                            buffer, rng, report)
            report.save(run_dir)
    if run_dir is not None:
        report.save(run_dir)
    return report


# -- real-environment learners ------------------------------------------------

def run_ppo_baseline(env_spec: EnvSpec, ppo_cfg: PPOConfig, n_steps: int, seed: int = 0,
                     n_envs: int = 8, rollout_len: int = 50, eval_every: int | None = None,
                     eval_episodes: int = 8, eval_temperature: float = 0.5,
                     sticky: float = 0.0, run_dir=None) -> RunReport:
    """Model-free PPO on the real environment; the curve feeds steps-to-match."""
    spec = replace(env_spec, seed=env_spec.seed + 7919 * seed)
    probe = make_env(spec)
    learner = PPOLearner(probe.observation_shape, probe.n_actions, ppo_cfg, seed)
    report = RunReport("ppo", spec.name, seed, {"env": asdict(env_spec),
                                                "ppo": asdict(ppo_cfg), "n_steps": n_steps})
    rng = np.random.default_rng(seed)
    envs = [make_env(replace(spec, seed=spec.seed + i), sticky) for i in range(n_envs)]
    eval_every = eval_every or n_steps
    next_eval, t0 = eval_every, time.perf_counter()
    while report.real_interactions < n_steps:
        length = min(rollout_len, -(-(n_steps - report.real_interactions) // n_envs))
        batch, _, _ = real_batch(learner, envs, length, rng)
        report.real_interactions += n_envs * length
        learner.update(batch, rng)
        report.real_ppo_updates += 1
        if report.real_interactions >= next_eval or report.real_interactions >= n_steps:
            scores = evaluate(learner.policy, lambda: make_env(replace(spec, seed=spec.seed + 100_000), sticky),
                              eval_episodes, eval_temperature, seed=seed * 1000 + len(report.iterations))
            mean, std = _score_stats(scores)
            report.iterations.append({"iteration": len(report.iterations) + 1,
                                      "real_steps": report.real_interactions, "sim_steps": 0,
                                      "model_steps": 0, "ppo_epochs": 1,
                                      "eval_mean": mean, "eval_std": std})
            report.final_scores = [float(s) for s in scores]
            next_eval += eval_every
    report.iterations_completed = len(report.iterations)
    report.wall_clock["total"] = time.perf_counter() - t0
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        learner.save(Path(run_dir) / "policy.bin")
        report.save(run_dir)
    return report


def finetune_real(policy_checkpoint, env_spec: EnvSpec, ppo_cfg: PPOConfig | None = None,
                  n_steps: int = 0, seed: int = 0, n_envs: int = 8, rollout_len: int = 50,
                  eval_episodes: int = 8, eval_temperature: float = 0.5,
                  run_dir=None) -> RunReport:
    """Continue PPO on the real environment from a trained policy checkpoint."""
    try:
        learner = PPOLearner.load(policy_checkpoint, ppo_cfg)
    except (ValueError, KeyError) as e:
        raise ValueError(f"incompatible checkpoint {policy_checkpoint}: {e}") from e
    spec = replace(env_spec, seed=env_spec.seed + 7919 * seed)
    probe = make_env(spec)
    if (tuple(learner.policy.obs_shape) != tuple(probe.observation_shape)
            or learner.policy.n_actions != probe.n_actions):
        raise ValueError("incompatible checkpoint: observation shape or action count differs")
    report = RunReport("simple+ppo", spec.name, seed,
                       {"env": asdict(env_spec), "ppo": asdict(learner.config),
                        "n_steps": n_steps, "checkpoint": str(policy_checkpoint)})
    rng = np.random.default_rng(seed)
    eval_factory = lambda: make_env(replace(spec, seed=spec.seed + 100_000))  # noqa: E731

    def record(scores):
        mean, std = _score_stats(scores)
        report.iterations.append({"iteration": len(report.iterations), "sim_steps": 0,
                                  "real_steps": report.real_interactions, "model_steps": 0,
                                  "ppo_epochs": report.real_ppo_updates,
                                  "eval_mean": mean, "eval_std": std})
        report.final_scores = [float(s) for s in scores]

    record(evaluate(learner.policy, eval_factory, eval_episodes, eval_temperature, seed=seed))
    if n_steps > 0:
        envs = [make_env(replace(spec, seed=spec.seed + i)) for i in range(n_envs)]
        while report.real_interactions < n_steps:
            length = min(rollout_len, -(-(n_steps - report.real_interactions) // n_envs))
            batch, _, _ = real_batch(learner, envs, length, rng)
            report.real_interactions += n_envs * length
            learner.update(batch, rng)
            report.real_ppo_updates += 1
        record(evaluate(learner.policy, eval_factory, eval_episodes, eval_temperature, seed=seed))
    report.iterations_completed = len(report.iterations)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        learner.save(Path(run_dir) / "policy.bin")
        report.save(run_dir)
    return report


def loop_config_fields() -> list[str]:
    return [f.name for f in fields(LoopConfig)]
