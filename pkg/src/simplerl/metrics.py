"""Score summaries and the comparisons built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

BEYOND_HORIZON = "beyond-horizon"


@dataclass(frozen=True)
class ScoreStats:
    mean: float
    std: float
    median: float
    max: float
    n: int


def score_stats(scores: Sequence[float]) -> ScoreStats:
    """Mean, sample std (0 for a single run), median and max."""
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("score_stats needs at least one score")
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return ScoreStats(float(x.mean()), std, float(np.median(x)), float(x.max()), int(x.size))


def normalized_fraction(score: float, baseline: float, random: float) -> float | None:
    """(score - random) / (baseline - random).

    When the denominator is negative both terms are shifted up by one. A
    denominator of exactly zero after that gives ``None`` (undefined).
    """
    num, den = score - random, baseline - random
    if den < 0:
        num, den = num + 1.0, den + 1.0
    if den == 0:
        return None
    return num / den


def _check_curve(curve):
    pts = [(float(s), float(v)) for s, v in curve]
    if not pts:
        raise ValueError("curve is empty")
    steps = [s for s, _ in pts]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("curve steps must be strictly increasing")
    return pts


def steps_to_match(curve, target: float):
    """First step count at which the linearly interpolated curve reaches ``target``.

    A target at or below the first point returns the first point's steps;
    a target the curve never reaches returns :data:`BEYOND_HORIZON`.
    """
    pts = _check_curve(curve)
    if pts[0][1] >= target:
        return pts[0][0]
    for (s0, v0), (s1, v1) in zip(pts, pts[1:]):
        if v0 < target <= v1:
            return s0 + (target - v0) / (v1 - v0) * (s1 - s0)
    return BEYOND_HORIZON


def best_iteration(curve: Sequence[float]) -> int:
    """1-based index of the first maximum."""
    if len(curve) == 0:
        raise ValueError("curve is empty")
    return int(np.argmax(np.asarray(curve, dtype=np.float64))) + 1


def best_iteration_cdf(curves: Sequence[Sequence[float]]) -> list[tuple[int, float]]:
    """Empirical CDF over runs of the iteration where each run first peaks."""
    if len(curves) == 0:
        raise ValueError("need at least one curve")
    best = np.array([best_iteration(c) for c in curves])
    return [(int(k), float(np.mean(best <= k))) for k in np.unique(best)]


# -- reward-sequence accuracy -------------------------------------------------

@dataclass(frozen=True)
class SequenceStart:
    """A real state reached by resetting with ``seed`` and playing ``prefix``,
    followed by the ``actions`` whose total reward is compared."""

    seed: int
    prefix: tuple
    actions: tuple


def replay_to_start(env, start: SequenceStart):
    env.reset(start.seed)
    for a in start.prefix:
        if env.done:
            raise ValueError("episode ended inside the prefix")
        env.step(a)
    return env.stack.copy()


def true_total(env, start: SequenceStart) -> tuple[float, int]:
    """Total real reward over ``start.actions`` and the number of steps executed."""
    replay_to_start(env, start)
    total, n = 0.0, 0
    for a in start.actions:
        if env.done:
            break
        _, r, _ = env.step(a)
        total += r
        n += 1
    return total, n


def world_model_total(model, stack: np.ndarray, actions, rng=None) -> float:
    """Total reward the world model predicts while playing ``actions`` from ``stack``."""
    from .sim_env import model_step

    rngs = [rng if rng is not None else np.random.default_rng(0)]
    stacks, total = stack[None], 0.0
    for a in actions:
        stacks, r = model_step(model, stacks, [a], rngs)
        total += float(r[0])
    return total


def reward_sequence_accuracy(model, env, starts: Sequence[SequenceStart], horizon: int,
                             rng=None) -> float:
    """Fraction of sequences on which the model's total reward equals the real one.

    ``model`` is a world model or any callable ``(env, start, n_steps) -> total``.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if len(starts) == 0:
        raise ValueError("need at least one sequence")
    hits = 0
    for s in starts:
        if len(s.actions) != horizon:
            raise ValueError(f"sequence length {len(s.actions)} != horizon {horizon}")
        truth, n = true_total(env, s)
        if isinstance(model, torch.nn.Module):
            pred = world_model_total(model, replay_to_start(env, s), s.actions[:n], rng)
        else:
            pred = model(env, s, n)
        hits += int(pred == truth)
    return hits / len(starts)


def true_env_simulator(env, start: SequenceStart, n_steps: int) -> float:
    """The real environment used as its own model."""
    return true_total(env, SequenceStart(start.seed, start.prefix, start.actions[:n_steps]))[0]


def sample_sequence_starts(env, n: int, horizon: int, rng: np.random.Generator,
                           policy: Callable | None = None, max_prefix: int = 40,
                           repeat_p: float = 0.5) -> list[SequenceStart]:
    """Starts from a perturbed random policy that repeats its last action with
    probability ``repeat_p``; only starts whose prefix stays inside one episode."""
    out = []
    while len(out) < n:
        seed = int(rng.integers(2**31))
        prefix_len = int(rng.integers(3, max_prefix + 1))
        acts, last = [], int(rng.integers(env.n_actions))
        for _ in range(prefix_len + horizon):
            if policy is not None:
                last = int(policy(rng))
            elif rng.random() >= repeat_p:
                last = int(rng.integers(env.n_actions))
            acts.append(last)
        start = SequenceStart(seed, tuple(acts[:prefix_len]), tuple(acts[prefix_len:]))
        try:
            replay_to_start(env, start)
        except ValueError:
            continue
        out.append(start)
    return out


def comparison_rows(env_name: str, simple_scores, baseline_curve, random_score: float,
                    budget: int) -> list[dict]:
    """One row per metric comparing a model-based run with a baseline curve."""
    stats = score_stats(simple_scores)
    base_at_budget = float(np.interp(budget, [s for s, _ in baseline_curve],
                                     [v for _, v in baseline_curve]))
    frac = normalized_fraction(stats.mean, base_at_budget, random_score)
    match = steps_to_match(baseline_curve, stats.mean)
    rows = [
        {"env": env_name, "metric": "simple_mean", "value": stats.mean},
        {"env": env_name, "metric": "simple_std", "value": stats.std},
        {"env": env_name, "metric": "simple_median", "value": stats.median},
        {"env": env_name, "metric": "baseline_at_budget", "value": base_at_budget},
        {"env": env_name, "metric": "normalized_fraction",
         "value": "undefined" if frac is None else frac},
        {"env": env_name, "metric": "steps_to_match", "value": match},
        {"env": env_name, "metric": "budget", "value": budget},
    ]
    for r in rows:
        if isinstance(r["value"], float) and math.isnan(r["value"]):
            r["value"] = "nan"
    return rows
