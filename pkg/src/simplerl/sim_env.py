"""The learned world model used as an environment.

Rollouts start from real states sampled out of the replay buffer, run for at
most ``N`` simulated steps, and have the policy's value estimate of the final
state added to the last reward.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .envs import STACK, ReplayBuffer
from .ppo import PolicyNet, PPOBatch, eval_policy, gae, sample_from
from .world_model import WorldModel, class_to_reward

# bootstrap arithmetic runs on a dyadic grid so that
# (raw + gamma * value) - raw == gamma * value holds exactly in float64
DYADIC_BITS = 20


def dyadic(x, bits: int = DYADIC_BITS):
    scale = float(2 ** bits)
    return np.round(np.asarray(x, dtype=np.float64) * scale) / scale


class RolloutLimitError(RuntimeError):
    pass


@dataclass
class SimState:
    memory: np.ndarray  # [4, H, W, 3] uint8
    steps_since_restart: int = 0
    rollout_limit: int = 50


def eligible_positions(buffer: ReplayBuffer) -> list[tuple[int, int]]:
    """States with four real frames of history from which a real action was taken."""
    return buffer.positions(min_history=STACK - 1)


def random_start(buffer: ReplayBuffer, rng: np.random.Generator, N: int = 50,
                 positions=None) -> SimState:
    positions = positions if positions is not None else eligible_positions(buffer)
    if not positions:
        raise ValueError("buffer holds no state with a full four-frame history")
    e, t = positions[int(rng.integers(len(positions)))]
    return SimState(buffer.episodes[e].stack_at(t).copy(), 0, N)


def no_random_start_mode(buffer: ReplayBuffer, N: int = 1000) -> SimState:
    """Always the first full stack of the first episode."""
    for ep in buffer.episodes:
        if len(ep) >= STACK:
            return SimState(ep.stack_at(STACK - 1).copy(), 0, N)
    raise ValueError("buffer holds no episode with a full four-frame history")


@torch.no_grad()
def model_step(model: WorldModel, stacks: np.ndarray, actions, rng=None):
    """One simulated step for a batch of stacks; returns (next stacks, rewards)."""
    s = torch.from_numpy(np.ascontiguousarray(stacks))
    a = torch.as_tensor(np.asarray(actions), dtype=torch.long)
    was = model.training
    if was:  # switching modes walks every submodule, so skip it when already in eval
        model.eval()
    bottleneck, skips = model.encode(s)
    bits = model.sample_bits(bottleneck, a, rng) if model.config.stochastic else None
    frames, reward_logits = model.decode_frames(bottleneck, skips, a, bits)
    if was:
        model.train()
    frames = frames.numpy()
    rewards = np.array([class_to_reward(c) for c in reward_logits.argmax(-1)], dtype=np.int64)
    nxt = np.concatenate([stacks[:, 1:], frames[:, None]], axis=1)
    return nxt, rewards


def sim_step(state: SimState, action: int, model: WorldModel,
             rng: np.random.Generator | None = None):
    """Advance ``state`` in place; returns (stack, reward, rollout_done)."""
    if state.steps_since_restart >= state.rollout_limit:
        raise RolloutLimitError("rollout limit reached; restart from a real state")
    rngs = [rng if rng is not None else np.random.default_rng(0)]
    nxt, rewards = model_step(model, state.memory[None], [action], rngs)
    state.memory = nxt[0]
    state.steps_since_restart += 1
    return nxt[0].copy(), int(rewards[0]), state.steps_since_restart >= state.rollout_limit


@dataclass
class RolloutBatch:
    stacks: np.ndarray  # [A, N, 4, H, W, 3]
    actions: np.ndarray  # [A, N]
    raw_rewards: np.ndarray  # [A, N] in {-1, 0, 1}
    rewards: np.ndarray  # [A, N] float64, last step bootstrapped
    values: np.ndarray  # [A, N]
    log_probs: np.ndarray  # [A, N]
    dones: np.ndarray  # [A, N] bool; True only on the rollout's last step
    final_values: np.ndarray  # [A], value estimate of the post-rollout state (dyadic)
    gamma: float  # dyadic discount actually used for the bootstrap

    @property
    def n_transitions(self) -> int:
        return self.actions.size

    def to_ppo_batch(self, lam: float = 0.95) -> PPOBatch:
        # the last reward already carries gamma * V(s_{N+1}), so no further bootstrap
        adv = gae(self.rewards, self.values, 0.0, self.gamma, lam)
        ret = adv + self.values
        return PPOBatch(
            stacks=torch.from_numpy(self.stacks.reshape(-1, *self.stacks.shape[2:])),
            actions=torch.from_numpy(self.actions.reshape(-1)).long(),
            old_log_probs=torch.from_numpy(self.log_probs.reshape(-1)).float(),
            old_values=torch.from_numpy(self.values.reshape(-1)).float(),
            advantages=torch.from_numpy(adv.reshape(-1)).float(),
            returns=torch.from_numpy(ret.reshape(-1)).float(),
        )


def _f32(x):
    # recorded at float32 precision: absorbs last-bit float64 noise between batch sizes
    return np.asarray(x).astype(np.float32).astype(np.float64)


def _run_agents(model, policy, starts, rngs, N):
    n = len(starts)
    stacks = np.stack(starts)
    rec_s, rec_a, rec_r, rec_v, rec_lp = [], [], [], [], []
    for _ in range(N):
        with torch.no_grad():
            logits, values = policy(torch.from_numpy(stacks))
        probs = eval_policy(logits.numpy())
        acts = np.array([sample_from(probs[i], rngs[i].random()) for i in range(n)])
        logp = torch.log_softmax(logits, -1).numpy()[np.arange(n), acts]
        rec_s.append(stacks)
        rec_a.append(acts)
        rec_v.append(_f32(values.numpy()))
        rec_lp.append(_f32(logp))
        stacks, rewards = model_step(model, stacks, acts, rngs)
        rec_r.append(rewards)
    with torch.no_grad():
        _, final = policy(torch.from_numpy(stacks))
    stack = lambda xs: np.stack(xs, axis=1)  # noqa: E731
    return (stack(rec_s), stack(rec_a), stack(rec_r), stack(rec_v), stack(rec_lp),
            _f32(final.numpy()))


def _agents(model, policy, starts, rngs, N, sequential):
    if not sequential:
        return _run_agents(model, policy, starts, rngs, N)
    parts = [_run_agents(model, policy, [st], [g], N) for st, g in zip(starts, rngs)]
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(6))


def rollout(model: WorldModel, policy: PolicyNet, buffer: ReplayBuffer, n_agents: int = 16,
            N: int = 50, gamma: float = 0.95, rng: np.random.Generator | None = None,
            random_starts: bool = True, sequential: bool = False,
            exact: bool = True) -> RolloutBatch:
    """``n_agents`` bounded rollouts of ``N`` steps inside the world model.

    Every agent draws from its own random stream (seeded from ``rng``). With
    ``exact`` the networks run on float64 copies, whose per-row results do not
    depend on batch size, so the batched and ``sequential`` paths agree bit for
    bit. In float32 the argmax decoding can flip on near-ties between the two.
    """
    if n_agents < 1 or N < 1:
        raise ValueError("n_agents and N must be at least 1")
    if exact:
        model = copy.deepcopy(model).double()
        policy = copy.deepcopy(policy).double()
    rng = rng if rng is not None else np.random.default_rng(0)
    rngs = [np.random.default_rng(s) for s in rng.integers(2**63, size=n_agents)]
    if random_starts:
        positions = eligible_positions(buffer)
        starts = [random_start(buffer, g, N, positions).memory for g in rngs]
    else:
        starts = [no_random_start_mode(buffer, N).memory for _ in rngs]
    was = model.training
    model.eval()
    try:
        s, a, r, v, lp, fv = _agents(model, policy, starts, rngs, N, sequential)
    finally:
        model.train(was)
    g = float(dyadic(gamma))
    fv = dyadic(fv)
    rewards = r.astype(np.float64)
    rewards[:, -1] = rewards[:, -1] + g * fv
    dones = np.zeros_like(a, dtype=bool)
    dones[:, -1] = True
    return RolloutBatch(s, a, r, rewards, v, lp, dones, fv, g)
