import numpy as np
import pytest
import torch
from torch import nn

from simplerl.envs import EnvSpec, make_env
from simplerl.ppo import PolicyNet
from simplerl.sim_env import (RolloutLimitError, SimState, dyadic, eligible_positions,
                              no_random_start_mode, random_start, rollout, sim_step)
from simplerl.world_model import ModelConfig, build_model

from conftest import small_buffer

DET = ModelConfig(variant="deterministic")


class ConstantPolicy(nn.Module):
    """Uniform action logits and a fixed value estimate."""

    def __init__(self, value, n_actions=3):
        super().__init__()
        self.value = value
        self.n_actions = n_actions
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, stacks):
        b = stacks.shape[0]
        logits = torch.zeros(b, self.n_actions, dtype=self.dummy.dtype)
        return logits, torch.full((b,), self.value, dtype=self.dummy.dtype)


def _fixed_reward_model(cls: int, seed=0):
    model = build_model(DET, seed=seed)
    with torch.no_grad():
        model.reward_out.params["weight"].zero_()
        bias = torch.zeros(3)
        bias[cls] = 10.0
        model.reward_out.params["bias"].copy_(bias)
    return model


def test_random_start_uniform(pong_buffer):
    positions = eligible_positions(pong_buffer)[:10]
    k = len(positions)
    rng = np.random.default_rng(0)
    counts = np.zeros(k)
    for _ in range(10_000):
        s = random_start(pong_buffer, rng, positions=positions)
        for i, (e, t) in enumerate(positions):
            if np.array_equal(s.memory, pong_buffer.episodes[e].stack_at(t)):
                counts[i] += 1
                break
    p = 1 / k
    sigma = np.sqrt(p * (1 - p) / 10_000)
    assert np.all(np.abs(counts / 10_000 - p) <= 3 * sigma)


def test_first_positions_of_an_episode_are_ineligible(pong_buffer):
    pos = eligible_positions(pong_buffer)
    assert all(t >= 3 for _, t in pos)
    assert (0, 3) in pos and (0, 2) not in pos


def test_random_start_memory_is_real_frames(pong_buffer):
    s = random_start(pong_buffer, np.random.default_rng(3))
    assert s.memory.shape == (4, 24, 16, 3) and s.steps_since_restart == 0
    with pytest.raises(ValueError):
        random_start(small_buffer(n=0), np.random.default_rng(0))


def test_sim_step_limit(pong_buffer):
    model = build_model(DET)
    state = random_start(pong_buffer, np.random.default_rng(0), N=50)
    for i in range(50):
        stack, reward, done = sim_step(state, 0, model)
        assert done == (i == 49)
        assert stack.shape == (4, 24, 16, 3) and reward in (-1, 0, 1)
    with pytest.raises(RolloutLimitError):
        sim_step(state, 0, model)


def test_sim_step_deterministic_and_shifts_memory(pong_buffer):
    model = build_model(DET)
    start = random_start(pong_buffer, np.random.default_rng(0))
    a, b = SimState(start.memory.copy()), SimState(start.memory.copy())
    sa, ra, _ = sim_step(a, 1, model)
    sb, rb, _ = sim_step(b, 1, model)
    assert np.array_equal(sa, sb) and ra == rb
    assert np.array_equal(sa[:3], start.memory[1:])


def test_reward_class_decoding(pong_buffer):
    state = random_start(pong_buffer, np.random.default_rng(0))
    assert sim_step(state, 0, _fixed_reward_model(0))[1] == -1


def test_observation_contract_matches_real_env(pong_buffer):
    env = make_env(EnvSpec("mini_pong"))
    obs = env.reset(seed=0)
    state = random_start(pong_buffer, np.random.default_rng(0))
    stack, r, _ = sim_step(state, 0, build_model(DET))
    assert stack.shape == obs.shape and stack.dtype == obs.dtype


def test_bootstrap_example(pong_buffer):
    batch = rollout(_fixed_reward_model(2), ConstantPolicy(2.0), pong_buffer, n_agents=1, N=2,
                    gamma=0.95, rng=np.random.default_rng(0))
    assert batch.raw_rewards.tolist() == [[1, 1]]
    assert batch.rewards[0, 0] == 1.0
    assert batch.rewards[0, 1] == pytest.approx(2.9, abs=1e-5)
    assert batch.dones.tolist() == [[False, True]]


def test_bootstrap_zero_value_leaves_rewards(pong_buffer):
    batch = rollout(_fixed_reward_model(2), ConstantPolicy(0.0), pong_buffer, n_agents=2, N=3,
                    rng=np.random.default_rng(0))
    assert np.array_equal(batch.rewards, batch.raw_rewards.astype(np.float64))


def test_bootstrap_exact(pong_buffer):
    policy = PolicyNet((4, 24, 16, 3), 3, seed=2)
    for seed in range(3):
        batch = rollout(build_model(DET, seed=seed), policy, pong_buffer, n_agents=4, N=5,
                        rng=np.random.default_rng(seed), exact=False)
        diff = batch.rewards[:, -1] - batch.raw_rewards[:, -1]
        assert np.array_equal(diff, batch.gamma * batch.final_values)
        assert batch.gamma == float(dyadic(0.95))


def test_rollout_size_and_ppo_batch(pong_buffer):
    policy = PolicyNet((4, 24, 16, 3), 3)
    batch = rollout(build_model(DET), policy, pong_buffer, n_agents=16, N=50,
                    rng=np.random.default_rng(0), exact=False)
    assert batch.n_transitions == 800
    assert len(batch.to_ppo_batch()) == 800


def test_batched_equals_sequential(pong_buffer):
    model = build_model(ModelConfig(variant="stochastic_discrete"), seed=1)
    policy = PolicyNet((4, 24, 16, 3), 3, seed=1)
    a = rollout(model, policy, pong_buffer, n_agents=3, N=6, rng=np.random.default_rng(4))
    b = rollout(model, policy, pong_buffer, n_agents=3, N=6, rng=np.random.default_rng(4),
                sequential=True)
    for name in ("stacks", "actions", "raw_rewards", "rewards", "values", "log_probs", "dones",
                 "final_values"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_no_random_start_mode_fixed(pong_buffer):
    a, b = no_random_start_mode(pong_buffer), no_random_start_mode(pong_buffer)
    assert np.array_equal(a.memory, b.memory) and a.rollout_limit == 1000
    assert np.array_equal(a.memory, pong_buffer.episodes[0].stack_at(3))
