"""Proximal policy optimisation with a small convolutional actor-critic.

Used both inside the learned simulator and directly on the real environment
(the model-free baseline and the fine-tuning stage).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import nn as snn
from .envs import PixelEnv, Transition, run_episode
from .nn import Layer, LayerSpec
from .world_model import stack_to_input


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs_per_batch: int = 4
    minibatch_size: int = 200
    learning_rate: float = 2.5e-4
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    hidden: int = 128

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")


class PolicyNet(nn.Module):
    """Shared conv torso with a policy-logit head and a scalar value head."""

    def __init__(self, obs_shape, n_actions: int, hidden: int = 128, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stack, h, w, c = obs_shape
        self.obs_shape = tuple(obs_shape)
        self.n_actions = n_actions
        self.conv1 = Layer(LayerSpec("conv2d", stack * c, 16, kernel=4, stride=2), gen)
        self.conv2 = Layer(LayerSpec("conv2d", 16, 32, kernel=4, stride=2), gen)
        flat = 32 * (h // 4) * (w // 4)
        self.fc = Layer(LayerSpec("dense", flat, hidden), gen)
        self.logits = Layer(LayerSpec("dense", hidden, n_actions), gen)
        self.value = Layer(LayerSpec("dense", hidden, 1), gen)
        with torch.no_grad():
            self.logits.params["weight"].mul_(0.01)

    def forward(self, stacks: Tensor):
        x = stack_to_input(stacks, self.fc.params["weight"].dtype)
        x = torch.relu(self.conv2(torch.relu(self.conv1(x))))
        x = torch.relu(self.fc(x.flatten(1)))
        return self.logits(x), self.value(x).squeeze(-1)


def policy_forward(policy: PolicyNet, stack):
    """(logits, value) for one stack [4, H, W, 3] or a batch of them."""
    s = torch.as_tensor(np.asarray(stack))
    single = s.dim() == 4
    with torch.no_grad():
        logits, value = policy(s[None] if single else s)
    if single:
        return logits[0], value[0]
    return logits, value


def eval_policy(logits, T: float = 1.0) -> np.ndarray:
    """softmax(logits / T); T = 0 gives the argmax one-hot, ties to the lowest index."""
    if T < 0:
        raise ValueError("temperature must be non-negative")
    z = np.asarray(logits, dtype=np.float64)
    if T == 0:
        out = np.zeros_like(z)
        np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
        return out
    z = z / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_from(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw with a supplied uniform, so batched and per-agent draws agree."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


class PolicyActor:
    """Callable policy for :func:`simplerl.envs.collect`."""

    def __init__(self, policy: PolicyNet, temperature: float = 1.0):
        self.policy, self.temperature = policy, temperature

    def __call__(self, stack, rng: np.random.Generator) -> int:
        logits, _ = policy_forward(self.policy, stack)
        return sample_from(eval_policy(logits.numpy(), self.temperature), rng.random())


def gae(rewards, values, bootstrap_value=0.0, gamma=0.95, lam=0.95, dones=None) -> np.ndarray:
    """Generalised advantage estimates along the last axis.

    ``dones[t]`` marks that the episode ended after step t, cutting both the
    bootstrap and the advantage recursion.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    nxt = np.asarray(bootstrap_value, dtype=np.float64)
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[:-1])
    for t in reversed(range(r.shape[-1])):
        alive = 1.0 - d[..., t]
        delta = r[..., t] + gamma * nxt * alive - v[..., t]
        last = delta + gamma * lam * alive * last
        adv[..., t] = last
        nxt = v[..., t]
    return adv


@dataclass
class PPOBatch:
    stacks: Tensor  # uint8 [B, 4, H, W, 3]
    actions: Tensor
    old_log_probs: Tensor
    old_values: Tensor
    advantages: Tensor
    returns: Tensor

    def __len__(self):
        return len(self.actions)

    @classmethod
    def cat(cls, batches):
        return cls(*[torch.cat([getattr(b, f) for b in batches])
                     for f in ("stacks", "actions", "old_log_probs", "old_values",
                               "advantages", "returns")])


def ppo_loss(policy: PolicyNet, batch: PPOBatch, config: PPOConfig):
    """Clipped surrogate + value loss - entropy bonus, with diagnostics."""
    logits, values = policy(batch.stacks)
    logp_all = torch.log_softmax(logits, dim=-1)
    logp = logp_all.gather(1, batch.actions[:, None]).squeeze(1)
    ratio = torch.exp(logp - batch.old_log_probs)
    adv = batch.advantages
    eps = config.clip_epsilon
    surrogate = torch.min(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)
    policy_loss = -surrogate.mean()
    value_loss = 0.5 * ((values - batch.returns) ** 2).mean()
    entropy = -(logp_all.exp() * logp_all).sum(-1).mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    with torch.no_grad():
        stats = {
            "surrogate": float(surrogate.mean()),
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "clip_fraction": float(((ratio - 1).abs() > eps).float().mean()),
            "approx_kl": float((batch.old_log_probs - logp).mean()),
        }
    return loss, stats


class PPOLearner:
    def __init__(self, obs_shape, n_actions: int, config: PPOConfig = PPOConfig(), seed: int = 0):
        self.config = config
        self.policy = PolicyNet(obs_shape, n_actions, config.hidden, seed)
        self.opt = torch.optim.Adam(self.policy.parameters(), lr=config.learning_rate, eps=1e-5)
        self.updates = 0

    def actor(self, temperature: float = 1.0) -> PolicyActor:
        return PolicyActor(self.policy, temperature)

    def update(self, batch: PPOBatch, rng: np.random.Generator) -> dict:
        return ppo_update(self, batch, self.config, rng)

    # -- persistence
    def arrays(self) -> dict[str, np.ndarray]:
        meta = {"kind": "policy", "obs_shape": list(self.policy.obs_shape),
                "n_actions": self.policy.n_actions, "ppo": asdict(self.config)}
        out = {"meta/policy": snn.text_array(json.dumps(meta, sort_keys=True)),
               "meta/updates": np.array([self.updates], dtype=np.int64)}
        out.update(snn.module_arrays(self.policy, "policy/"))
        out.update(snn.optimizer_arrays(self.opt, "optim/"))
        return out

    @classmethod
    def from_arrays(cls, arrays, config: PPOConfig | None = None) -> "PPOLearner":
        if "meta/policy" not in arrays:
            raise ValueError("not a policy checkpoint")
        meta = json.loads(snn.array_text(arrays["meta/policy"]))
        learner = cls(tuple(meta["obs_shape"]), meta["n_actions"],
                      config or PPOConfig(**meta["ppo"]))
        snn.load_module_arrays(learner.policy, arrays, "policy/")
        if config is None:
            snn.load_optimizer_arrays(learner.opt, arrays, "optim/")
        learner.updates = int(arrays["meta/updates"][0])
        return learner

    def save(self, path):
        snn.save_params(path, self.arrays())

    @classmethod
    def load(cls, path, config: PPOConfig | None = None) -> "PPOLearner":
        return cls.from_arrays(snn.load_params(path), config)


def ppo_update(learner: PPOLearner, batch: PPOBatch, config: PPOConfig | None = None,
               rng: np.random.Generator | None = None) -> dict:
    """Several epochs of minibatch Adam steps on the clipped PPO objective."""
    cfg = config or learner.config
    rng = rng if rng is not None else np.random.default_rng(0)
    adv = batch.advantages
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    batch = PPOBatch(batch.stacks, batch.actions, batch.old_log_probs, batch.old_values,
                     adv, batch.returns)
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    history = []
    for _ in range(cfg.epochs_per_batch):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            sub = PPOBatch(*(getattr(batch, f)[idx] for f in (
                "stacks", "actions", "old_log_probs", "old_values", "advantages", "returns")))
            loss, stats = ppo_loss(learner.policy, sub, cfg)
            learner.opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(learner.policy.parameters(), cfg.max_grad_norm)
            learner.opt.step()
            history.append(stats)
    learner.updates += 1
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]} if history else {}


# -- real-environment training --------------------------------------------

def _episode_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


def real_batch(learner: PPOLearner, envs: list[PixelEnv], rollout_len: int,
               rng: np.random.Generator, cfg: PPOConfig | None = None):
    """Step every env ``rollout_len`` times with the current policy.

    Returns the PPO batch, the transitions (per env, in order) and the
    scores of episodes that finished during the rollout.
    """
    cfg = cfg or learner.config
    n = len(envs)
    stacks, actions, logps, values, rewards, dones = [], [], [], [], [], []
    transitions: list[list[Transition]] = [[] for _ in envs]
    finished = []
    scores = np.zeros(n)
    for env in envs:
        if env.done:
            env.reset(_episode_seed(rng))
    for _ in range(rollout_len):
        s = np.stack([env.stack for env in envs])
        logits, v = policy_forward(learner.policy, s)
        probs = eval_policy(logits.numpy())
        acts = [sample_from(p, rng.random()) for p in probs]
        logp = torch.log_softmax(logits, -1)[torch.arange(n), torch.as_tensor(acts)]
        step_r, step_d = [], []
        for i, env in enumerate(envs):
            first = env.fresh
            nxt, r, d = env.step(acts[i])
            scores[i] += r
            transitions[i].append(Transition(s[i], acts[i], r, nxt[-1].copy(), d, first=first))
            step_r.append(r)
            step_d.append(d)
            if d:
                finished.append(float(scores[i]))
                scores[i] = 0.0
                env.reset(_episode_seed(rng))
        stacks.append(torch.from_numpy(s))
        actions.append(acts)
        logps.append(logp)
        values.append(v)
        rewards.append(step_r)
        dones.append(step_d)
    _, last_v = policy_forward(learner.policy, np.stack([env.stack for env in envs]))
    rew = np.asarray(rewards, dtype=np.float64).T  # [n_envs, T]
    val = torch.stack(values).T.numpy().astype(np.float64)
    don = np.asarray(dones, dtype=np.float64).T
    adv = gae(rew, val, last_v.numpy().astype(np.float64), cfg.gamma, cfg.gae_lambda, don)
    batch = PPOBatch(
        stacks=torch.stack(stacks, 1).flatten(0, 1),
        actions=torch.as_tensor(actions, dtype=torch.long).T.flatten(),
        old_log_probs=torch.stack(logps).T.flatten(),
        old_values=torch.stack(values).T.flatten(),
        advantages=torch.from_numpy(adv).float().flatten(),
        returns=torch.from_numpy(adv + val).float().flatten(),
    )
    return batch, transitions, finished


def transitions_batch(learner: PPOLearner, transitions: list[Transition],
                      cfg: PPOConfig | None = None) -> PPOBatch:
    """PPO batch from already-collected real transitions (one contiguous stream)."""
    cfg = cfg or learner.config
    s = torch.from_numpy(np.stack([t.stack for t in transitions]))
    a = torch.as_tensor([t.action for t in transitions], dtype=torch.long)
    with torch.no_grad():
        logits, v = learner.policy(s)
        last = np.concatenate([transitions[-1].stack[1:], transitions[-1].next_frame[None]])
        _, last_v = learner.policy(torch.from_numpy(last)[None])
    logp = torch.log_softmax(logits, -1).gather(1, a[:, None]).squeeze(1)
    rew = np.asarray([t.reward for t in transitions], dtype=np.float64)
    don = np.asarray([t.done for t in transitions], dtype=np.float64)
    # a stream can also break where a new episode starts without a terminal flag
    brk = np.asarray([t.first for t in transitions[1:]] + [False], dtype=np.float64)
    val = v.numpy().astype(np.float64)
    adv = gae(rew, val, float(last_v[0]), cfg.gamma, cfg.gae_lambda, np.maximum(don, brk))
    return PPOBatch(s, a, logp, v, torch.from_numpy(adv).float(),
                    torch.from_numpy(adv + val).float())


def evaluate(policy: PolicyNet, env_factory, episodes: int = 8, temperature: float = 0.5,
             seed: int = 0) -> list[float]:
    """Scores of ``episodes`` real episodes sampled from softmax(logits / T)."""
    rng = np.random.default_rng(seed)
    actor = PolicyActor(policy, temperature)
    env = env_factory()
    return [run_episode(env, actor, rng, seed=int(seed * 1000 + i)) for i in range(episodes)]


def train_ppo_real(learner: PPOLearner, env_factory, n_steps: int, n_envs: int = 8,
                   rollout_len: int = 50, seed: int = 0, eval_every: int | None = None,
                   eval_episodes: int = 8, eval_temperature: float = 0.5):
    """Model-free PPO on the real environment for ``n_steps`` agent steps.

    Returns a curve of (real_steps, eval mean, eval std) points.
    """
    rng = np.random.default_rng(seed)
    envs = [env_factory(i) for i in range(n_envs)]
    steps = 0
    curve = []
    next_eval = eval_every
    while steps < n_steps:
        length = min(rollout_len, -(-(n_steps - steps) // n_envs))
        batch, _, _ = real_batch(learner, envs, length, rng)
        steps += n_envs * length
        learner.update(batch, rng)
        if next_eval is not None and (steps >= next_eval or steps >= n_steps):
            scores = evaluate(learner.policy, lambda: env_factory(10_000), eval_episodes,
                              eval_temperature, seed=seed + steps)
            curve.append((steps, float(np.mean(scores)), float(np.std(scores, ddof=1))))
            next_eval += eval_every
    return curve, steps
