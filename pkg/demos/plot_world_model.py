"""
Learning to predict mini_pong
=============================

A deterministic convolutional model predicts the next frame as a 256-way
softmax per pixel and channel, plus a 3-way reward. mini_pong has no hidden
randomness, so after a few thousand steps the model predicts whole rollouts
pixel-exactly.
"""

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from simplerl.envs import EnvSpec, ReplayBuffer, collect, make_env, random_policy
from simplerl.world_model import (ModelConfig, WorldModelTrainer, build_model, decode_frames,
                                  one_step_accuracy, parameter_count, rollout_accuracy)

STEPS = int(os.environ.get("DEMO_STEPS", 2000))
out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)


def experience(seed, n):
    spec = EnvSpec("mini_pong", seed=seed)
    buf = ReplayBuffer(spec)
    collect(make_env(spec), random_policy(3), n, np.random.default_rng(seed), buf)
    return buf


train, held_out = experience(0, 3200), experience(1000, 400)

# %%
# Train. The loss is clipped per pixel at 0.03 nats, so pixels that are
# already predicted with more than 97% confidence stop contributing gradient.
model = build_model(ModelConfig(variant="deterministic", learning_rate=1e-3), seed=0)
print("parameters:", parameter_count(model))
trainer = WorldModelTrainer(model, first_iter_steps=STEPS, seed=0)
trace = trainer.train(train, STEPS, rng)

fig, ax = plt.subplots(figsize=(5, 3))
ax.semilogy([r["pixel"] for r in trace], label="pixel")
ax.semilogy([r["reward"] + 1e-6 for r in trace], label="reward")
ax.set_xlabel("step")
ax.legend()
fig.savefig(out / "world_model_loss.png", dpi=100)

# %%
# Held-out accuracy: one-step predictions from real context, and ten-step
# self-rollouts driven by the recorded actions.
print(f"one-step pixel accuracy {one_step_accuracy(model, held_out):.4f}")
print(f"10-step rollout accuracy {rollout_accuracy(model, held_out, 10, max_starts=100):.4f}")

# %%
# Roll the model forward on its own predictions and compare with reality.
ep = held_out.episodes[0]
stack = torch.from_numpy(ep.stack_at(3)[None])
frames = ep.frame_array()
fig, axes = plt.subplots(2, 8, figsize=(10, 3))
model.eval()
with torch.no_grad():
    for k in range(8):
        bott, skips = model.encode(stack)
        logits, _ = model.decode(bott, skips, torch.tensor([ep.actions[3 + k]]))
        nxt = decode_frames(logits)
        stack = torch.cat([stack[:, 1:], nxt[:, None]], dim=1)
        axes[0, k].imshow(frames[4 + k])
        axes[1, k].imshow(nxt[0].numpy())
        axes[0, k].axis("off")
        axes[1, k].axis("off")
axes[0, 0].set_title("real", loc="left")
axes[1, 0].set_title("model", loc="left")
fig.savefig(out / "world_model_rollout.png", dpi=100)
