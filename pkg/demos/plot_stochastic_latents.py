"""
Discrete latent bits for hidden randomness
==========================================

In mini_cross, cars enter from a hidden random stream. A deterministic model
can only blur over the possibilities. The stochastic model infers a 32-bit
code from the true next frame during training. A small recurrent network
learns to sample that code autoregressively, 8 bits at a time, so that
simulation needs no future frame.
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
                                  heldout_pixel_ce, predict_bits, predict_next)

STEPS = int(os.environ.get("DEMO_STEPS", 1200))
out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)


def experience(seed, n):
    spec = EnvSpec("mini_cross", seed=seed, episode_cap=800)
    buf = ReplayBuffer(spec)
    collect(make_env(spec), random_policy(3), n, np.random.default_rng(seed), buf)
    return buf


train, held_out = experience(0, 3200), experience(1000, 400)

# %%
# Same budget for both variants.
models = {}
for variant in ("deterministic", "stochastic_discrete"):
    m = build_model(ModelConfig(variant=variant, learning_rate=1e-3), seed=0)
    WorldModelTrainer(m, STEPS, seed=0).train(train, STEPS, np.random.default_rng(0))
    models[variant] = m

print(f"held-out pixel CE, deterministic {heldout_pixel_ce(models['deterministic'], held_out):.4f}")
sd = models["stochastic_discrete"]
print(f"held-out pixel CE, stochastic with inferred bits {heldout_pixel_ce(sd, held_out):.4f}")
print("held-out pixel CE, stochastic with sampled bits "
      f"{heldout_pixel_ce(sd, held_out, bits='predicted', rng=torch.Generator().manual_seed(0)):.4f}")

# %%
# Different samples from the bit predictor give different futures from the
# same observation.
stack = held_out.episodes[0].stack_at(10)
g = torch.Generator().manual_seed(0)
fig, axes = plt.subplots(1, 5, figsize=(8, 3))
axes[0].imshow(stack[-1])
axes[0].set_title("now")
for k in range(1, 5):
    bits = predict_bits(sd, stack, 0, g)
    logits, _ = predict_next(sd, stack, 0, bits.numpy())
    axes[k].imshow(decode_frames(logits[None])[0].numpy())
    axes[k].set_title("".join(str(int(b)) for b in bits[:8]))
for ax in axes:
    ax.axis("off")
fig.savefig(out / "sampled_futures.png", dpi=100)
