"""
The pixel games and the real-data buffer
========================================

Both games render 48x32 RGB frames. The wrapper repeats every action for four
raw frames and clips the summed reward to {-1, 0, +1}. The agent observes the
last four frames at half resolution.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from simplerl.envs import EnvSpec, ReplayBuffer, apply_sticky, collect, make_env, random_policy

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

# %%
# One observation is a stack of four 24x16 frames, oldest first. Right after a
# reset the first frame is repeated four times.
env = make_env(EnvSpec("mini_pong", seed=0))
obs = env.reset(seed=0)
print("observation", obs.shape, obs.dtype, "actions", env.n_actions)

rng = np.random.default_rng(0)
for _ in range(12):
    obs, reward, done = env.step(int(rng.integers(env.n_actions)))

fig, axes = plt.subplots(2, 4, figsize=(8, 5))
for j in range(4):
    axes[0, j].imshow(obs[j])
    axes[0, j].set_title(f"pong t-{3 - j}")
cross = make_env(EnvSpec("mini_cross", seed=0))
cobs = cross.reset(seed=0)
for _ in range(30):
    cobs, _, _ = cross.step(1)
for j in range(4):
    axes[1, j].imshow(cobs[j])
    axes[1, j].set_title(f"cross t-{3 - j}")
for ax in axes.ravel():
    ax.axis("off")
fig.savefig(out / "pixel_games.png", dpi=100)

# %%
# Sticky actions: with probability p the previously executed action runs
# instead of the requested one.
sticky = apply_sticky(make_env(EnvSpec("mini_pong", seed=1)), 0.25, seed=1)
sticky.reset(seed=1)
for _ in range(2000):
    if sticky.done:
        sticky.reset(seed=int(rng.integers(2**31)))
    sticky.step(int(rng.integers(3)))
print(f"repeat rate {sticky.repeats / sticky.steps:.3f}")

# %%
# Random-policy experience goes into a replay buffer, which round-trips
# byte-exactly through its file format.
buf = ReplayBuffer(env.spec)
collect(env, random_policy(env.n_actions), 400, rng, buf)
path = out / "buffer.bin"
buf.save(path)
again = ReplayBuffer.load(path)
print(len(buf.episodes), "episodes,", buf.total_interactions, "steps, identical:",
      again.to_bytes() == buf.to_bytes())
