"""Model-based reinforcement learning on small pixel games.

A video-prediction world model is fitted to real experience, a PPO policy is
trained inside it, and the improved policy gathers the next batch of real
data.

Modules
-------
nn            layer primitives, gradient checking, the binary parameter container
envs          mini_pong / mini_cross pixel games, wrappers, replay buffer
world_model   action-conditioned frame and reward predictor
sim_env       the world model as an environment, batched rollouts
ppo           policy network, GAE, clipped PPO updates
simple_loop   the collect / fit model / train policy cycle and its checkpoints
metrics       score statistics and baseline comparisons
config        run configuration and presets
cli           the ``simplerl`` command
"""

__version__ = "0.1.0"
