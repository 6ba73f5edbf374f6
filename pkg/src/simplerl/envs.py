"""Toy pixel games and the preprocessing chain applied to them.

Two games render 48x32 RGB frames on a grid of 2x2-pixel cells:

* ``mini_pong``: the agent moves the right paddle against a slow scripted
  opponent; first to three points ends the episode.
* ``mini_cross``: the agent walks a chicken up through four lanes of cars;
  +1 each time it reaches the top.  Cars enter from a hidden random stream
  when ``stochastic`` is set, so their arrival cannot be read off past frames.

:func:`make_env` wraps a game with frame skip 4, 2x downscaling, reward
clipping and 4-frame stacking.  One agent step is four raw frames.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

FRAME_SKIP = 4
STACK = 4
DOWNSCALE = 2
CELL = 2  # raw pixels per game cell side

BLACK = (0, 0, 0)
GREEN = (92, 186, 92)
RED = (213, 130, 74)
WHITE = (236, 236, 236)
YELLOW = (252, 252, 84)
GRAY = (142, 142, 142)
CAR_COLORS = ((200, 72, 72), (84, 92, 214), (180, 122, 48), (164, 89, 208))


@dataclass(frozen=True)
class EnvSpec:
    name: str = "mini_pong"
    height: int = 48
    width: int = 32
    episode_cap: int = 2000  # raw frames
    stochastic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.name not in GAMES:
            raise ValueError(f"unknown environment {self.name!r}; choose from {sorted(GAMES)}")
        if self.height % (2 * CELL) or self.width % (2 * CELL):
            raise ValueError("height and width must be multiples of 4")
        if self.episode_cap <= 0:
            raise ValueError("episode_cap must be positive")


def _fill(frame, row, col, h, w, color):
    frame[row * CELL:(row + h) * CELL, col * CELL:(col + w) * CELL] = color


class MiniPong:
    """Raw game; ``step`` advances one raw frame."""

    actions = ("noop", "up", "down")
    PADDLE_H = 6
    SERVE_FREEZE = 8  # raw frames the ball stays parked after a point
    WIN_POINTS = 3

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.rows = spec.height // CELL
        self.cols = spec.width // CELL
        self.rng = np.random.default_rng(spec.seed)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        r = self.rows
        self.t = 0
        self.agent_y = int(self.rng.integers(0, r - self.PADDLE_H + 1))
        self.opp_y = int(self.rng.integers(0, r - self.PADDLE_H + 1))
        self.score = [0, 0]
        self._serve(int(self.rng.integers(2, r - 3)))
        self.freeze = 0
        return self.render()

    def _serve(self, row: int):
        self.ball_y, self.ball_x = row, self.cols // 2 - 1
        # direction read off visible state so a 4-frame window determines it
        self.dx = 1
        self.dy = 1 if row < self.rows // 2 else -1
        self.freeze = self.SERVE_FREEZE

    def step(self, action: int):
        self.t += 1
        reward, done = 0, False
        if self.t % 2 == 0:  # paddle and ball move every second raw frame
            if action == 1:
                self.agent_y = max(self.agent_y - 1, 0)
            elif action == 2:
                self.agent_y = min(self.agent_y + 1, self.rows - self.PADDLE_H)
        if self.freeze > 0:
            self.freeze -= 1
        else:
            if self.t % 4 == 0:
                centre = self.opp_y + self.PADDLE_H // 2
                if self.ball_y + 1 < centre:
                    self.opp_y = max(self.opp_y - 1, 0)
                elif self.ball_y > centre:
                    self.opp_y = min(self.opp_y + 1, self.rows - self.PADDLE_H)
            if self.t % 2 == 0:
                reward = self._move_ball()
        if reward:
            self.score[0 if reward > 0 else 1] += 1
            if max(self.score) >= self.WIN_POINTS:
                done = True
            else:
                self._serve(self.rows // 2 + (1 if reward > 0 else -2))
        if self.t >= self.spec.episode_cap:
            done = True
        return self.render(), reward, done

    def _move_ball(self) -> int:
        y, x = self.ball_y + self.dy, self.ball_x + self.dx
        if y < 0 or y > self.rows - 2:
            self.dy = -self.dy
            y = self.ball_y + self.dy
        left, right = 2, self.cols - 4
        if x < left:
            if self.opp_y - 1 <= self.ball_y <= self.opp_y + self.PADDLE_H - 1:
                self.dx = 1
                x = self.ball_x + 1
            else:
                return 1
        elif x > right:
            if self.agent_y - 1 <= self.ball_y <= self.agent_y + self.PADDLE_H - 1:
                self.dx = -1
                x = self.ball_x - 1
            else:
                return -1
        self.ball_y, self.ball_x = y, x
        return 0

    def render(self) -> np.ndarray:
        f = np.zeros((self.spec.height, self.spec.width, 3), dtype=np.uint8)
        _fill(f, self.opp_y, 0, self.PADDLE_H, 2, RED)
        _fill(f, self.agent_y, self.cols - 2, self.PADDLE_H, 2, GREEN)
        _fill(f, self.ball_y, self.ball_x, 2, 2, WHITE)
        return f


class MiniCross:
    """Freeway-like crossing game with cars dispatched from a hidden stream."""

    actions = ("noop", "up", "down")
    LANES = (3, 7, 11, 15, 19)  # top row of each two-cell lane
    CAR_W = 3
    SPAWN_P = 0.2

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.rows = spec.height // CELL
        self.cols = spec.width // CELL
        self.rng = np.random.default_rng(spec.seed)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.chick_y = self.rows - 2
        self.chick_x = self.cols // 2 - 1
        self.cars: list[list[int]] = []  # [lane index, x]
        for lane in range(len(self.LANES)):
            x = int(self.rng.integers(0, self.cols - self.CAR_W))
            self.cars.append([lane, x])
        return self.render()

    def _direction(self, lane):
        return 1 if lane % 2 == 0 else -1

    def step(self, action: int):
        self.t += 1
        reward, done = 0, False
        if self.t % 2 == 0:
            if action == 1:
                self.chick_y = max(self.chick_y - 1, 0)
            elif action == 2:
                self.chick_y = min(self.chick_y + 1, self.rows - 2)
            moved = []
            for lane, x in self.cars:
                x += self._direction(lane)
                if -self.CAR_W < x < self.cols:
                    moved.append([lane, x])
            self.cars = moved
        if self.t % 4 == 0:
            self._dispatch()
        if self._hit():
            self.chick_y = self.rows - 2
        if self.chick_y == 0:
            reward = 1
            self.chick_y = self.rows - 2
        if self.t >= self.spec.episode_cap:
            done = True
        return self.render(), reward, done

    def _dispatch(self):
        for lane in range(len(self.LANES)):
            entry = -self.CAR_W + 1 if self._direction(lane) > 0 else self.cols - 1
            busy = any(l == lane and abs(x - entry) < self.CAR_W + 2 for l, x in self.cars)
            if busy:
                continue
            if self.spec.stochastic:
                go = self.rng.random() < self.SPAWN_P
            else:
                go = (self.t // 4 + 3 * lane) % 7 == 0
            if go:
                self.cars.append([lane, entry])

    def _hit(self) -> bool:
        for lane, x in self.cars:
            top = self.LANES[lane]
            if top - 1 <= self.chick_y <= top + 1 and x - 1 <= self.chick_x <= x + self.CAR_W - 1:
                return True
        return False

    def render(self) -> np.ndarray:
        f = np.zeros((self.spec.height, self.spec.width, 3), dtype=np.uint8)
        _fill(f, 0, 0, 1, self.cols, GRAY)
        for lane, x in self.cars:
            lo, hi = max(x, 0), min(x + self.CAR_W, self.cols)
            if hi > lo:
                _fill(f, self.LANES[lane], lo, 2, hi - lo, CAR_COLORS[lane % len(CAR_COLORS)])
        _fill(f, self.chick_y, self.chick_x, 2, 2, YELLOW)
        return f


GAMES = {"mini_pong": MiniPong, "mini_cross": MiniCross}


def downscale(frame: np.ndarray, factor: int = DOWNSCALE) -> np.ndarray:
    """Block mean over ``factor x factor`` pixels, rounded to nearest integer."""
    h, w, c = frame.shape
    blocks = frame.reshape(h // factor, factor, w // factor, factor, c).astype(np.float64)
    return np.rint(blocks.mean(axis=(1, 3))).clip(0, 255).astype(np.uint8)


def clip_reward(r) -> int:
    return int(np.sign(r))


class TerminatedError(RuntimeError):
    pass


class PixelEnv:
    """Frame skip 4, downscale x2, clipped rewards, stacks of 4 frames (oldest first)."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.game = GAMES[spec.name](spec)
        self.n_actions = len(self.game.actions)
        self.frame_shape = (spec.height // DOWNSCALE, spec.width // DOWNSCALE, 3)
        self.observation_shape = (STACK, *self.frame_shape)
        self.stack: np.ndarray | None = None
        self.done = True
        self.fresh = False
        self.episodes = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is None and self.episodes == 0:
            seed = self.spec.seed
        first = downscale(self.game.reset(seed))
        self.stack = np.repeat(first[None], STACK, axis=0)
        self.done = False
        self.fresh = True  # current stack is the reset stack
        self.episodes += 1
        return self.stack.copy()

    def step(self, action: int):
        if self.done:
            raise TerminatedError("episode has terminated; call reset()")
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"action {action} outside [0, {self.n_actions})")
        total = 0
        for _ in range(FRAME_SKIP):
            raw, r, done = self.game.step(int(action))
            total += r
            if done:
                break
        frame = downscale(raw)
        self.stack = np.concatenate([self.stack[1:], frame[None]], axis=0)
        self.done = done
        self.fresh = False
        return self.stack.copy(), clip_reward(total), done


class StickyActions:
    """With probability ``p`` the previously executed action replaces the requested one."""

    def __init__(self, env, p: float, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self.env, self.p = env, p
        self.rng = np.random.default_rng(seed)
        self.last_action: int | None = None
        self.repeats = 0
        self.steps = 0

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, seed: int | None = None):
        self.last_action = None
        return self.env.reset(seed)

    def step(self, action: int):
        executed = int(action)
        if self.last_action is not None and self.rng.random() < self.p:
            executed = self.last_action
            self.repeats += 1
        self.steps += 1
        self.last_action = executed
        return self.env.step(executed)


def make_env(spec: EnvSpec, sticky: float = 0.0) -> PixelEnv | StickyActions:
    env = PixelEnv(spec)
    return apply_sticky(env, sticky, spec.seed) if sticky > 0 else env


def apply_sticky(env, p: float, seed: int = 0) -> StickyActions:
    return StickyActions(env, p, seed)


# --- data ----------------------------------------------------------------

@dataclass
class Transition:
    stack: np.ndarray  # [4, H, W, 3] uint8
    action: int
    reward: int
    next_frame: np.ndarray  # [H, W, 3] uint8
    done: bool
    first: bool = False  # stack is the reset stack of a new episode


@dataclass
class Episode:
    frames: list = field(default_factory=list)  # n + 1 frames for n transitions
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    @property
    def closed(self) -> bool:
        return bool(self.dones) and bool(self.dones[-1])

    def frame_array(self) -> np.ndarray:
        if not isinstance(self.frames, np.ndarray) or len(self.frames) != len(self.actions) + 1:
            self.frames = np.asarray(self.frames, dtype=np.uint8)
        return self.frames

    def stack_at(self, t: int) -> np.ndarray:
        """The four frames ending at frame ``t``; positions before 0 repeat frame 0."""
        idx = np.clip(np.arange(t - STACK + 1, t + 1), 0, None)
        return self.frame_array()[idx]


class ReplayBuffer:
    VERSION = 1

    def __init__(self, spec: EnvSpec | None = None):
        self.spec = spec
        self.episodes: list[Episode] = []

    @property
    def total_interactions(self) -> int:
        return sum(len(e) for e in self.episodes)

    def __len__(self):
        return self.total_interactions

    def add(self, tr: Transition):
        if tr.first or not self.episodes or self.episodes[-1].closed:
            ep = Episode(frames=[tr.stack[-1]])
            self.episodes.append(ep)
        ep = self.episodes[-1]
        if isinstance(ep.frames, np.ndarray):
            ep.frames = list(ep.frames)
        ep.frames.append(tr.next_frame)
        ep.actions.append(int(tr.action))
        ep.rewards.append(int(tr.reward))
        ep.dones.append(bool(tr.done))

    def extend(self, transitions):
        for tr in transitions:
            self.add(tr)

    def transitions(self) -> Iterator[Transition]:
        for ep in self.episodes:
            frames = ep.frame_array()
            for t in range(len(ep)):
                yield Transition(ep.stack_at(t), ep.actions[t], ep.rewards[t], frames[t + 1],
                                 ep.dones[t], first=t == 0)

    def positions(self, min_history: int = 0) -> list[tuple[int, int]]:
        """(episode, t) pairs with an action taken from frame t, t >= min_history."""
        return [(e, t) for e, ep in enumerate(self.episodes) for t in range(min_history, len(ep))]

    # serialisation: header + per-episode records + sha256 trailer
    def to_bytes(self) -> bytes:
        body = io.BytesIO()
        header = json.dumps({
            "version": self.VERSION,
            "env": asdict(self.spec) if self.spec else None,
            "episodes": len(self.episodes),
            "interactions": self.total_interactions,
        }, sort_keys=True).encode()
        body.write(struct.pack("<I", len(header)) + header)
        for ep in self.episodes:
            frames = ep.frame_array()
            n = len(ep)
            h, w, c = frames.shape[1:] if len(frames) else (0, 0, 0)
            body.write(struct.pack("<IIII", n, h, w, c))
            body.write(frames.tobytes())
            body.write(np.asarray(ep.actions, dtype=np.uint8).tobytes())
            body.write(np.asarray(ep.rewards, dtype=np.int8).tobytes())
            body.write(np.asarray(ep.dones, dtype=np.uint8).tobytes())
        payload = body.getvalue()
        return b"SIMPLEB1" + payload + hashlib.sha256(payload).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ReplayBuffer":
        from .nn import CorruptFileError

        if blob[:8] != b"SIMPLEB1":
            raise CorruptFileError("not a replay buffer file")
        payload, digest = blob[8:-32], blob[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CorruptFileError("replay buffer checksum mismatch")
        buf = io.BytesIO(payload)
        (n,) = struct.unpack("<I", buf.read(4))
        header = json.loads(buf.read(n))
        out = cls(EnvSpec(**header["env"]) if header["env"] else None)
        for _ in range(header["episodes"]):
            n, h, w, c = struct.unpack("<IIII", buf.read(16))
            frames = np.frombuffer(buf.read((n + 1) * h * w * c), dtype=np.uint8)
            ep = Episode(frames=frames.reshape(n + 1, h, w, c).copy())
            ep.actions = np.frombuffer(buf.read(n), dtype=np.uint8).astype(int).tolist()
            ep.rewards = np.frombuffer(buf.read(n), dtype=np.int8).astype(int).tolist()
            ep.dones = [bool(d) for d in np.frombuffer(buf.read(n), dtype=np.uint8)]
            out.episodes.append(ep)
        if out.total_interactions != header["interactions"]:
            raise CorruptFileError("interaction count does not match header")
        return out

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        return cls.from_bytes(Path(path).read_bytes())


Policy = Callable[[np.ndarray, np.random.Generator], int]


def random_policy(n_actions: int) -> Policy:
    def act(stack, rng):
        return int(rng.integers(n_actions))
    return act


def collect(env, policy: Policy, n_interactions: int, rng: np.random.Generator | None = None,
            buffer: ReplayBuffer | None = None) -> list[Transition]:
    """Run ``n_interactions`` agent steps, resetting on episode end.

    The env's current episode is continued if one is in progress.
    """
    if n_interactions <= 0:
        raise ValueError("n_interactions must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for _ in range(n_interactions):
        first = env.done
        if first:
            env.reset()
        stack = env.stack.copy()
        action = int(policy(stack, rng))
        nxt, reward, done = env.step(action)
        tr = Transition(stack, action, reward, nxt[-1].copy(), done, first=first)
        out.append(tr)
        if buffer is not None:
            buffer.add(tr)
    return out


def run_episode(env, policy: Policy, rng: np.random.Generator, seed: int | None = None,
                max_steps: int = 100_000) -> float:
    env.reset(seed)
    total, done, steps = 0.0, False, 0
    while not done and steps < max_steps:
        _, r, done = env.step(policy(env.stack.copy(), rng))
        total += r
        steps += 1
    return total
