import numpy as np
import pytest
import torch

from simplerl.envs import EnvSpec, ReplayBuffer, collect, make_env, random_policy


def small_buffer(name="mini_pong", n=120, seed=0, **spec_kw):
    spec = EnvSpec(name, seed=seed, **spec_kw)
    env = make_env(spec)
    buf = ReplayBuffer(spec)
    collect(env, random_policy(env.n_actions), n, np.random.default_rng(seed), buf)
    return buf


@pytest.fixture
def pong_buffer():
    return small_buffer()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# one line per acceptance criterion, repeated at the end of the terminal report
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("ab"))):
            terminalreporter.write_line(line)
