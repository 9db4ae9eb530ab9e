import math
from dataclasses import replace

import numpy as np
import pytest

from drivefb import policy, scenario
from drivefb.planner import with_reference_progress
from drivefb.scene import (
    EgoState,
    NavCommand,
    Obstacle,
    ObstacleKind,
    Scene,
    StopLine,
    Trajectory,
)


def open_road(speed=4.0, obstacles=(), half_width=1.75, stop_line=None, goal_x=None):
    """Straight corridor along +x with the ego at the origin."""
    corridor = scenario.make_corridor(half_width)
    if stop_line is not None:
        s0 = float(corridor.polyline.project(np.zeros((1, 2)))[0][0])
        corridor = replace(corridor, stop_line=StopLine(s0 + stop_line[0], stop_line[1]))
    goal = (goal_x if goal_x is not None else speed * 4.0, 0.0)
    scene = Scene(
        ego=EgoState((0.0, 0.0), 0.0, speed, 0.0),
        obstacles=tuple(obstacles),
        corridor=corridor,
        goal=goal,
        command=NavCommand.MOVE_FORWARD,
        history=tuple((-speed * t, 0.0) for t in (1.5, 1.0, 0.5)),
    )
    return with_reference_progress(scene)


def straight_traj(speed=4.0, y=0.0):
    t = 0.5 * np.arange(1, 9)
    return Trajectory.from_array(np.stack([speed * t, np.full(8, y)], axis=1))


def vehicle(x, y, vx=0.0, vy=0.0):
    return Obstacle(ObstacleKind.VEHICLE, (x, y), (vx, vy), (2.4, 1.0), math.atan2(vy, vx) if (vx or vy) else 0.0)


@pytest.fixture(scope="session")
def small_corpus():
    return scenario.generate_corpus(12, scenario.uniform_mix(), seed=5)


@pytest.fixture(scope="session")
def random_params():
    p = policy.init_params(3)
    p.freeze_reference()
    return p


@pytest.fixture(scope="session")
def sft_params(small_corpus):
    """A briefly fine-tuned policy: mostly well-formed, not yet competent."""
    from drivefb import sft

    cfg = sft.SFTConfig(epochs=60, learning_rate=1.0)
    pairs = sft.build_dataset(small_corpus, cfg.feedback_per_record, seed=0)
    params, _ = sft.run_sft(policy.init_params(0), pairs, cfg)
    return params


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash[ACCEPTANCE])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append((number, line))
        print(line)
        assert ok, line

    return record
