import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivefb import scenario
from drivefb.metrics import score_batch
from drivefb.planner import expert_plan
from drivefb.scene import FAMILIES, Lateral, Longitudinal, Trajectory

from conftest import open_road, straight_traj, vehicle


def test_single_straight_record():
    recs = scenario.generate_corpus(1, {"straight": 1.0}, seed=7)
    assert len(recs) == 1
    r = recs[0]
    assert r.family == "straight"
    # goal ahead of the ego, on the centerline
    assert r.scene.goal[0] > 0
    _, lat, _ = r.scene.corridor.polyline.project(np.asarray([r.scene.goal]))
    assert abs(lat[0]) < 1e-6


def test_family_counts_uniform_hundred():
    counts = scenario.family_counts(100, scenario.uniform_mix())
    assert sum(counts.values()) == 100
    assert set(counts) == set(FAMILIES)
    assert all(c in (16, 17) for c in counts.values())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6))
def test_family_counts_within_rounding(count, w):
    mix = dict(zip(FAMILIES, np.asarray(w) / np.sum(w)))
    counts = scenario.family_counts(count, mix)
    assert sum(counts.values()) == count
    for f, c in counts.items():
        assert abs(c - count * mix[f]) < 1.0


def test_family_counts_rejects_bad_mix():
    with pytest.raises(ValueError):
        scenario.family_counts(10, {"straight": 0.5})
    with pytest.raises(ValueError):
        scenario.family_counts(0, scenario.uniform_mix())
    with pytest.raises(ValueError):
        scenario.family_counts(10, {"motorway": 1.0})


def test_generation_is_deterministic(tmp_path):
    a = scenario.generate_corpus(6, scenario.uniform_mix(), seed=21)
    b = scenario.generate_corpus(6, scenario.uniform_mix(), seed=21)
    assert scenario.corpus_hash(a) == scenario.corpus_hash(b)
    scenario.save_corpus(a, tmp_path / "a", 21)
    scenario.save_corpus(b, tmp_path / "b", 21)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    c = scenario.generate_corpus(6, scenario.uniform_mix(), seed=22)
    assert scenario.corpus_hash(a) != scenario.corpus_hash(c)


def test_corpus_round_trip(tmp_path, small_corpus):
    scenario.save_corpus(small_corpus, tmp_path, 5)
    back = scenario.load_corpus(tmp_path)
    assert scenario.corpus_hash(back) == scenario.corpus_hash(small_corpus)


def test_expert_validity(small_corpus):
    for r in small_corpus:
        assert not r.gt_trajectory.degenerate
        assert score_batch(r.scene, [r.gt_trajectory]).pdms[0] >= 0.9


def test_expert_empty_road_advances():
    traj = expert_plan(open_road(5.0, goal_x=20.0))
    steps = np.diff(np.vstack([[0.0, 0.0], traj.array]), axis=0)
    assert np.allclose(steps[:, 0], 2.5, atol=0.3)
    assert np.allclose(traj.array[:, 1], 0.0, atol=1e-9)


def test_expert_respects_active_stop_line():
    scene = open_road(4.0, stop_line=(6.0, True))
    traj = expert_plan(scene)
    assert score_batch(scene, [traj]).tlc[0] == 1
    assert traj.array[-1, 0] <= 6.0 + 1e-9


def test_expert_degenerate_when_blocked():
    wall = [vehicle(x, y) for x in (4.0, 9.0, 14.0) for y in (-2.0, 0.0, 2.0)]
    traj = expert_plan(open_road(4.0, obstacles=wall))
    assert traj.degenerate


def test_label_constant_speed():
    meta = scenario.label_meta_action(straight_traj(4.0), open_road(4.0))
    assert (meta.longitudinal, meta.lateral) == (Longitudinal.MAINTAIN, Lateral.KEEP)


def test_label_stop():
    v = np.linspace(4.0, 0.0, 9)[1:]
    x = np.cumsum(v * 0.5)
    traj = Trajectory.from_array(np.stack([x, np.zeros(8)], 1))
    meta = scenario.label_meta_action(traj, open_road(4.0))
    assert (meta.longitudinal, meta.lateral) == (Longitudinal.STOP, Lateral.KEEP)


def test_label_left_turn():
    from dataclasses import replace

    corridor = scenario.make_corridor(2.0, turn_start=2.0, turn_angle=math.radians(40.0), radius=15.0)
    scene = replace(open_road(6.0), corridor=corridor)
    poly = corridor.polyline
    s0 = float(poly.project(np.zeros((1, 2)))[0][0])
    xy, _ = poly.interpolate(s0 + 3.0 * np.arange(1, 9))
    meta = scenario.label_meta_action(Trajectory.from_array(xy), scene)
    assert meta.lateral == Lateral.TURN_LEFT


def test_label_lane_change():
    y = np.clip(np.arange(1, 9) * 0.5, 0, 3.5)
    traj = Trajectory.from_array(np.stack([4.0 * 0.5 * np.arange(1, 9), y], 1))
    scene = open_road(4.0, half_width=3.5)
    assert scenario.label_meta_action(traj, scene).lateral == Lateral.CHANGE_LEFT


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=16, max_size=16))
def test_label_is_total(vals):
    traj = Trajectory.from_array(np.reshape(vals, (8, 2)))
    meta = scenario.label_meta_action(traj, open_road(4.0))
    assert meta.longitudinal in Longitudinal and meta.lateral in Lateral
