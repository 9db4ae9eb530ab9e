import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivefb.metrics import (
    ExtendedSubScores,
    MetricConfig,
    SubScores,
    epdms,
    extended_sub_scores,
    pdms,
    plan_consistency,
    planning_accuracy,
    score_batch,
    sub_scores,
)
from drivefb.scene import Lateral, Longitudinal, MetaAction, Trajectory

from conftest import open_road, straight_traj, vehicle


def pdms_oracle(nc, dac, ttc, c, ep):
    return nc * dac * (5 * ep + 5 * ttc + 2 * c) / 12


def epdms_oracle(nc, dac, ddc, tlc, ep, ttc, lk, hc, ec):
    return nc * dac * ddc * tlc * (5 * ep + 2 * lk + 2 * hc + 5 * ttc + 2 * ec) / 16


def test_pdms_examples():
    assert pdms(SubScores(1, 1, 1, 1, 1.0)) == 1.0
    assert pdms(SubScores(1, 0, 1, 1, 1.0)) == 0.0
    assert pdms(SubScores(1, 1, 1, 1, 0.0)) == pytest.approx(7 / 12, abs=1e-15)
    assert pdms(SubScores(1, 1, 0, 1, 1.0)) == pytest.approx(7 / 12, abs=1e-15)


def test_epdms_examples():
    assert epdms(ExtendedSubScores(1, 1, 1, 1, 1.0, 1.0, 1.0, 1.0, 1.0)) == 1.0
    assert epdms(ExtendedSubScores(1, 1, 1, 0, 1.0, 1.0, 1.0, 1.0, 1.0)) == 0.0
    assert epdms(ExtendedSubScores(1, 1, 1, 1, 0.5, 1.0, 0.0, 1.0, 1.0)) == pytest.approx((2.5 + 2 + 5 + 2) / 16)


def test_aggregation_matches_oracles_on_random_tuples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b = rng.integers(0, 2, size=4)
        r = rng.random(6)
        s = SubScores(int(b[0]), int(b[1]), int(b[2]), int(b[3]), float(r[0]))
        assert abs(pdms(s) - pdms_oracle(*b, r[0])) <= 1e-12
        e = ExtendedSubScores(int(b[0]), int(b[1]), int(b[2]), int(b[3]), *map(float, r[:5]))
        assert abs(epdms(e) - epdms_oracle(*b, *r[:5])) <= 1e-12


def test_gating_on_boundary_grid():
    grid = [0.0, 0.5, 1.0]
    for nc, dac, ttc, c in itertools.product([0, 1], repeat=4):
        for ep in grid:
            v = pdms(SubScores(nc, dac, ttc, c, ep))
            if nc == 0 or dac == 0:
                assert v == 0.0
            assert 0.0 <= v <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1), st.integers(0, 1))
def test_pdms_monotone_in_ep(a, b, ttc, c):
    lo, hi = sorted((a, b))
    assert pdms(SubScores(1, 1, ttc, c, lo)) <= pdms(SubScores(1, 1, ttc, c, hi))


def test_subscore_validation():
    with pytest.raises(ValueError):
        SubScores(2, 1, 1, 1, 0.5)
    with pytest.raises(ValueError):
        SubScores(1, 1, 1, 1, 1.5)


def test_expert_on_empty_road_scores_one():
    scene = open_road(4.0)
    s = sub_scores(scene, straight_traj(4.0))
    assert (s.nc, s.dac, s.ttc, s.comfort) == (1, 1, 1, 1)
    assert s.ep == pytest.approx(1.0)
    assert pdms(s) == pytest.approx(1.0)


def test_collision_step_and_obstacle():
    # static vehicle centred 6 m ahead: ego at 2 m/s reaches it by step 3 (x = 3 m, gap < 4.8 m)
    scene = open_road(2.0, obstacles=[vehicle(40.0, 0.0), vehicle(6.0, 0.0)])
    sc = score_batch(scene, [straight_traj(2.0)])
    assert sc.nc[0] == 0
    assert sc.collision_obstacle[0] == 1
    # first overlap when 2 m/s * t >= 6 - 4.8 = 1.2 m  ->  t = 1.0 s  ->  step 2
    assert sc.collision_step[0] == 2


def test_corridor_violation():
    scene = open_road(4.0)
    sc = score_batch(scene, [straight_traj(4.0, y=2.0)])
    assert sc.dac[0] == 0 and sc.dac_step[0] == 1
    assert sc.pdms[0] == 0.0


def test_ttc_triggers_before_collision():
    # final ego front at 34.4 m, obstacle rear at 40.6 m; a 1 s look-ahead at 8 m/s closes the gap
    scene = open_road(8.0, obstacles=[vehicle(43.0, 0.0)])
    sc = score_batch(scene, [straight_traj(8.0)])
    assert sc.nc[0] == 1
    assert sc.ttc[0] == 0


def test_standing_still_progress_gated():
    scene = open_road(4.0)
    stop = Trajectory.from_array(np.zeros((8, 2)))
    s = sub_scores(scene, stop)
    assert s.ep == 0.0
    assert pdms(s) <= 7 / 12 + 1e-12


def test_stop_line_compliance():
    scene = open_road(6.0, stop_line=(10.0, True))
    sc = score_batch(scene, [straight_traj(6.0)])
    assert sc.tlc[0] == 0
    inactive = open_road(6.0, stop_line=(10.0, False))
    assert score_batch(inactive, [straight_traj(6.0)]).tlc[0] == 1


def test_comfort_flags_harsh_braking():
    scene = open_road(10.0)
    x = np.cumsum([5.0, 5.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0])
    sc = score_batch(scene, [Trajectory.from_array(np.stack([x, np.zeros(8)], 1))])
    assert sc.comfort[0] == 0


def test_expert_progress_required():
    from dataclasses import replace

    scene = replace(open_road(4.0), expert_progress=None)
    with pytest.raises(ValueError):
        score_batch(scene, [straight_traj()])


def test_plan_consistency_zero_for_shifted_plan():
    prev = straight_traj(4.0)
    arr = prev.array
    nxt = np.vstack([arr[1:] - arr[0], arr[-1:] - arr[0] + [2.0, 0.0]])
    assert plan_consistency(Trajectory.from_array(nxt), prev) == pytest.approx(0.0)
    ext = extended_sub_scores(open_road(4.0), Trajectory.from_array(nxt), prev, MetricConfig())
    assert ext.ec == 1.0


def test_planning_accuracy_counting_oracle():
    rng = np.random.default_rng(7)
    lon, lat = list(Longitudinal), list(Lateral)
    gt = [MetaAction(lon[rng.integers(4)], lat[rng.integers(5)]) for _ in range(500)]
    pred = []
    for g in gt:
        pl = g.longitudinal if rng.random() < 0.7 else lon[(lon.index(g.longitudinal) + 1) % 4]
        pa = g.lateral if rng.random() < 0.6 else lat[(lat.index(g.lateral) + 1) % 5]
        pred.append(MetaAction(pl, pa))
    speed, path, both = planning_accuracy(pred, gt)
    assert speed == sum(p.longitudinal == g.longitudinal for p, g in zip(pred, gt)) / 500
    assert path == sum(p.lateral == g.lateral for p, g in zip(pred, gt)) / 500
    assert both <= min(speed, path)


def test_planning_accuracy_errors():
    m = MetaAction(Longitudinal.STOP, Lateral.KEEP)
    with pytest.raises(ValueError):
        planning_accuracy([m], [])
    with pytest.raises(ValueError):
        planning_accuracy([], [])
