"""Sampling-based expert planner.

Candidates are the product of longitudinal profiles (quartic speed-keeping to
a target speed, quintic stops at a target distance) and quintic lateral
offsets relative to the corridor centerline. Every candidate is scored with
the metrics module; the expert is the argmax PDMS plan.
"""

from __future__ import annotations

from dataclasses import replace
from functools import lru_cache

import numpy as np

from .metrics import MetricConfig, score_batch
from .scene import DT, HORIZON_STEPS, Scene, Trajectory

TARGET_SPEEDS = tuple(float(v) for v in range(0, 15))
SPEED_REACH_TIMES = (2.0, 4.0)
STOP_DISTANCES = tuple(float(d) for d in np.arange(1.0, 41.0, 1.0))
STOP_TIMES = (3.0, 4.0, 5.0)
LATERAL_TARGETS = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
LATERAL_TIME = 3.0
MIN_PROGRESS = 0.5
CREEP = 0.0

_T = DT * np.arange(1, HORIZON_STEPS + 1)


def _quartic_speed(v0: float, a0: float, vt: float, T: float) -> np.ndarray:
    # s(t) = v0 t + a0/2 t^2 + c3 t^3 + c4 t^4 with s'(T) = vt, s''(T) = 0
    A = np.array([[3 * T**2, 4 * T**3], [6 * T, 12 * T**2]])
    b = np.array([vt - v0 - a0 * T, -a0])
    c3, c4 = np.linalg.solve(A, b)
    t = np.minimum(_T, T)
    s = v0 * t + 0.5 * a0 * t**2 + c3 * t**3 + c4 * t**4
    return s + vt * np.maximum(_T - T, 0.0)


def _quintic(x0: float, v0: float, a0: float, xt: float, T: float) -> np.ndarray:
    # x(T) = xt with zero end velocity and acceleration; held afterwards
    A = np.array(
        [
            [T**3, T**4, T**5],
            [3 * T**2, 4 * T**3, 5 * T**4],
            [6 * T, 12 * T**2, 20 * T**3],
        ]
    )
    b = np.array([xt - x0 - v0 * T - 0.5 * a0 * T**2, -v0 - a0 * T, -a0])
    c3, c4, c5 = np.linalg.solve(A, b)
    t = np.minimum(_T, T)
    return x0 + v0 * t + 0.5 * a0 * t**2 + c3 * t**3 + c4 * t**4 + c5 * t**5


def longitudinal_profiles(v0: float, a0: float) -> tuple[np.ndarray, list[tuple]]:
    """Arc-length offsets (M, 8) of all admissible longitudinal profiles."""
    rows, labels = [], []
    for vt in TARGET_SPEEDS:
        for T in SPEED_REACH_TIMES:
            rows.append(_quartic_speed(v0, a0, vt, T))
            labels.append(("speed", vt, T))
    for d in STOP_DISTANCES:
        for T in STOP_TIMES:
            rows.append(_quintic(0.0, v0, a0, d, T))
            labels.append(("stop", d, T))
    prof = np.asarray(rows)
    steps = np.diff(np.concatenate([np.zeros((len(rows), 1)), prof], axis=1), axis=1)
    ok = np.all(steps >= -1e-6, axis=1) & np.all(steps <= 12.0, axis=1)
    prof = np.maximum.accumulate(np.maximum(prof, 0.0), axis=1)
    return prof[ok], [lab for lab, k in zip(labels, ok) if k]


@lru_cache(maxsize=64)
def _lateral_profiles(d0: float, targets: tuple[float, ...]) -> np.ndarray:
    return np.asarray([_quintic(d0, 0.0, 0.0, dt, LATERAL_TIME) for dt in targets])


def candidate_lattice(scene: Scene, lateral: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All lattice trajectories for ``scene``.

    Returns (trajectories (N, 8, 2), |lateral target| (N,), candidate order key (N,)).
    """
    poly = scene.corridor.polyline
    origin = np.asarray(scene.ego.position, dtype=float)
    s0, d0, _ = poly.project(origin[None])
    s0, d0 = float(s0[0]), float(d0[0])
    longi, _ = longitudinal_profiles(scene.ego.speed, scene.ego.acceleration)
    hw = scene.corridor.half_width
    targets = tuple(d for d in LATERAL_TARGETS if abs(d) <= max(hw - 1.0, 0.0)) if lateral else (0.0,)
    if 0.0 not in targets:
        targets = targets + (0.0,)
    lat = _lateral_profiles(round(d0, 6), targets)
    s = s0 + longi[:, None, :]  # (M, 1, 8)
    d = lat[None, :, :]  # (1, L, 8)
    s = np.broadcast_to(s, (longi.shape[0], lat.shape[0], HORIZON_STEPS))
    d = np.broadcast_to(d, s.shape)
    xy, ang = poly.interpolate(s)
    normal = np.stack([-np.sin(ang), np.cos(ang)], axis=-1)
    pts = xy + d[..., None] * normal
    n = s.shape[0] * s.shape[1]
    lat_abs = np.broadcast_to(np.abs(np.asarray(targets))[None, :], s.shape[:2]).reshape(n)
    return pts.reshape(n, HORIZON_STEPS, 2), lat_abs, np.arange(n)


def _safe_mask(scene: Scene, scores) -> np.ndarray:
    return (scores.nc == 1) & (scores.dac == 1) & (scores.tlc == 1)


def goal_progress(scene: Scene) -> float:
    """Centerline arc distance from the ego to the goal."""
    s, _, _ = scene.corridor.polyline.project(np.asarray([scene.ego.position, scene.goal], dtype=float))
    return float(s[1] - s[0])


def reference_progress(scene: Scene, cfg: MetricConfig | None = None) -> float:
    """Progress denominator: the max centerline progress among lattice plans that
    are collision-free, inside the corridor and stop-line compliant, capped at
    the goal."""
    probe = replace(scene, expert_progress=1.0)
    trajs, _, _ = candidate_lattice(probe)
    sc = score_batch(probe, trajs, cfg)
    safe = _safe_mask(probe, sc)
    if not safe.any():
        return 0.0
    return float(min(np.max(sc.progress[safe]), goal_progress(scene)))


def with_reference_progress(scene: Scene, cfg: MetricConfig | None = None) -> Scene:
    if scene.expert_progress is not None:
        return scene
    return replace(scene, expert_progress=reference_progress(scene, cfg))


def _all_stop(scene: Scene) -> Trajectory:
    h = scene.ego.heading
    p = np.asarray(scene.ego.position) + CREEP * np.array([np.cos(h), np.sin(h)])
    return Trajectory.from_array(np.repeat(p[None], HORIZON_STEPS, axis=0), degenerate=True)


def expert_plan(scene: Scene, cfg: MetricConfig | None = None) -> Trajectory:
    """Best lattice plan by PDMS, then progress (capped at the goal), then
    smallest overshoot of the goal, then smaller lateral target.

    Plans that cross an active stop line are never chosen. Returns a
    degenerate all-stop trajectory when no safe plan makes at least 0.5 m of
    progress.
    """
    scene = with_reference_progress(scene, cfg)
    trajs, lat_abs, order = candidate_lattice(scene)
    sc = score_batch(scene, trajs, cfg)
    safe = _safe_mask(scene, sc)
    if not np.any(safe & (sc.progress >= MIN_PROGRESS)):
        return _all_stop(scene)
    score = np.where(safe, sc.pdms, -1.0)
    goal = goal_progress(scene)
    capped = np.minimum(sc.progress, goal)
    overshoot = np.abs(sc.progress - goal)
    # np.lexsort keys run from least to most significant
    keys = (order, lat_abs, np.round(overshoot, 2), -np.round(capped, 2), -np.round(score, 9))
    best = np.lexsort(keys)[0]
    return Trajectory.from_array(trajs[best])
