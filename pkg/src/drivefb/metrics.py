"""Desk-scale PDMS / EPDMS sub-metrics, their aggregation, and planning accuracy.

Sub-metrics are simplified analogues of the closed-loop simulator checks; the
two aggregation formulas are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .geometry import EGO_HALF_EXTENT, boxes_overlap, wrap_angle
from .scene import DT, HORIZON_STEPS, MetaAction, Scene, Trajectory

MIN_MOVING_SPEED = 0.5  # m/s; slower ego steps never trigger TTC
MIN_DIRECTION_STEP = 0.1  # m; shorter displacements are ignored by DDC
TTC_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class MetricConfig:
    ttc_threshold: float = 1.0
    comfort_accel_max: float = 3.0
    comfort_jerk_max: float = 5.0
    lk_max_offset: float = 1.0
    ec_max_delta: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SubScores:
    nc: int
    dac: int
    ttc: int
    comfort: int
    ep: float

    def __post_init__(self):
        for name in ("nc", "dac", "ttc", "comfort"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        if not 0.0 <= self.ep <= 1.0:
            raise ValueError("ep must lie in [0, 1]")


@dataclass(frozen=True)
class ExtendedSubScores:
    nc: int
    dac: int
    ddc: int
    tlc: int
    ep: float
    ttc: float
    lk: float
    hc: float
    ec: float

    def __post_init__(self):
        for name in ("nc", "dac", "ddc", "tlc"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        for name in ("ep", "ttc", "lk", "hc", "ec"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def pdms(s: SubScores) -> float:
    return s.nc * s.dac * ((5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.comfort) / 12.0)


def epdms(s: ExtendedSubScores) -> float:
    weighted = (5.0 * s.ep + 2.0 * s.lk + 2.0 * s.hc + 5.0 * s.ttc + 2.0 * s.ec) / 16.0
    return s.nc * s.dac * s.ddc * s.tlc * weighted


@dataclass
class BatchScores:
    """Vectorised sub-scores for N trajectories of one scene.

    Step indices are 1-based time steps (step k sits at t = 0.5 k s); 0 means
    no violation.
    """

    nc: np.ndarray
    dac: np.ndarray
    ttc: np.ndarray
    comfort: np.ndarray
    ep: np.ndarray
    progress: np.ndarray
    collision_step: np.ndarray
    collision_obstacle: np.ndarray
    dac_step: np.ndarray
    ttc_step: np.ndarray
    ddc: np.ndarray
    tlc: np.ndarray
    lk: np.ndarray
    hc: np.ndarray
    max_lateral: np.ndarray

    @property
    def pdms(self) -> np.ndarray:
        return self.nc * self.dac * ((5.0 * self.ep + 5.0 * self.ttc + 2.0 * self.comfort) / 12.0)

    def sub_scores(self, i: int) -> SubScores:
        return SubScores(int(self.nc[i]), int(self.dac[i]), int(self.ttc[i]), int(self.comfort[i]), float(self.ep[i]))


def _stack(trajs) -> np.ndarray:
    if isinstance(trajs, Trajectory):
        return trajs.array[None]
    if isinstance(trajs, np.ndarray):
        arr = trajs
    else:
        arr = np.stack([t.array if isinstance(t, Trajectory) else np.asarray(t, dtype=float) for t in trajs])
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != (HORIZON_STEPS, 2):
        raise ValueError(f"expected trajectories of shape (N, {HORIZON_STEPS}, 2), got {arr.shape}")
    return arr.astype(float)


def step_headings(points: np.ndarray, heading0: float) -> np.ndarray:
    """Heading of each displacement in ``points`` (N, T+1, 2); short steps keep the previous heading."""
    disp = np.diff(points, axis=1)
    norm = np.linalg.norm(disp, axis=-1)
    raw = np.arctan2(disp[..., 1], disp[..., 0])
    out = np.empty(disp.shape[:2])
    prev = np.full(disp.shape[0], heading0, dtype=float)
    for i in range(disp.shape[1]):
        prev = np.where(norm[:, i] > 0.05, raw[:, i], prev)
        out[:, i] = prev
    return out


def comfortable(points: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    """Smoothed acceleration and jerk limits over equally spaced positions (N, T, 2)."""
    acc = savgol_filter(points, window_length=5, polyorder=2, deriv=2, delta=DT, axis=1, mode="interp")
    jerk = np.diff(acc, axis=1) / DT
    a_ok = np.max(np.linalg.norm(acc, axis=-1), axis=1) <= cfg.comfort_accel_max
    j_ok = np.max(np.linalg.norm(jerk, axis=-1), axis=1) <= cfg.comfort_jerk_max
    return a_ok & j_ok


def _first_step(mask: np.ndarray) -> np.ndarray:
    """1-based index of the first True along axis 1, 0 if none."""
    any_ = mask.any(axis=1)
    return np.where(any_, np.argmax(mask, axis=1) + 1, 0)


def score_batch(scene: Scene, trajs, cfg: MetricConfig | None = None) -> BatchScores:
    cfg = cfg or MetricConfig()
    wp = _stack(trajs)
    n = wp.shape[0]
    origin = np.asarray(scene.ego.position, dtype=float)
    pts = np.concatenate([np.broadcast_to(origin, (n, 1, 2)), wp], axis=1)
    disp = np.diff(pts, axis=1)
    heads = step_headings(pts, scene.ego.heading)
    t = DT * np.arange(1, HORIZON_STEPS + 1)
    ego_ext = np.asarray(EGO_HALF_EXTENT)

    # collisions and time-to-collision against constant-velocity obstacles
    collide = np.zeros((n, HORIZON_STEPS), dtype=bool)
    coll_obs = np.full((n, HORIZON_STEPS), -1, dtype=int)
    ttc_bad = np.zeros((n, HORIZON_STEPS), dtype=bool)
    vel = disp / DT
    moving = np.linalg.norm(vel, axis=-1) > MIN_MOVING_SPEED
    for k, ob in enumerate(scene.obstacles):
        oc = ob.position_at(t)  # (8, 2)
        hit = boxes_overlap(wp, heads, ego_ext, oc[None], ob.heading, np.asarray(ob.half_extent))
        coll_obs = np.where(hit & (coll_obs < 0), k, coll_obs)
        collide |= hit
        for frac in TTC_FRACTIONS:
            tau = frac * cfg.ttc_threshold
            ego_c = wp + vel * tau
            ob_c = ob.position_at(t + tau)
            ttc_bad |= moving & boxes_overlap(ego_c, heads, ego_ext, ob_c[None], ob.heading, np.asarray(ob.half_extent))
    ttc_bad |= collide

    poly = scene.corridor.polyline
    along, lateral, tangent = poly.project(pts)
    dac_bad = np.abs(lateral[:, 1:]) > scene.corridor.half_width + 1e-9
    progress = along[:, -1] - along[:, 0]
    ref = scene.expert_progress
    if ref is None:
        raise ValueError("scene.expert_progress is unset; run it through the planner first")
    if ref < 0.5:
        ep = np.ones(n)
    else:
        ep = np.clip(progress / ref, 0.0, 1.0)

    comfort = comfortable(pts, cfg)
    hist = np.asarray(scene.history, dtype=float)
    hpts = np.concatenate([np.broadcast_to(hist, (n, 3, 2)), pts], axis=1)
    hc = comfortable(hpts, cfg)

    step_len = np.linalg.norm(disp, axis=-1)
    dots = disp[..., 0] * np.cos(tangent[:, :-1]) + disp[..., 1] * np.sin(tangent[:, :-1])
    ddc = np.all((step_len <= MIN_DIRECTION_STEP) | (dots > 0), axis=1)

    sl = scene.corridor.stop_line
    if sl is not None and sl.active:
        before = along[:, 0] <= sl.position
        tlc = ~(before & np.any(along[:, 1:] > sl.position + 1e-9, axis=1))
    else:
        tlc = np.ones(n, dtype=bool)

    max_lat = np.max(np.abs(lateral[:, 1:]), axis=1)
    cstep = _first_step(collide)
    cobs = np.where(cstep > 0, coll_obs[np.arange(n), np.maximum(cstep - 1, 0)], -1)
    return BatchScores(
        nc=(~collide.any(axis=1)).astype(int),
        dac=(~dac_bad.any(axis=1)).astype(int),
        ttc=(~ttc_bad.any(axis=1)).astype(int),
        comfort=comfort.astype(int),
        ep=ep,
        progress=progress,
        collision_step=cstep,
        collision_obstacle=cobs,
        dac_step=_first_step(dac_bad),
        ttc_step=_first_step(ttc_bad),
        ddc=ddc.astype(int),
        tlc=tlc.astype(int),
        lk=(max_lat <= cfg.lk_max_offset).astype(float),
        hc=hc.astype(float),
        max_lateral=max_lat,
    )


def sub_scores(scene: Scene, traj: Trajectory, cfg: MetricConfig | None = None) -> SubScores:
    return score_batch(scene, traj, cfg).sub_scores(0)


def score_pdms(scene: Scene, traj: Trajectory, cfg: MetricConfig | None = None) -> float:
    return pdms(sub_scores(scene, traj, cfg))


def plan_consistency(traj: Trajectory, prev_traj: Trajectory) -> float:
    """Max pointwise distance between ``traj`` and ``prev_traj`` advanced by one step."""
    prev = prev_traj.array
    shifted = prev[1:] - prev[0]
    return float(np.max(np.linalg.norm(traj.array[:-1] - shifted, axis=-1)))


def extended_sub_scores(
    scene: Scene, traj: Trajectory, prev_traj: Trajectory | None = None, cfg: MetricConfig | None = None
) -> ExtendedSubScores:
    cfg = cfg or MetricConfig()
    b = score_batch(scene, traj, cfg)
    ec = 1.0 if prev_traj is None else float(plan_consistency(traj, prev_traj) <= cfg.ec_max_delta)
    return ExtendedSubScores(
        nc=int(b.nc[0]),
        dac=int(b.dac[0]),
        ddc=int(b.ddc[0]),
        tlc=int(b.tlc[0]),
        ep=float(b.ep[0]),
        ttc=float(b.ttc[0]),
        lk=float(b.lk[0]),
        hc=float(b.hc[0]),
        ec=ec,
    )


def planning_accuracy(pred: list[MetaAction], gt: list[MetaAction]) -> tuple[float, float, float]:
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} labels")
    if not gt:
        raise ValueError("planning accuracy needs at least one pair")
    speed = sum(p.longitudinal == g.longitudinal for p, g in zip(pred, gt))
    path = sum(p.lateral == g.lateral for p, g in zip(pred, gt))
    both = sum(p.longitudinal == g.longitudinal and p.lateral == g.lateral for p, g in zip(pred, gt))
    n = len(gt)
    return speed / n, path / n, both / n
