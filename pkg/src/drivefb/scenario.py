"""Procedural scenario corpus: families, generation, meta-action labels, persistence."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import response
from .metrics import MetricConfig, score_batch
from .planner import expert_plan, with_reference_progress
from .scene import (
    DT,
    FAMILIES,
    Corridor,
    EgoState,
    Lateral,
    Longitudinal,
    MetaAction,
    NavCommand,
    Obstacle,
    ObstacleKind,
    ScenarioRecord,
    Scene,
    StopLine,
    Trajectory,
    record_from_dict,
    record_to_dict,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = "drivefb-corpus/1"
EXPERT_MIN_PDMS = 0.9
MAX_ATTEMPTS = 50

ACCEL_THRESHOLD = 0.5  # m/s^2, windowed mean
STOP_SPEED = 0.3  # m/s
TURN_DEG = 20.0
CHANGE_OFFSET = 2.5  # m
VEHICLE_EXTENT = (2.4, 1.0)
PEDESTRIAN_EXTENT = (0.4, 0.4)
LANE_WIDTH = 3.5
GOAL_LOOKAHEAD = 4.0  # s


class CorpusGenerationError(RuntimeError):
    pass


# --- geometry builders -----------------------------------------------------


def make_corridor(
    half_width: float,
    turn_start: float = 1e9,
    turn_angle: float = 0.0,
    radius: float = 50.0,
    back: float = 10.0,
    length: float = 80.0,
    stop_line: StopLine | None = None,
) -> Corridor:
    """Straight approach along +x through the ego, then an optional circular arc.

    Arc lengths are measured from the start of the centerline, which sits
    ``back`` metres behind the ego. ``turn_start`` is relative to the ego.
    """
    s = np.arange(0.0, length + back + 1e-9, 1.0) - back
    arc_len = abs(turn_angle) * radius
    sign = 1.0 if turn_angle >= 0 else -1.0
    pts, tans = [], []
    for si in s:
        if si <= turn_start:
            pts.append((si, 0.0))
            tans.append((1.0, 0.0))
            continue
        u = min(si - turn_start, arc_len)
        phi = u / radius if radius > 0 else 0.0
        x = turn_start + radius * math.sin(phi)
        y = sign * radius * (1.0 - math.cos(phi))
        h = sign * phi
        rest = si - turn_start - u
        x += rest * math.cos(h)
        y += rest * math.sin(h)
        pts.append((x, y))
        tans.append((math.cos(h), math.sin(h)))
    return Corridor(tuple(pts), half_width, tuple(tans), stop_line)


def _history(speed: float, accel: float) -> tuple:
    out = []
    for tau in (1.5, 1.0, 0.5):
        out.append((-(speed * tau - 0.5 * accel * tau * tau), 0.0))
    return tuple(out)


def _ego(rng, lo: float, hi: float) -> EgoState:
    v = float(rng.uniform(lo, hi))
    a = float(rng.uniform(-0.5, 0.5))
    a = min(a, v / 1.5)  # keep the past speed profile non-negative
    return EgoState((0.0, 0.0), 0.0, v, a)


def _goal(corridor: Corridor, ego: EgoState, desired_speed: float) -> tuple:
    poly = corridor.polyline
    s0 = float(poly.project(np.zeros((1, 2)))[0][0])
    dist = 0.5 * (ego.speed + desired_speed) * GOAL_LOOKAHEAD
    s = min(s0 + dist, poly.length - 2.0)
    xy, _ = poly.interpolate(np.array([s]))
    return (float(xy[0, 0]), float(xy[0, 1]))


def _vehicle(x, y, vx, vy) -> Obstacle:
    return Obstacle(ObstacleKind.VEHICLE, (float(x), float(y)), (float(vx), float(vy)), VEHICLE_EXTENT, math.atan2(vy, vx) if (vx or vy) else 0.0)


def _scene(rng, ego, corridor, obstacles, command, desired) -> Scene:
    return Scene(
        ego=ego,
        obstacles=tuple(obstacles),
        corridor=corridor,
        goal=_goal(corridor, ego, desired),
        command=command,
        history=_history(ego.speed, ego.acceleration),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _desired(rng, ego: EgoState, cap: float = 12.0) -> float:
    return float(np.clip(ego.speed + rng.uniform(-1.0, 1.5), 2.0, cap))


def family_straight(rng) -> Scene:
    ego = _ego(rng, 3.0, 10.0)
    hw = float(rng.choice([1.75, 2.5, 3.5]))
    angle = math.radians(rng.uniform(-12.0, 12.0))
    corridor = make_corridor(hw, turn_start=float(rng.uniform(10, 30)), turn_angle=angle, radius=150.0)
    obstacles = []
    if rng.random() < 0.5:
        side = float(rng.choice([-1.0, 1.0]))
        obstacles.append(Obstacle(ObstacleKind.STATIC, (float(rng.uniform(10, 40)), side * (hw + 2.5)), (0.0, 0.0), VEHICLE_EXTENT, 0.0))
    return _scene(rng, ego, corridor, obstacles, NavCommand.MOVE_FORWARD, _desired(rng, ego))


def family_lead_vehicle(rng) -> Scene:
    ego = _ego(rng, 5.0, 10.0)
    corridor = make_corridor(1.75)
    lead_v = float(rng.uniform(0.0, max(ego.speed - 2.0, 0.5)))
    gap = float(rng.uniform(14.0, 30.0))
    obstacles = [_vehicle(gap, 0.0, lead_v, 0.0)]
    return _scene(rng, ego, corridor, obstacles, NavCommand.MOVE_FORWARD, _desired(rng, ego))


def family_cut_in(rng) -> Scene:
    ego = _ego(rng, 6.0, 10.0)
    corridor = make_corridor(1.75)
    side = float(rng.choice([-1.0, 1.0]))
    x = float(rng.uniform(8.0, 20.0))
    vx = float(rng.uniform(max(ego.speed - 4.0, 1.0), ego.speed - 0.5))
    vy = -side * float(rng.uniform(0.6, 1.4))
    obstacles = [_vehicle(x, side * LANE_WIDTH, vx, vy)]
    return _scene(rng, ego, corridor, obstacles, NavCommand.MOVE_FORWARD, _desired(rng, ego))


def family_crossing_pedestrian(rng) -> Scene:
    ego = _ego(rng, 4.0, 9.0)
    hw = float(rng.choice([1.75, 2.5]))
    corridor = make_corridor(hw)
    side = float(rng.choice([-1.0, 1.0]))
    x = float(rng.uniform(12.0, 30.0))
    y = side * float(rng.uniform(3.5, 7.0))
    vy = -side * float(rng.uniform(1.0, 2.0))
    obstacles = [Obstacle(ObstacleKind.PEDESTRIAN, (x, y), (0.0, vy), PEDESTRIAN_EXTENT, math.atan2(vy, 0.0))]
    return _scene(rng, ego, corridor, obstacles, NavCommand.MOVE_FORWARD, _desired(rng, ego))


def family_unprotected_turn(rng) -> Scene:
    ego = _ego(rng, 3.0, 5.5)
    radius = float(rng.uniform(11.0, 16.0))
    corridor = make_corridor(2.0, turn_start=float(rng.uniform(3.0, 10.0)), turn_angle=math.pi / 2, radius=radius)
    x0 = float(rng.uniform(18.0, 40.0))
    v = float(rng.uniform(5.0, 9.0))
    obstacles = [_vehicle(x0, LANE_WIDTH, -v, 0.0)]
    desired = float(np.clip(ego.speed + rng.uniform(-0.5, 1.0), 3.0, 5.5))
    return _scene(rng, ego, corridor, obstacles, NavCommand.TURN_LEFT, desired)


def family_stop_line(rng) -> Scene:
    ego = _ego(rng, 3.0, 9.0)
    dist = float(rng.uniform(max(ego.speed**2 / 3.0, 6.0), 30.0))
    active = bool(rng.random() < 0.8)
    corridor = make_corridor(1.75)
    s0 = float(corridor.polyline.project(np.zeros((1, 2)))[0][0])
    corridor = replace(corridor, stop_line=StopLine(s0 + dist, active))
    return _scene(rng, ego, corridor, [], NavCommand.MOVE_FORWARD, _desired(rng, ego))


FAMILY_BUILDERS = {
    "straight": family_straight,
    "lead_vehicle": family_lead_vehicle,
    "cut_in": family_cut_in,
    "crossing_pedestrian": family_crossing_pedestrian,
    "unprotected_turn": family_unprotected_turn,
    "stop_line": family_stop_line,
}


# --- meta-action labels ----------------------------------------------------


def implied_speeds(traj: Trajectory, scene: Scene) -> np.ndarray:
    """Speeds v_0..v_8: the ego speed followed by per-step implied speeds."""
    pts = np.vstack([np.asarray(scene.ego.position, dtype=float)[None], traj.array])
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1) / DT
    return np.concatenate([[scene.ego.speed], steps])


def label_longitudinal(speeds: np.ndarray, window: int = 3) -> Longitudinal:
    if speeds[-1] < STOP_SPEED:
        return Longitudinal.STOP
    acc = np.diff(speeds) / DT
    means = np.convolve(acc, np.ones(window) / window, mode="valid")
    m = means[np.argmax(np.abs(means))]
    if m > ACCEL_THRESHOLD:
        return Longitudinal.ACCELERATE
    if m < -ACCEL_THRESHOLD:
        return Longitudinal.DECELERATE
    return Longitudinal.MAINTAIN


def _final_heading(traj: Trajectory, scene: Scene) -> float:
    pts = np.vstack([np.asarray(scene.ego.position, dtype=float)[None], traj.array])
    h = scene.ego.heading
    for d in np.diff(pts, axis=0):
        if np.hypot(*d) > 0.05:
            h = math.atan2(d[1], d[0])
    return h


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def label_lateral(traj: Trajectory, scene: Scene) -> Lateral:
    poly = scene.corridor.polyline
    pts = np.vstack([np.asarray(scene.ego.position, dtype=float)[None], traj.array[-1:]])
    _, lat, tang = poly.project(pts)
    dh = _wrap(_final_heading(traj, scene) - scene.ego.heading)
    branch = _wrap(float(tang[1] - tang[0]))
    lim = math.radians(TURN_DEG)
    if abs(dh) > lim and abs(branch) > lim and dh * branch > 0:
        return Lateral.TURN_LEFT if dh > 0 else Lateral.TURN_RIGHT
    shift = float(lat[1] - lat[0])
    if shift > CHANGE_OFFSET:
        return Lateral.CHANGE_LEFT
    if shift < -CHANGE_OFFSET:
        return Lateral.CHANGE_RIGHT
    return Lateral.KEEP


def label_meta_action(traj: Trajectory, scene: Scene) -> MetaAction:
    return MetaAction(label_longitudinal(implied_speeds(traj, scene)), label_lateral(traj, scene))


# --- corpus ----------------------------------------------------------------


def family_counts(count: int, family_mix: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of ``count`` over the mix."""
    if count < 1:
        raise ValueError("count must be >= 1")
    unknown = set(family_mix) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown families {sorted(unknown)}")
    if abs(sum(family_mix.values()) - 1.0) > 1e-9 or any(p < 0 for p in family_mix.values()):
        raise ValueError("family_mix must be a distribution summing to 1")
    fams = [f for f in FAMILIES if family_mix.get(f, 0.0) > 0]
    raw = {f: count * family_mix[f] for f in fams}
    counts = {f: int(math.floor(raw[f])) for f in fams}
    rest = count - sum(counts.values())
    order = sorted(fams, key=lambda f: (-(raw[f] - counts[f]), FAMILIES.index(f)))
    for f in order[:rest]:
        counts[f] += 1
    return counts


def uniform_mix() -> dict[str, float]:
    return {f: 1.0 / len(FAMILIES) for f in FAMILIES}


def _accept(scene: Scene, gt: Trajectory, cfg: MetricConfig) -> tuple[bool, list[str]]:
    if gt.degenerate:
        return False, []
    sc = score_batch(scene, gt, cfg)
    if sc.pdms[0] < EXPERT_MIN_PDMS:
        return False, []
    q, clamped = response.quantize_trajectory(gt)
    qs = score_batch(scene, q, cfg)
    if qs.pdms[0] < EXPERT_MIN_PDMS or qs.tlc[0] != 1:
        return False, []
    notes = [f"clamped waypoint displacement at step {i + 1}" for i in clamped]
    return True, notes


def generate_record(family: str, seed: int, index: int, cfg: MetricConfig | None = None) -> ScenarioRecord:
    cfg = cfg or MetricConfig()
    builder = FAMILY_BUILDERS[family]
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([seed, index, attempt])
        scene = with_reference_progress(builder(rng), cfg)
        gt = expert_plan(scene, cfg)
        ok, notes = _accept(scene, gt, cfg)
        if ok:
            return ScenarioRecord(
                scene=scene,
                gt_trajectory=gt,
                gt_meta=label_meta_action(gt, scene),
                scenario_id=f"{family}-{seed}-{index:05d}",
                family=family,
                log=tuple(notes),
            )
        log.debug("rejected %s scene seed=%d index=%d attempt=%d", family, seed, index, attempt)
    raise CorpusGenerationError(f"{family} scene {index}: expert failed {MAX_ATTEMPTS} consecutive attempts")


def _generate_job(args):
    return generate_record(*args)


def generate_corpus(
    count: int,
    family_mix: dict[str, float],
    seed: int,
    cfg: MetricConfig | None = None,
    workers: int = 1,
) -> list[ScenarioRecord]:
    counts = family_counts(count, family_mix)
    families = [f for f in FAMILIES for _ in range(counts.get(f, 0))]
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(families))
    jobs = [(families[j], seed, i, cfg) for i, j in enumerate(order)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_generate_job, jobs))
    return [_generate_job(j) for j in jobs]


def save_corpus(records: list[ScenarioRecord], directory: str | Path, seed: int, family_mix: dict[str, float] | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for rec in records:
        (d / f"{rec.scenario_id}.json").write_text(json.dumps(record_to_dict(rec), sort_keys=True, indent=1))
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "family_mix": family_mix,
        "scenario_ids": [r.scenario_id for r in records],
        "families": [r.family for r in records],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return d


def load_corpus(directory: str | Path) -> list[ScenarioRecord]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format {manifest.get('format_version')!r}")
    return [record_from_dict(json.loads((d / f"{sid}.json").read_text())) for sid in manifest["scenario_ids"]]


def corpus_hash(records: list[ScenarioRecord]) -> str:
    import hashlib

    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(record_to_dict(r), sort_keys=True).encode())
    return h.hexdigest()[:16]
