"""Immutable scene data model and its JSON form."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import Polyline

HORIZON_STEPS = 8
DT = 0.5

Point = tuple[float, float]


class ObstacleKind(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    STATIC = "static"


class NavCommand(str, enum.Enum):
    MOVE_FORWARD = "MoveForward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"


class Longitudinal(str, enum.Enum):
    ACCELERATE = "Accelerate"
    DECELERATE = "Decelerate"
    MAINTAIN = "MaintainSpeed"
    STOP = "Stop"


class Lateral(str, enum.Enum):
    KEEP = "KeepLane"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    CHANGE_LEFT = "ChangeLeft"
    CHANGE_RIGHT = "ChangeRight"


LONGITUDINAL = tuple(Longitudinal)
LATERAL = tuple(Lateral)
FAMILIES = ("straight", "lead_vehicle", "cut_in", "crossing_pedestrian", "unprotected_turn", "stop_line")


def _pt(p) -> Point:
    return (float(p[0]), float(p[1]))


@dataclass(frozen=True)
class EgoState:
    position: Point = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0
    acceleration: float = 0.0

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("ego speed must be non-negative")
        if abs(self.acceleration) > 8.0:
            raise ValueError("|acceleration| must be <= 8 m/s^2")
        if not (-math.pi < self.heading <= math.pi):
            raise ValueError("heading must lie in (-pi, pi]")


@dataclass(frozen=True)
class Obstacle:
    kind: ObstacleKind
    position: Point
    velocity: Point
    half_extent: Point
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ObstacleKind(self.kind))
        if min(self.half_extent) <= 0:
            raise ValueError("half_extent components must be positive")
        if self.kind is ObstacleKind.PEDESTRIAN and math.hypot(*self.velocity) > 3.0 + 1e-9:
            raise ValueError("pedestrian speed must be <= 3 m/s")

    def position_at(self, t):
        """Constant-velocity position at time(s) ``t`` (seconds)."""
        t = np.asarray(t, dtype=float)
        return np.asarray(self.position) + t[..., None] * np.asarray(self.velocity)


@dataclass(frozen=True)
class StopLine:
    position: float  # arc length along the centerline
    active: bool


@dataclass(frozen=True)
class Corridor:
    centerline: tuple[Point, ...]
    half_width: float
    direction_tangents: tuple[Point, ...]
    stop_line: StopLine | None = None

    def __post_init__(self):
        if len(self.centerline) < 2:
            raise ValueError("centerline needs at least two points")
        if len(self.direction_tangents) != len(self.centerline):
            raise ValueError("one tangent per centerline point")
        if not (1.5 <= self.half_width <= 6.0):
            raise ValueError("half_width must lie in [1.5, 6.0]")
        steps = np.linalg.norm(np.diff(np.asarray(self.centerline), axis=0), axis=1)
        if np.any(steps <= 0) or np.any(steps > 2.0 + 1e-9):
            raise ValueError("centerline spacing must be in (0, 2] m")

    @cached_property
    def polyline(self) -> Polyline:
        return Polyline(self.centerline)


@dataclass(frozen=True)
class Scene:
    ego: EgoState
    obstacles: tuple[Obstacle, ...]
    corridor: Corridor
    goal: Point
    command: NavCommand
    history: tuple[Point, Point, Point]  # at t-1.5 s, t-1.0 s, t-0.5 s
    seed: int = 0
    # max centerline progress of any safe lattice plan; the progress denominator
    expert_progress: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "command", NavCommand(self.command))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if len(self.history) != 3:
            raise ValueError("history holds exactly three past positions")


@dataclass(frozen=True)
class Trajectory:
    waypoints: tuple[Point, ...]
    degenerate: bool = False

    def __post_init__(self):
        wp = tuple(_pt(p) for p in self.waypoints)
        if len(wp) != HORIZON_STEPS:
            raise ValueError(f"trajectory needs exactly {HORIZON_STEPS} waypoints, got {len(wp)}")
        if not all(math.isfinite(v) for p in wp for v in p):
            raise ValueError("waypoints must be finite")
        object.__setattr__(self, "waypoints", wp)

    @classmethod
    def from_array(cls, arr, degenerate: bool = False) -> "Trajectory":
        return cls(tuple(_pt(p) for p in np.asarray(arr, dtype=float)), degenerate)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=float)

    def max_step(self, origin: Point = (0.0, 0.0)) -> float:
        pts = np.vstack([np.asarray(origin, dtype=float)[None], self.array])
        return float(np.max(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


@dataclass(frozen=True)
class MetaAction:
    longitudinal: Longitudinal
    lateral: Lateral

    def __post_init__(self):
        object.__setattr__(self, "longitudinal", Longitudinal(self.longitudinal))
        object.__setattr__(self, "lateral", Lateral(self.lateral))


@dataclass(frozen=True)
class ScenarioRecord:
    scene: Scene
    gt_trajectory: Trajectory
    gt_meta: MetaAction
    scenario_id: str
    family: str
    log: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")


# --- JSON ------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    c = scene.corridor
    return {
        "ego": {
            "position": list(scene.ego.position),
            "heading": scene.ego.heading,
            "speed": scene.ego.speed,
            "acceleration": scene.ego.acceleration,
        },
        "obstacles": [
            {
                "kind": o.kind.value,
                "position": list(o.position),
                "velocity": list(o.velocity),
                "half_extent": list(o.half_extent),
                "heading": o.heading,
            }
            for o in scene.obstacles
        ],
        "corridor": {
            "centerline": [list(p) for p in c.centerline],
            "half_width": c.half_width,
            "direction_tangents": [list(p) for p in c.direction_tangents],
            "stop_line": None
            if c.stop_line is None
            else {"position": c.stop_line.position, "active": c.stop_line.active},
        },
        "goal": list(scene.goal),
        "command": scene.command.value,
        "history": [list(p) for p in scene.history],
        "seed": scene.seed,
        "expert_progress": scene.expert_progress,
    }


def scene_from_dict(d: dict) -> Scene:
    c = d["corridor"]
    sl = c.get("stop_line")
    return Scene(
        ego=EgoState(
            position=_pt(d["ego"]["position"]),
            heading=float(d["ego"]["heading"]),
            speed=float(d["ego"]["speed"]),
            acceleration=float(d["ego"]["acceleration"]),
        ),
        obstacles=tuple(
            Obstacle(
                kind=ObstacleKind(o["kind"]),
                position=_pt(o["position"]),
                velocity=_pt(o["velocity"]),
                half_extent=_pt(o["half_extent"]),
                heading=float(o["heading"]),
            )
            for o in d["obstacles"]
        ),
        corridor=Corridor(
            centerline=tuple(_pt(p) for p in c["centerline"]),
            half_width=float(c["half_width"]),
            direction_tangents=tuple(_pt(p) for p in c["direction_tangents"]),
            stop_line=None if sl is None else StopLine(float(sl["position"]), bool(sl["active"])),
        ),
        goal=_pt(d["goal"]),
        command=NavCommand(d["command"]),
        history=tuple(_pt(p) for p in d["history"]),
        seed=int(d["seed"]),
        expert_progress=None if d.get("expert_progress") is None else float(d["expert_progress"]),
    )


def trajectory_to_list(traj: Trajectory) -> list:
    return [list(p) for p in traj.waypoints]


def meta_to_dict(meta: MetaAction) -> dict:
    return {"longitudinal": meta.longitudinal.value, "lateral": meta.lateral.value}


def meta_from_dict(d: dict) -> MetaAction:
    return MetaAction(Longitudinal(d["longitudinal"]), Lateral(d["lateral"]))


def record_to_dict(rec: ScenarioRecord) -> dict:
    return {
        "scenario_id": rec.scenario_id,
        "family": rec.family,
        "scene": scene_to_dict(rec.scene),
        "gt_trajectory": {
            "waypoints": trajectory_to_list(rec.gt_trajectory),
            "degenerate": rec.gt_trajectory.degenerate,
        },
        "gt_meta": meta_to_dict(rec.gt_meta),
        "log": list(rec.log),
    }


def record_from_dict(d: dict) -> ScenarioRecord:
    gt = d["gt_trajectory"]
    return ScenarioRecord(
        scene=scene_from_dict(d["scene"]),
        gt_trajectory=Trajectory(tuple(_pt(p) for p in gt["waypoints"]), bool(gt.get("degenerate", False))),
        gt_meta=meta_from_dict(d["gt_meta"]),
        scenario_id=d["scenario_id"],
        family=d["family"],
        log=tuple(d.get("log", ())),
    )
