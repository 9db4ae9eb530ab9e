"""Structured response grammar shared by the policy, rewards and teacher.

A canonical response is::

    THINK_OPEN <long> <lat> <obstacle> THINK_CLOSE ANS_OPEN <wp> x 8 ANS_CLOSE END

Waypoint tokens encode per-step displacements in the ego frame on a 0.5 m grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .scene import (
    DT,
    HORIZON_STEPS,
    LATERAL,
    LONGITUDINAL,
    MetaAction,
    ScenarioRecord,
    Scene,
    Trajectory,
)

MAX_LEN = 24

THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE, END = range(5)
SPECIAL_NAMES = ("THINK_OPEN", "THINK_CLOSE", "ANS_OPEN", "ANS_CLOSE", "END")

LONG_BASE = 5
LAT_BASE = LONG_BASE + len(LONGITUDINAL)  # 9

GRID_ROWS = 5  # forward bands of 8 m
GRID_COLS = 5  # lateral bands of 4 m
CELL_LEN = 8.0
CELL_WIDTH = 4.0
OBS_BASE = LAT_BASE + len(LATERAL)  # 14
NO_OBSTACLE = OBS_BASE + GRID_ROWS * GRID_COLS  # 39

DX_VALUES = np.round(np.arange(0.0, 12.0 + 1e-9, 0.5), 6)  # 25
DY_VALUES = np.round(np.arange(-3.0, 3.0 + 1e-9, 0.5), 6)  # 13
WP_BASE = NO_OBSTACLE + 1  # 40
GRID_STEP = 0.5
VOCAB_SIZE = WP_BASE + DX_VALUES.size * DY_VALUES.size  # 365

INTERACTION_RADIUS = 8.0  # m; obstacle-to-plan distance that counts as interacting


def long_token(v) -> int:
    return LONG_BASE + LONGITUDINAL.index(v)


def lat_token(v) -> int:
    return LAT_BASE + LATERAL.index(v)


def cell_token(row: int, col: int) -> int:
    return OBS_BASE + row * GRID_COLS + col


def waypoint_token(ix: int, iy: int) -> int:
    return WP_BASE + ix * DY_VALUES.size + iy


def waypoint_displacement(token: int) -> tuple[float, float]:
    k = token - WP_BASE
    ix, iy = divmod(k, DY_VALUES.size)
    return float(DX_VALUES[ix]), float(DY_VALUES[iy])


def is_long(t: int) -> bool:
    return LONG_BASE <= t < LAT_BASE


def is_lat(t: int) -> bool:
    return LAT_BASE <= t < OBS_BASE


def is_obstacle(t: int) -> bool:
    return OBS_BASE <= t <= NO_OBSTACLE


def is_waypoint(t: int) -> bool:
    return WP_BASE <= t < VOCAB_SIZE


def token_name(t: int) -> str:
    if t < LONG_BASE:
        return SPECIAL_NAMES[t]
    if is_long(t):
        return f"LONG_{LONGITUDINAL[t - LONG_BASE].value}"
    if is_lat(t):
        return f"LAT_{LATERAL[t - LAT_BASE].value}"
    if t == NO_OBSTACLE:
        return "NO_OBSTACLE"
    if is_obstacle(t):
        r, c = divmod(t - OBS_BASE, GRID_COLS)
        return f"CELL_{r}_{c}"
    if is_waypoint(t):
        dx, dy = waypoint_displacement(t)
        return f"WP_{dx:+.1f}_{dy:+.1f}"
    raise ValueError(f"token {t} outside vocabulary")


def vocabulary_table() -> list[dict]:
    return [{"id": t, "name": token_name(t)} for t in range(VOCAB_SIZE)]


def write_vocabulary(path) -> None:
    with open(path, "w") as fh:
        json.dump({"size": VOCAB_SIZE, "tokens": vocabulary_table()}, fh, indent=1)


# --- obstacle grid ---------------------------------------------------------


def obstacle_cell(xy) -> int:
    """Grid token for an ego-frame position, NO_OBSTACLE outside the grid."""
    x, y = float(xy[0]), float(xy[1])
    if not (0.0 <= x < GRID_ROWS * CELL_LEN):
        return NO_OBSTACLE
    half = GRID_COLS * CELL_WIDTH / 2.0
    if not (-half <= y <= half):
        return NO_OBSTACLE
    row = int(x // CELL_LEN)
    # bands [-10,-6) [-6,-2) [-2,2] (2,6] (6,10]; the centre band is closed
    if abs(y) <= CELL_WIDTH / 2.0:
        col = GRID_COLS // 2
    elif y < 0:
        col = GRID_COLS // 2 - int(np.ceil((-y - CELL_WIDTH / 2.0) / CELL_WIDTH))
    else:
        col = GRID_COLS // 2 + int(np.ceil((y - CELL_WIDTH / 2.0) / CELL_WIDTH))
    return cell_token(row, int(np.clip(col, 0, GRID_COLS - 1)))


def _to_ego(scene: Scene, xy) -> np.ndarray:
    d = np.asarray(xy, dtype=float) - np.asarray(scene.ego.position)
    c, s = np.cos(-scene.ego.heading), np.sin(-scene.ego.heading)
    return np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])


def key_obstacle_index(scene: Scene, traj: Trajectory) -> int | None:
    """Obstacle whose constant-velocity path comes closest to ``traj`` in time,
    if it comes within the interaction radius."""
    if not scene.obstacles:
        return None
    t = DT * np.arange(1, HORIZON_STEPS + 1)
    wp = traj.array
    best, best_d = None, INTERACTION_RADIUS
    for k, ob in enumerate(scene.obstacles):
        d = float(np.min(np.linalg.norm(ob.position_at(t) - wp, axis=-1)))
        if d < best_d or (best is None and d == best_d):
            best, best_d = k, d
    return best


def key_obstacle_cell(scene: Scene, traj: Trajectory) -> int:
    k = key_obstacle_index(scene, traj)
    if k is None:
        return NO_OBSTACLE
    return obstacle_cell(_to_ego(scene, scene.obstacles[k].position))


# --- trajectory quantisation ----------------------------------------------


def quantize_trajectory(traj: Trajectory) -> tuple[Trajectory, list[int]]:
    """Snap cumulative ego-frame positions to the 0.5 m grid.

    Rounding positions (not displacements) keeps every waypoint within a
    quarter metre of the original. Returns the snapped trajectory and the
    indices of steps whose displacement had to be clamped into the token range.
    """
    tokens, clamped = _waypoint_tokens(traj.array)
    disp = np.array([waypoint_displacement(t) for t in tokens])
    return Trajectory.from_array(np.cumsum(disp, axis=0)), clamped


def _waypoint_tokens(wp: np.ndarray) -> tuple[list[int], list[int]]:
    snapped = np.round(wp / GRID_STEP) * GRID_STEP
    prev = np.zeros(2)
    tokens, clamped = [], []
    for i, p in enumerate(snapped):
        dx, dy = p - prev
        cdx = float(np.clip(dx, DX_VALUES[0], DX_VALUES[-1]))
        cdy = float(np.clip(dy, DY_VALUES[0], DY_VALUES[-1]))
        if cdx != dx or cdy != dy:
            clamped.append(i)
        ix = int(round((cdx - DX_VALUES[0]) / GRID_STEP))
        iy = int(round((cdy - DY_VALUES[0]) / GRID_STEP))
        tokens.append(waypoint_token(ix, iy))
        prev = prev + np.array([DX_VALUES[ix], DY_VALUES[iy]])
    return tokens, clamped


def trajectory_tokens(traj: Trajectory) -> list[int]:
    return _waypoint_tokens(traj.array)[0]


def compose(meta: MetaAction, obstacle: int, waypoint_tokens: list[int]) -> list[int]:
    return (
        [THINK_OPEN, long_token(meta.longitudinal), lat_token(meta.lateral), obstacle, THINK_CLOSE, ANS_OPEN]
        + list(waypoint_tokens)
        + [ANS_CLOSE, END]
    )


def encode_gt(record: ScenarioRecord) -> list[int]:
    cell = key_obstacle_cell(record.scene, record.gt_trajectory)
    return compose(record.gt_meta, cell, trajectory_tokens(record.gt_trajectory))


# --- parsing ---------------------------------------------------------------


@dataclass(frozen=True)
class ParsedResponse:
    meta: MetaAction | None
    obstacle_cell: int | None
    trajectory: Trajectory
    well_formed_structure: bool
    well_formed_trajectory: bool
    n_waypoints: int = 0


def parse(tokens) -> ParsedResponse:
    """Total parser: malformed input yields flags, never an exception."""
    toks = [int(t) for t in list(tokens)[:MAX_LEN]]
    n = len(toks)

    def at(i):
        return toks[i] if i < n else None

    prefix_ok = (
        at(0) == THINK_OPEN
        and at(1) is not None and is_long(at(1))
        and at(2) is not None and is_lat(at(2))
        and at(3) is not None and is_obstacle(at(3))
        and at(4) == THINK_CLOSE
        and at(5) == ANS_OPEN
    )

    long_t = next((t for t in toks if is_long(t)), None)
    lat_t = next((t for t in toks if is_lat(t)), None)
    meta = None
    if long_t is not None and lat_t is not None:
        meta = MetaAction(LONGITUDINAL[long_t - LONG_BASE], LATERAL[lat_t - LAT_BASE])
    obstacle = next((t for t in toks if is_obstacle(t)), None)

    # answer region: after the first ANS_OPEN up to the first ANS_CLOSE after it
    start = toks.index(ANS_OPEN) + 1 if ANS_OPEN in toks else None
    close = None
    if start is not None:
        close = next((i for i in range(start, n) if toks[i] == ANS_CLOSE), None)
    region = toks[start:close] if start is not None else [t for t in toks if is_waypoint(t)]
    wps = [t for t in region if is_waypoint(t)]

    structure = bool(prefix_ok and close is not None and close + 1 < n and toks[close + 1] == END and close + 2 == n)
    traj_ok = bool(
        start is not None and close is not None and len(region) == HORIZON_STEPS and len(wps) == HORIZON_STEPS
    )

    disp = np.array([waypoint_displacement(t) for t in wps[:HORIZON_STEPS]]).reshape(-1, 2)
    if disp.shape[0] < HORIZON_STEPS:
        disp = np.vstack([disp, np.zeros((HORIZON_STEPS - disp.shape[0], 2))])
    return ParsedResponse(
        meta=meta,
        obstacle_cell=obstacle,
        trajectory=Trajectory.from_array(np.cumsum(disp, axis=0)),
        well_formed_structure=structure,
        well_formed_trajectory=traj_ok,
        n_waypoints=len(wps),
    )
