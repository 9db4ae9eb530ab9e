"""Scene -> fixed-length feature vector for the policy.

The base block has 64 dims; feedback queries append a 32-dim block (see
``teacher``). Every raw quantity is divided by the scale listed in
``SCALES`` so features stay roughly within [-3, 3].
"""

from __future__ import annotations

import numpy as np

from .scene import NavCommand, ObstacleKind, Scene

BASE_DIM = 64
FEEDBACK_DIM = 32
FULL_DIM = BASE_DIM + FEEDBACK_DIM

SCALES = {
    "speed": 10.0,
    "accel": 3.0,
    "goal": 50.0,
    "obs_x": 30.0,
    "obs_y": 10.0,
    "obs_vx": 10.0,
    "obs_vy": 5.0,
    "obs_len": 3.0,
    "obs_wid": 2.0,
    "corr_offset": 10.0,
    "corr_heading": np.pi,
    "hist_x": 10.0,
    "hist_y": 5.0,
    "stop_dist": 30.0,
    "half_width": 4.0,
}

CORRIDOR_STATIONS = (5.0, 10.0, 15.0, 20.0, 30.0, 40.0)
N_OBSTACLES = 3
PREDICT_T = 2.0
_KINDS = tuple(ObstacleKind)
_COMMANDS = tuple(NavCommand)


def _ego_frame(scene: Scene, xy: np.ndarray) -> np.ndarray:
    d = np.asarray(xy, dtype=float) - np.asarray(scene.ego.position)
    c, s = np.cos(-scene.ego.heading), np.sin(-scene.ego.heading)
    return np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1)


def _ego_vec(scene: Scene, v) -> np.ndarray:
    c, s = np.cos(-scene.ego.heading), np.sin(-scene.ego.heading)
    v = np.asarray(v, dtype=float)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def scene_features(scene: Scene) -> np.ndarray:
    f = np.zeros(BASE_DIM)
    S = SCALES
    f[0] = scene.ego.speed / S["speed"]
    f[1] = scene.ego.acceleration / S["accel"]
    g = _ego_frame(scene, np.asarray(scene.goal))
    f[2:4] = g / S["goal"]
    f[4] = np.hypot(*g) / S["goal"]
    f[5 + _COMMANDS.index(scene.command)] = 1.0

    origin = np.asarray(scene.ego.position, dtype=float)
    obs = sorted(
        enumerate(scene.obstacles),
        key=lambda kv: (float(np.hypot(*(np.asarray(kv[1].position) - origin))), kv[0]),
    )[:N_OBSTACLES]
    for slot, (_, ob) in enumerate(obs):
        base = 8 + 9 * slot
        p = _ego_frame(scene, np.asarray(ob.position))
        v = _ego_vec(scene, ob.velocity)
        f[base : base + 2] = p / (S["obs_x"], S["obs_y"])
        f[base + 2 : base + 4] = v / (S["obs_vx"], S["obs_vy"])
        f[base + 4] = ob.half_extent[0] / S["obs_len"]
        f[base + 5] = ob.half_extent[1] / S["obs_wid"]
        f[base + 6 + _KINDS.index(ob.kind)] = 1.0
        q = _ego_frame(scene, ob.position_at(PREDICT_T))
        f[56 + 2 * slot : 58 + 2 * slot] = q / (S["obs_x"], S["obs_y"])

    poly = scene.corridor.polyline
    s0, lat0, _ = poly.project(origin[None])
    for j, ds in enumerate(CORRIDOR_STATIONS):
        xy, ang = poly.interpolate(np.array([s0[0] + ds]))
        e = _ego_frame(scene, xy[0])
        f[35 + j] = e[1] / S["corr_offset"]
        f[41 + j] = float((ang[0] - scene.ego.heading + np.pi) % (2 * np.pi) - np.pi) / S["corr_heading"]

    h = _ego_frame(scene, np.asarray(scene.history, dtype=float))
    f[47:53] = (h / (S["hist_x"], S["hist_y"])).ravel()

    sl = scene.corridor.stop_line
    if sl is not None and sl.active:
        f[53] = 1.0
        f[54] = (sl.position - s0[0]) / S["stop_dist"]
    f[55] = scene.corridor.half_width / S["half_width"]
    f[62] = lat0[0] / S["corr_offset"]
    f[63] = 1.0
    return f


def pad_base(feat: np.ndarray) -> np.ndarray:
    """Base features padded with a zero feedback block."""
    if feat.shape[-1] == FULL_DIM:
        return feat
    out = np.zeros(feat.shape[:-1] + (FULL_DIM,))
    out[..., :BASE_DIM] = feat
    return out
