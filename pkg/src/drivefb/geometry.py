"""Planar geometry helpers shared by the planner and the scorer.

All functions broadcast over leading axes so that whole candidate lattices can
be checked in one call.
"""

from __future__ import annotations

import numpy as np

EGO_HALF_EXTENT = (2.4, 1.0)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def rotate(xy, angle):
    c, s = np.cos(angle), np.sin(angle)
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def boxes_overlap(ca, ha, ea, cb, hb, eb):
    """Separating-axis test for oriented rectangles.

    ``c*`` are centers (..., 2), ``h*`` headings (...), ``e*`` half extents
    (..., 2) given as (half length, half width). Touching boxes count as
    overlapping.
    """
    ca = np.asarray(ca, dtype=float)
    cb = np.asarray(cb, dtype=float)
    ea = np.asarray(ea, dtype=float)
    eb = np.asarray(eb, dtype=float)
    ha = np.asarray(ha, dtype=float)
    hb = np.asarray(hb, dtype=float)

    ua = np.stack([np.cos(ha), np.sin(ha)], axis=-1)
    va = np.stack([-np.sin(ha), np.cos(ha)], axis=-1)
    ub = np.stack([np.cos(hb), np.sin(hb)], axis=-1)
    vb = np.stack([-np.sin(hb), np.cos(hb)], axis=-1)
    d = cb - ca

    separated = np.zeros(np.broadcast_shapes(d.shape[:-1], ua.shape[:-1], ub.shape[:-1]), dtype=bool)
    for axis in (ua, va, ub, vb):
        ra = ea[..., 0] * np.abs(np.sum(ua * axis, -1)) + ea[..., 1] * np.abs(np.sum(va * axis, -1))
        rb = eb[..., 0] * np.abs(np.sum(ub * axis, -1)) + eb[..., 1] * np.abs(np.sum(vb * axis, -1))
        separated |= np.abs(np.sum(d * axis, -1)) > ra + rb
    return ~separated


class Polyline:
    """Arc-length parameterised polyline with point projection."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("polyline needs at least two points")
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("polyline points must be strictly increasing in arc length")
        self.points = pts
        self.seg = seg
        self.seg_len = seg_len
        self.seg_dir = seg / seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def project(self, xy):
        """Return (arc length, signed lateral offset, tangent angle) for points.

        Lateral offset is positive to the left of the travel direction. Points
        beyond either end are extrapolated along the end segments.
        """
        p = np.asarray(xy, dtype=float)
        flat = p.reshape(-1, 2)
        rel = flat[:, None, :] - self.points[None, :-1, :]
        t = np.sum(rel * self.seg_dir[None], axis=-1)
        t_clamped = np.clip(t, 0.0, self.seg_len[None])
        # allow extrapolation on the first and last segments
        t_clamped[:, 0] = np.minimum(t[:, 0], self.seg_len[0])
        t_clamped[:, -1] = np.maximum(t[:, -1], 0.0) if self.seg_len.size > 1 else t[:, -1]
        foot = self.points[None, :-1, :] + t_clamped[..., None] * self.seg_dir[None]
        dist = np.linalg.norm(flat[:, None, :] - foot, axis=-1)
        idx = np.argmin(dist, axis=1)
        rows = np.arange(flat.shape[0])
        along = self.cum[idx] + t_clamped[rows, idx]
        d = rel[rows, idx]
        u = self.seg_dir[idx]
        lateral = u[:, 0] * d[:, 1] - u[:, 1] * d[:, 0]
        tangent = np.arctan2(u[:, 1], u[:, 0])
        shape = p.shape[:-1]
        return along.reshape(shape), lateral.reshape(shape), tangent.reshape(shape)

    def interpolate(self, s):
        """Point and tangent angle at arc length ``s`` (extrapolating linearly)."""
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, self.seg_len.size - 1)
        local = s - self.cum[idx]
        xy = self.points[idx] + local[..., None] * self.seg_dir[idx]
        ang = np.arctan2(self.seg_dir[idx, 1], self.seg_dir[idx, 0])
        return xy, ang
