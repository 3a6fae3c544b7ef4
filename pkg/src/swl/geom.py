"""Quaternion algebra and spherical helpers.

Quaternions are numpy arrays ``(w, x, y, z)`` (Hamilton product). Vectors
live in a gravity-aligned frame: +x is the forward/optical axis at the
identity pose, +y points left, +z points up. Latitude is measured from the
xy-plane toward +z, longitude is ``atan2(y, x)``.

All functions accept a single item or a leading batch of them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

FORWARD = np.array([1.0, 0.0, 0.0])
LEFT = np.array([0.0, 1.0, 0.0])
UP = np.array([0.0, 0.0, 1.0])
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

UNIT_TOL = 1e-6


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / n


def quat_mul(a, b):
    """Hamilton product a ⊗ b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle_rad):
    axis = normalize(axis)
    half = 0.5 * np.asarray(angle_rad, float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def yaw_quat(deg):
    return quat_from_axis_angle(UP, np.radians(deg))


def check_unit_quat(q):
    n = np.linalg.norm(np.asarray(q, float), axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ValueError(f"quaternion is not unit norm (|q| = {np.ravel(n)[np.argmax(np.abs(np.ravel(n) - 1))]:.9g})")


def quat_rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q`` (q v q⁻¹)."""
    q = np.asarray(q, float)
    check_unit_quat(q)
    v = np.asarray(v, float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q):
    q = np.asarray(q, float)
    check_unit_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def slerp(q0, q1, t):
    q0, q1 = normalize(q0), normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 0.9995:
        return normalize(q0 + t * (q1 - q0))
    th = np.arccos(dot)
    return (np.sin((1 - t) * th) * q0 + np.sin(t * th) * q1) / np.sin(th)


def random_quat(rng, n=None):
    """Uniformly distributed rotations."""
    shape = (4,) if n is None else (n, 4)
    return normalize(rng.normal(size=shape))


def rotation_between(p_i, p_j):
    """Raw pairwise feature (1 + p_i·p_j, p_i × p_j); not normalized.

    Normalized, it is the rotation quaternion taking p_i onto p_j.
    Antipodal pairs give the zero vector.
    """
    p_i, p_j = np.asarray(p_i, float), np.asarray(p_j, float)
    dot = np.sum(p_i * p_j, axis=-1, keepdims=True)
    return np.concatenate([1.0 + dot, np.cross(p_i, p_j)], axis=-1)


def pairwise_rotation_features(positions):
    """N×N×4 (or B×N×N×4) table of ``rotation_between`` for all ordered pairs."""
    p = np.asarray(positions, float)
    return rotation_between(p[..., :, None, :], p[..., None, :, :])


def great_circle_angle(a, b):
    """Angle between unit vectors in degrees, in [0, 180]."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def latlon_to_vec(lat_deg, lon_deg):
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def vec_to_latlon(v):
    v = np.asarray(v, float)
    lat = np.degrees(np.arctan2(v[..., 2], np.hypot(v[..., 0], v[..., 1])))
    lon = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    return lat, lon


@dataclass(frozen=True)
class SphereGrid:
    """Lat-lon cell centres; row 0 is the southernmost row."""

    rows: int
    cols: int
    directions: np.ndarray  # rows × cols × 3

    @property
    def equator_row_index(self) -> int:
        return self.rows // 2

    @property
    def flat_directions(self):
        return self.directions.reshape(-1, 3)

    @property
    def latitudes(self):
        return (np.arange(self.rows) + 0.5) / self.rows * 180.0 - 90.0

    @property
    def longitudes(self):
        return (np.arange(self.cols) + 0.5) / self.cols * 360.0 - 180.0

    def cell_of(self, v):
        """Flat cell index containing each direction."""
        lat, lon = vec_to_latlon(v)
        r = np.clip(np.floor((lat + 90.0) / 180.0 * self.rows), 0, self.rows - 1).astype(int)
        c = np.floor((lon + 180.0) / 360.0 * self.cols).astype(int) % self.cols
        return r * self.cols + c


def make_grid(rows: int, cols: int) -> SphereGrid:
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}×{cols}")
    lat = (np.arange(rows) + 0.5) / rows * 180.0 - 90.0
    lon = (np.arange(cols) + 0.5) / cols * 360.0 - 180.0
    dirs = latlon_to_vec(lat[:, None] + 0 * lon[None, :], lon[None, :] + 0 * lat[:, None])
    dirs.setflags(write=False)
    return SphereGrid(rows, cols, dirs)


class NMSResult(NamedTuple):
    indices: np.ndarray
    directions: np.ndarray
    scores: np.ndarray
    underflow: bool


def sphere_nms(directions, scores, k: int, radius_deg: float) -> NMSResult:
    """Greedy spherical non-max suppression.

    Repeatedly keeps the best remaining candidate (lowest index on ties) and
    drops everything within ``radius_deg`` of it. ``underflow`` is set when
    fewer than ``k`` peaks survive.
    """
    d = np.asarray(directions, float).reshape(-1, 3)
    s = np.asarray(scores, float).reshape(-1)
    if len(s) == 0:
        raise ValueError("sphere_nms: no candidates")
    if k < 1 or radius_deg <= 0:
        raise ValueError("sphere_nms: need k >= 1 and radius > 0")
    order = np.argsort(-s, kind="stable")
    cos_r = np.cos(np.radians(radius_deg))
    alive = np.ones(len(s), bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        if len(keep) == k:
            break
        alive &= d @ d[i] < cos_r
    keep = np.array(keep, dtype=int)
    return NMSResult(keep, d[keep], s[keep], len(keep) < k)
