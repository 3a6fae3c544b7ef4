"""Explicit world-locking: FOV frames <-> world-locked equirectangular panoramas.

Camera rays follow the equiangular pinhole mapping: the pixel at continuous
image position (u, v) looks along ``(1, -tan(a_h), -tan(a_v))`` in the head
frame with ``a_h = hfov * (u / W - 0.5)`` and ``a_v = vfov * (v / H - 0.5)``,
i.e. image right is -y and image down is -z. Pixel centres sit at
half-integer positions.

Panorama rows run from the north pole (row 0) to the south pole, columns
from longitude -180° to 180°.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom


@dataclass(frozen=True)
class CameraModel:
    hfov: float = 90.0
    vfov: float = 60.0
    width: int = 96
    height: int = 64

    def __post_init__(self):
        if not (0 < self.hfov < 180 and 0 < self.vfov < 180):
            raise ValueError("fields of view must lie in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera needs at least one pixel")


@dataclass
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: geom.IDENTITY.copy())
    timestamp: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # carried, never used

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, float)
        if self.rotation.shape != (4,):
            raise ValueError(f"pose rotation must be a (w, x, y, z) quaternion, got shape {self.rotation.shape}")
        geom.check_unit_quat(self.rotation)


@dataclass
class Panorama:
    radius: float
    image: np.ndarray
    mask: np.ndarray

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def pano_shape(radius):
    return int(round(np.pi * radius)), int(round(2 * np.pi * radius))


def _rot(pose):
    return pose.rotation if isinstance(pose, Pose) else np.asarray(pose, float)


# --- camera rays -------------------------------------------------------------


def ray_direction(u, v, cam: CameraModel):
    """Head-frame unit ray at continuous image coordinates (column u, row v)."""
    ah = np.radians(cam.hfov) * (np.asarray(u, float) / cam.width - 0.5)
    av = np.radians(cam.vfov) * (np.asarray(v, float) / cam.height - 0.5)
    d = np.stack([np.ones_like(ah), -np.tan(ah), -np.tan(av)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_to_sphere(i, j, cam: CameraModel, pose) -> np.ndarray:
    """World-locked direction of pixel (row i, column j)."""
    i, j = np.asarray(i), np.asarray(j)
    if np.any(i < 0) or np.any(i >= cam.height) or np.any(j < 0) or np.any(j >= cam.width):
        raise IndexError(f"pixel ({i}, {j}) outside {cam.height}×{cam.width} frame")
    return geom.quat_rotate(_rot(pose), ray_direction(j + 0.5, i + 0.5, cam))


def pixel_directions(cam: CameraModel, pose) -> np.ndarray:
    """H×W×3 world directions of every pixel centre."""
    v, u = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    return geom.quat_rotate(_rot(pose), ray_direction(u, v, cam))


def sphere_to_pixel(g, cam: CameraModel, pose):
    """Continuous (u, v) image coordinates of world directions plus a visibility flag."""
    h = geom.quat_rotate(geom.quat_conj(_rot(pose)), np.asarray(g, float))
    front = h[..., 0] > 1e-12
    hx = np.where(front, h[..., 0], 1.0)
    ah = np.arctan(-h[..., 1] / hx)
    av = np.arctan(-h[..., 2] / hx)
    u = (ah / np.radians(cam.hfov) + 0.5) * cam.width
    v = (av / np.radians(cam.vfov) + 0.5) * cam.height
    inside = front & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    return u, v, inside


# --- panorama coordinates --------------------------------------------------


def direction_to_map(g, height, width):
    """Continuous (row, column) in a height×width lat-lon map."""
    g = np.asarray(g, float)
    lat = np.arctan2(g[..., 2], np.hypot(g[..., 0], g[..., 1]))
    lon = np.arctan2(g[..., 1], g[..., 0])
    return (np.pi / 2 - lat) * height / np.pi, (lon + np.pi) * width / (2 * np.pi)


def map_directions(height, width):
    """height×width×3 directions of lat-lon map pixel centres."""
    lat = np.pi / 2 - (np.arange(height) + 0.5) * np.pi / height
    lon = (np.arange(width) + 0.5) * 2 * np.pi / width - np.pi
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], -1)


def sphere_to_pano(g, radius):
    """Continuous panorama (X row, Y column) for a panorama of the given radius."""
    h, w = pano_shape(radius)
    return direction_to_map(g, h, w)


# --- bilinear sampling -----------------------------------------------------


def _bilinear_taps(x, y, height, width, wrap_cols):
    """Four (row, col, weight) taps for continuous pixel coordinates (centres at +0.5)."""
    x = np.asarray(x, float) - 0.5
    y = np.asarray(y, float) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(int)
    y0 = y0.astype(int)
    taps = []
    for dx, wx in ((0, 1 - fx), (1, fx)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            r = np.clip(x0 + dx, 0, height - 1)
            c = (y0 + dy) % width if wrap_cols else np.clip(y0 + dy, 0, width - 1)
            taps.append((r, c, wx * wy))
    return taps


def map_sampling_matrix(dirs, height, width):
    """Dense (M × height·width) bilinear interpolation matrix for M directions.

    Longitude wraps, latitude clamps at the poles.
    """
    dirs = np.asarray(dirs, float).reshape(-1, 3)
    x, y = direction_to_map(dirs, height, width)
    m = np.zeros((len(dirs), height * width))
    rows = np.arange(len(dirs))
    for r, c, w in _bilinear_taps(x, y, height, width, True):
        np.add.at(m, (rows, r * width + c), w)
    return m


# --- warping ---------------------------------------------------------------


def warp_fov_to_pano(frame, cam: CameraModel, pose, radius) -> Panorama:
    """Inverse-map a FOV frame into a world-locked panorama.

    Every panorama pixel whose direction falls inside the posed frustum is
    bilinearly sampled from the frame; the rest stays zero and unmasked.
    """
    if radius < 4:
        raise ValueError("panorama radius must be at least 4")
    frame = np.asarray(frame, float)
    if frame.shape[:2] != (cam.height, cam.width):
        raise ValueError(f"frame {frame.shape[:2]} does not match camera {cam.height}×{cam.width}")
    h, w = pano_shape(radius)
    g = map_directions(h, w)
    u, v, inside = sphere_to_pixel(g, cam, pose)
    chan = frame.shape[2:]
    out = np.zeros((h, w) + chan)
    taps = _bilinear_taps(v[inside], u[inside], cam.height, cam.width, False)
    vals = sum(wt.reshape((-1,) + (1,) * len(chan)) * frame[r, c] for r, c, wt in taps)
    out[inside] = vals
    return Panorama(float(radius), out, inside)


def accumulate(panos):
    """Overwrite-latest composition of per-frame panoramas."""
    panos = list(panos)
    img = np.zeros_like(panos[0].image)
    mask = np.zeros_like(panos[0].mask)
    for p in panos:
        img[p.mask] = p.image[p.mask]
        mask |= p.mask
    return Panorama(panos[0].radius, img, mask)


def sample_map(values, mask, dirs):
    """Bilinearly sample a lat-lon map at directions; returns (samples, valid)."""
    values = np.asarray(values, float)
    h, w = values.shape[:2]
    x, y = direction_to_map(dirs, h, w)
    out = 0.0
    valid = np.ones(x.shape, bool)
    chan = values.shape[2:]
    for r, c, wt in _bilinear_taps(x, y, h, w, True):
        out = out + wt.reshape(wt.shape + (1,) * len(chan)) * values[r, c]
        if mask is not None:
            valid &= mask[r, c] | (wt == 0)
    return out, valid


def sample_pano_at_fov(pano: Panorama, cam: CameraModel, pose):
    """Render the FOV view of a panorama: (H_v×W_v[×C] image, validity mask)."""
    return sample_map(pano.image, pano.mask, pixel_directions(cam, pose))


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(peak * peak / mse)
