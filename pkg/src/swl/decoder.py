"""Decoders over the final-layer CLS tokens, training targets and the loss.

Sparse decoding scores each CLS token with a shared 2-layer MLP. Dense
decoding reshapes the CLS grid to an image (north row first) and upsamples
it with stride-2 transposed convolutions that wrap in longitude. Horizontal
decoding keeps only the equator band and upsamples along longitude with 1D
transposed convolutions; output channels become map rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import geom, warp
from . import numcore as nc


class Domain(str, Enum):
    SPARSE_GRID = "sparse_grid"
    SPARSE_POINT = "sparse_point"
    DENSE_PANO = "dense_pano"
    DENSE_FOV = "dense_fov"


@dataclass
class PredictionMap:
    domain: Domain
    scores: np.ndarray  # pre-sigmoid logits

    def __post_init__(self):
        self.domain = Domain(self.domain)
        self.scores = np.asarray(self.scores, float)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("prediction map has non-finite scores")


@dataclass(frozen=True)
class DecoderConfig:
    kind: str = "sparse_grid"  # sparse_grid | sparse_point | dense | horizontal
    hidden: int = 32
    out_dim: int = 1
    channels: int = 16
    stages: int = 2
    kernel: int = 3
    out_height: int = 20  # horizontal decoding: map rows produced from channels


def init_decoder(dcfg: DecoderConfig, d: int, rng, prefix="dec") -> dict:
    p = {}

    def put(name, shape, fan_in):
        p[name] = nc.parameter(rng.normal(0, 1 / np.sqrt(fan_in), shape), name)

    if dcfg.kind in ("sparse_grid", "sparse_point"):
        put(f"{prefix}.mlp1.W", (d, dcfg.hidden), d)
        p[f"{prefix}.mlp1.b"] = nc.parameter(np.zeros(dcfg.hidden))
        put(f"{prefix}.mlp2.W", (dcfg.hidden, dcfg.out_dim), dcfg.hidden)
        p[f"{prefix}.mlp2.b"] = nc.parameter(np.zeros(dcfg.out_dim))
    elif dcfg.kind in ("dense", "horizontal"):
        k = dcfg.kernel
        last = 1 if dcfg.kind == "dense" else dcfg.out_height
        chans = [d] + [dcfg.channels] * (dcfg.stages - 1) + [last]
        for s in range(dcfg.stages):
            ci, co = chans[s], chans[s + 1]
            shape = (ci, co, k, k) if dcfg.kind == "dense" else (ci, co, k)
            put(f"{prefix}.deconv{s}.W", shape, ci * (k if dcfg.kind == "horizontal" else k * k) / 4)
            p[f"{prefix}.deconv{s}.b"] = nc.parameter(np.zeros(co))
    else:
        raise ValueError(f"unknown decoder {dcfg.kind!r}")
    return p


def sparse_decode(cls, params, prefix="dec") -> nc.Tensor:
    """Pointwise MLP y_i = Linear(GELU(Linear(c_i))); B×N_c×out_dim logits."""
    h = nc.gelu(nc.linear(cls, params[f"{prefix}.mlp1.W"], params[f"{prefix}.mlp1.b"]))
    return nc.linear(h, params[f"{prefix}.mlp2.W"], params[f"{prefix}.mlp2.b"])


def point_decode(point_cls, params, prefix="dec") -> nc.Tensor:
    """Sparse-point decoding: the sparse MLP over CLS tokens placed at caller directions."""
    if point_cls.shape[1] == 0:
        raise ValueError("point decoding needs at least one direction")
    return sparse_decode(point_cls, params, prefix)


def _grid_image(cls, grid: geom.SphereGrid):
    """B×N_c×d (south row first) -> B×d×rows×cols with the north row first."""
    B, n, d = cls.shape
    if n != grid.rows * grid.cols:
        raise nc.ShapeError(f"{n} CLS tokens do not form a {grid.rows}×{grid.cols} grid")
    img = nc.transpose(nc.reshape(cls, (B, grid.rows, grid.cols, d)), (0, 3, 1, 2))
    return nc.take(img, (slice(None), slice(None), slice(None, None, -1)))


def dense_decode(cls, grid: geom.SphereGrid, params, dcfg: DecoderConfig, target="pano",
                 cam=None, poses=None, prefix="dec") -> nc.Tensor:
    """Deconvolve the CLS grid to a B×H'×W' panorama (or B×H_v×W_v FOV) logit map."""
    x = _grid_image(cls, grid)
    for s in range(dcfg.stages):
        x = nc.conv_transpose2d(x, params[f"{prefix}.deconv{s}.W"], params[f"{prefix}.deconv{s}.b"],
                                stride=2, circular_w=True)
        if s < dcfg.stages - 1:
            x = nc.gelu(x)
    pano = nc.reshape(x, (x.shape[0], x.shape[2], x.shape[3]))
    if target == "pano":
        return pano
    if target != "fov":
        raise ValueError(f"unknown dense target {target!r}")
    if cam is None or poses is None:
        raise ValueError("FOV decoding needs a camera and poses")
    return pano_to_fov(pano, cam, poses)


def pano_to_fov(pano, cam, poses) -> nc.Tensor:
    """Bilinear resampling of B×H'×W' panorama logits into B×H_v×W_v FOV maps."""
    pano = nc.as_tensor(pano)
    B, H, W = pano.shape
    poses = np.asarray(poses, float).reshape(B, 4)
    outs = []
    for b in range(B):
        m = warp.map_sampling_matrix(warp.pixel_directions(cam, poses[b]), H, W)
        flat = nc.reshape(nc.take(pano, (slice(b, b + 1),)), (H * W, 1))
        outs.append(nc.reshape(nc.matmul(m, flat), (1, cam.height, cam.width)))
    return outs[0] if B == 1 else nc.concat(outs, axis=0)


def horizontal_decode(equator_cls, params, dcfg: DecoderConfig, prefix="dec") -> nc.Tensor:
    """1D deconvolution along longitude; final channels are reinterpreted as map rows."""
    B, cols, d = equator_cls.shape
    if cols < 2:
        raise ValueError("horizontal decoding needs at least two equator tokens")
    x = nc.transpose(equator_cls, (0, 2, 1))
    for s in range(dcfg.stages):
        x = nc.conv_transpose1d(x, params[f"{prefix}.deconv{s}.W"], params[f"{prefix}.deconv{s}.b"],
                                stride=2, circular=True)
        if s < dcfg.stages - 1:
            x = nc.gelu(x)
    return x  # B×H'×W'


def bce_loss(pred, target) -> nc.Tensor:
    """Mean sigmoid binary cross entropy over all elements."""
    if isinstance(pred, PredictionMap):
        pred = nc.Tensor(pred.scores)
    return nc.bce_with_logits(pred, target)


# --- targets and map helpers -----------------------------------------------


def sparse_grid_targets(grid: geom.SphereGrid, gt_dirs) -> np.ndarray:
    """1 for every grid cell containing a ground-truth direction."""
    t = np.zeros(grid.rows * grid.cols)
    gt = np.asarray(gt_dirs, float).reshape(-1, 3)
    if len(gt):
        t[grid.cell_of(gt)] = 1.0
    return t


def disk_targets(height, width, gt_dirs, radius_deg=10.0) -> np.ndarray:
    """Hard disks of angular radius around each direction on a lat-lon map."""
    gt = np.asarray(gt_dirs, float).reshape(-1, 3)
    dirs = warp.map_directions(height, width)
    t = np.zeros((height, width))
    for g in gt:
        t[geom.great_circle_angle(dirs, g) <= radius_deg] = 1.0
    return t


def grid_to_map(logits, grid: geom.SphereGrid):
    """Sparse-grid logits (…×N_c) as a north-first rows×cols lat-lon map."""
    logits = np.asarray(logits, float)
    return logits.reshape(logits.shape[:-1] + (grid.rows, grid.cols))[..., ::-1, :]


def map_to_fov(pano_map, cam, pose):
    """Numpy bilinear FOV view of a single lat-lon logit map."""
    H, W = pano_map.shape
    m = warp.map_sampling_matrix(warp.pixel_directions(cam, pose), H, W)
    return (m @ pano_map.reshape(H * W, 1)).reshape(cam.height, cam.width)


# --- export ------------------------------------------------------------------


def save_prediction_raw(path, pred: PredictionMap, probability=False):
    """Three text header lines (domain, shape, logit|probability) then little-endian float64."""
    vals = 1 / (1 + np.exp(-pred.scores)) if probability else pred.scores
    header = f"{pred.domain.value}\n{','.join(map(str, vals.shape))}\n{'probability' if probability else 'logit'}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def load_prediction_raw(path):
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 3)
    domain, shape_s, kind = (x.decode() for x in lines[:3])
    shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
    vals = np.frombuffer(lines[3], dtype="<f8").reshape(shape).astype(float)
    return PredictionMap(Domain(domain), vals), kind


def save_heatmap_png(path, values):
    """8-bit grayscale heatmap, min-max normalised per map."""
    from PIL import Image

    v = np.asarray(values, float)
    lo, hi = v.min(), v.max()
    img = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
