"""Full multisensory transformer: parameter set, episode batching and the forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import geom
from . import numcore as nc
from . import tokens as tk
from .synth import BEHAVIOR_BIN_MS, Episode
from .tokens import BehaviorKind

MODALITIES = ("pose", "audio_mono", "audio_multi", "visual", "behavior")
TIME_BINS = 8
VISUAL_CHANNELS = (8, 16)


@dataclass(frozen=True)
class ModelSpec:
    encoder: enc.EncoderConfig
    decoder: dec.DecoderConfig
    grid_rows: int = 5
    grid_cols: int = 10
    modalities: tuple = ("pose", "audio_multi")
    use_pose: bool = True
    audio_channels: int = 4
    n_freq: int = 16
    patch_width: int = 1

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("modality subset must be nonempty")
        bad = set(self.modalities) - set(MODALITIES)
        if bad:
            raise ValueError(f"unknown modalities {sorted(bad)}")
        if "audio_mono" in self.modalities and "audio_multi" in self.modalities:
            raise ValueError("choose one of audio_mono / audio_multi")

    @property
    def grid(self):
        return geom.make_grid(self.grid_rows, self.grid_cols)

    @property
    def audio(self):
        for m in ("audio_mono", "audio_multi"):
            if m in self.modalities:
                return m
        return None

    def cls_directions(self, point_dirs=None):
        if self.decoder.kind == "horizontal":
            g = self.grid
            return g.directions[g.equator_row_index]
        if self.decoder.kind == "sparse_point":
            return point_dirs
        return self.grid.flat_directions


def init_params(spec: ModelSpec, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d = spec.encoder.d
    p = {}

    def put(name, shape, fan_in):
        p[name] = nc.parameter(rng.normal(0, 1 / np.sqrt(fan_in), shape), name)

    put("cls.W", (d, 3), 3)
    p["cls.b"] = nc.parameter(np.zeros(d))
    if spec.audio:
        din = (1 if spec.audio == "audio_mono" else spec.audio_channels) * spec.n_freq * spec.patch_width
        put("audio.W", (din, d), din)
        put("audio.b", (d,), 1)
    if "visual" in spec.modalities:
        chans = (3,) + VISUAL_CHANNELS + (d,)
        for k in range(3):
            put(f"vis.{k}.W", (4 * chans[k], chans[k + 1]), 4 * chans[k])
            p[f"vis.{k}.b"] = nc.parameter(np.zeros(chans[k + 1]))
        # a random offset keeps patch brightness visible through the token layer norm
        put("vis.2.b", (d,), 1)
    if "pose" in spec.modalities or "behavior" in spec.modalities:
        put("beh.W", (tk.N_KINDS, 3, d), 3)
        p["beh.b"] = nc.parameter(np.zeros((tk.N_KINDS, d)))
        put("beh.time", (TIME_BINS, d), d)
    p.update(enc.init_encoder(spec.encoder, rng))
    p.update(dec.init_decoder(spec.decoder, d, rng))
    for name, t in p.items():
        t.name = name
    return p


@dataclass
class Batch:
    mags: np.ndarray  # B×C×F×T
    poses: np.ndarray  # B×T×4
    frames: np.ndarray | None
    beh_kinds: np.ndarray  # B×N_b
    beh_dirs: np.ndarray
    beh_bins: np.ndarray
    point_dirs: np.ndarray | None = None  # B×K×3

    @property
    def size(self):
        return len(self.poses)

    @property
    def last_poses(self):
        return self.poses[:, -1]


def pose_records(poses, frame_ms):
    """Orientation records every behaviour bin, newest first, from T×4 poses."""
    step = int(round(BEHAVIOR_BIN_MS / frame_ms))
    idx = np.arange(len(poses) - 1, -1, -step)[:TIME_BINS]
    dirs = geom.quat_rotate(poses[idx], geom.FORWARD)
    return np.full(len(idx), int(BehaviorKind.ORIENTATION)), dirs, np.arange(len(idx))


def target_frame(ep: Episode, spec: ModelSpec):
    """Rotation taking world directions into the frame the model predicts in.

    ASL predictions are evaluated on the FOV, so the head-locked variant
    predicts in the head frame of the last frame; everything else is world-locked.
    """
    if ep.task == "asl" and not spec.use_pose:
        return geom.quat_conj(ep.poses[-1])
    return geom.IDENTITY


def eval_pose(ep: Episode, spec: ModelSpec):
    """Pose at which the model's map is viewed through the camera."""
    if ep.task == "asl" and not spec.use_pose:
        return geom.IDENTITY
    return ep.poses[-1]


def make_batch(episodes, spec: ModelSpec, frame_ms: float, behavior_kinds=None) -> Batch:
    """Stack episodes; behaviour inputs are pose records and/or episode histories."""
    mags = np.stack([e.mags for e in episodes])
    poses = np.stack([e.poses for e in episodes])
    frames = None
    if "visual" in spec.modalities:
        if any(e.frame is None for e in episodes):
            raise ValueError("visual modality requested but episodes have no frames")
        frames = np.stack([e.frame for e in episodes])
    kinds, dirs, bins = [], [], []
    for e in episodes:
        ks, ds, bs = [], [], []
        if "pose" in spec.modalities:
            k, d, b = pose_records(e.poses, frame_ms)
            ks.append(k), ds.append(d), bs.append(b)
        if "behavior" in spec.modalities:
            keep = np.ones(len(e.behavior_kinds), bool)
            if behavior_kinds is not None:
                keep = np.isin(e.behavior_kinds, [int(k) for k in behavior_kinds])
            ks.append(e.behavior_kinds[keep]), ds.append(e.behavior_dirs[keep]), bs.append(e.behavior_bins[keep])
        kinds.append(np.concatenate(ks).astype(int) if ks else np.zeros(0, int))
        dirs.append(np.concatenate(ds).reshape(-1, 3) if ds else np.zeros((0, 3)))
        bins.append(np.concatenate(bs).astype(int) if bs else np.zeros(0, int))
    point = None
    if spec.decoder.kind == "sparse_point":
        point = np.stack([geom.quat_rotate(target_frame(e, spec), e.source_dirs) for e in episodes])
    return Batch(mags, poses, frames, np.stack(kinds), np.stack(dirs), np.stack(bins), point)


def build_tokens(params, spec: ModelSpec, batch: Batch, cam=None) -> tk.TokenSet:
    B = batch.size
    cls = tk.make_cls_tokens(spec.cls_directions(batch.point_dirs), params["cls.W"], params["cls.b"], B)
    audio = visual = beh = None
    if spec.audio:
        audio = tk.embed_audio((batch.mags, batch.poses), params["audio.W"], params["audio.b"],
                               spec.patch_width, spec.audio == "audio_mono", spec.use_pose)
    if "visual" in spec.modalities:
        layers = [(params[f"vis.{k}.W"], params[f"vis.{k}.b"]) for k in range(3)]
        visual = tk.embed_visual(batch.frames, cam, batch.last_poses, layers, spec.use_pose)
    if batch.beh_kinds.shape[1]:
        dirs = batch.beh_dirs if spec.use_pose else np.broadcast_to(geom.FORWARD, batch.beh_dirs.shape)
        beh = tk.embed_behavior(batch.beh_kinds, dirs, batch.beh_bins,
                                params["beh.W"], params["beh.b"], params["beh.time"])
    return tk.assemble(cls, audio, visual, beh)


def forward(params, spec: ModelSpec, batch: Batch, cam=None, keep=None) -> nc.Tensor:
    """Logits: B×N_c[×out] (sparse), B×K (point) or B×H'×W' (dense / horizontal)."""
    tokens = build_tokens(params, spec, batch, cam)
    out = enc.encode(tokens, spec.encoder, params, keep=keep)
    cls = enc.cls_outputs(out)
    kind = spec.decoder.kind
    if kind in ("sparse_grid", "sparse_point"):
        y = dec.sparse_decode(cls, params)
        if spec.decoder.out_dim == 1:
            y = nc.reshape(y, y.shape[:2])
        return y
    if kind == "dense":
        return dec.dense_decode(cls, spec.grid, params, spec.decoder)
    return dec.horizontal_decode(cls, params, spec.decoder)


def output_map_shape(spec: ModelSpec):
    """(rows, cols) of the lat-lon map a grid/dense/horizontal model produces."""
    k = spec.decoder.kind
    up = 2 ** spec.decoder.stages
    if k == "sparse_grid":
        return spec.grid_rows, spec.grid_cols
    if k == "dense":
        return spec.grid_rows * up, spec.grid_cols * up
    if k == "horizontal":
        return spec.decoder.out_height, spec.grid_cols * up
    raise ValueError(f"{k} decoding has no map output")


def logits_to_maps(logits: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """North-first lat-lon logit maps (B×H×W[×out]) from raw decoder output."""
    if spec.decoder.kind == "sparse_grid":
        if logits.ndim == 3:  # B×N_c×out
            m = logits.reshape(len(logits), spec.grid_rows, spec.grid_cols, -1)
            return m[:, ::-1]
        return dec.grid_to_map(logits, spec.grid)
    return logits


def map_targets(episodes, spec: ModelSpec, radius_deg: float) -> np.ndarray:
    """Training targets matching ``forward`` output for localisation tasks."""
    k = spec.decoder.kind
    out = []
    for e in episodes:
        rot = target_frame(e, spec)
        if k == "sparse_point":
            out.append(e.activity[:, -1].astype(float) if e.task == "asl" else e.active_sources().astype(float))
            continue
        active = e.activity[:, -1] if e.task == "asl" else e.active_sources()
        gt = geom.quat_rotate(rot, e.source_dirs[active])
        if k == "sparse_grid":
            out.append(dec.sparse_grid_targets(spec.grid, gt))
        else:
            h, w = output_map_shape(spec)
            out.append(dec.disk_targets(h, w, gt, radius_deg))
    return np.stack(out)
