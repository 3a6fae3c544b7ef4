"""Implicit world-locking: paired semantic embeddings and sphere positions.

Token sets are batched: semantics B×N×d, positions B×N×3. Tokens are
always ordered CLS, audio, visual, behavior so modality-wise operations can
work on contiguous slices.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import geom, warp
from . import numcore as nc


class Modality(IntEnum):
    CLS = 0
    AUDIO = 1
    VISUAL = 2
    BEHAVIOR = 3


MODALITY_NAMES = {m: m.name.lower() for m in Modality}


class BehaviorKind(IntEnum):
    GAZE = 0
    ORIENTATION = 1
    TRAJECTORY = 2


@dataclass
class BehaviorRecord:
    kind: BehaviorKind
    direction: np.ndarray
    time_offset: float  # seconds relative to the present, <= 0

    def __post_init__(self):
        if not isinstance(self.kind, BehaviorKind):
            try:
                self.kind = BehaviorKind[str(self.kind).upper()]
            except KeyError:
                raise ValueError(f"unknown behavior kind {self.kind!r}") from None
        self.direction = np.asarray(self.direction, float)
        if abs(np.linalg.norm(self.direction) - 1) > 1e-6:
            raise ValueError("behavior direction must be unit norm")


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # C×H×W
    poses: np.ndarray  # W×4, one per time frame

    def __post_init__(self):
        if self.magnitudes.ndim != 3:
            raise ValueError("spectrogram must be C×H×W")
        if self.poses is None or len(self.poses) != self.magnitudes.shape[2]:
            raise ValueError("need exactly one pose reference per time frame")
        if np.any(self.magnitudes < 0):
            raise ValueError("spectrogram magnitudes must be non-negative")


@dataclass
class TokenSet:
    semantics: nc.Tensor  # B×N×d
    positions: np.ndarray  # B×N×3
    counts: dict  # Modality -> count

    @property
    def n(self):
        return self.semantics.shape[1]

    @property
    def d(self):
        return self.semantics.shape[2]

    @property
    def batch(self):
        return self.semantics.shape[0]

    @property
    def tags(self):
        return np.concatenate([np.full(self.counts.get(m, 0), int(m)) for m in Modality]).astype(int)

    def segments(self):
        """(modality, start, stop) for every non-empty modality block."""
        out, start = [], 0
        for m in Modality:
            k = self.counts.get(m, 0)
            if k:
                out.append((m, start, start + k))
            start += k
        return out

    def count(self, m):
        return self.counts.get(m, 0)


def _single(m, semantics, positions):
    return TokenSet(semantics, np.asarray(positions, float), {m: semantics.shape[1]})


def make_cls_tokens(directions, W_c, b_c, batch: int = 1) -> TokenSet:
    """CLS tokens c_i = W_c p_i + b_c at the given sphere directions.

    ``directions`` is N_c×3 (shared across the batch) or B×N_c×3.
    """
    p = np.asarray(directions, float)
    if p.ndim == 2:
        p = np.broadcast_to(p, (batch,) + p.shape)
    if p.shape[1] == 0:
        raise ValueError("no CLS directions")
    if W_c.shape[1] != 3 or b_c.shape != (W_c.shape[0],):
        raise nc.ShapeError(f"CLS weights {W_c.shape}/{b_c.shape} do not match d×3 / d")
    sem = nc.add(nc.matmul(p, nc.transpose(W_c, (1, 0))), b_c)
    return _single(Modality.CLS, sem, p)


def audio_patches(mags, patch_width: int = 1, mono: bool = False):
    """B×C×H×W magnitudes -> B×N_a×(C·H·patch_width) flattened vertical patches."""
    mags = np.asarray(mags, float)
    if mono:
        mags = mags.mean(axis=1, keepdims=True)
    B, C, H, W = mags.shape
    if W % patch_width:
        raise ValueError(f"patch width {patch_width} does not divide {W} frames")
    n = W // patch_width
    x = mags.reshape(B, C, H, n, patch_width).transpose(0, 3, 1, 2, 4)
    return x.reshape(B, n, C * H * patch_width)


def audio_positions(poses, patch_width: int = 1):
    """Forward axis rotated by the pose at each patch centre; poses B×W×4."""
    poses = np.asarray(poses, float)
    if poses.ndim == 2:
        poses = poses[None]
    B, W, _ = poses.shape
    if W % patch_width:
        raise ValueError(f"patch width {patch_width} does not divide {W} frames")
    n = W // patch_width
    centre = np.arange(n) * patch_width + (patch_width - 1) / 2.0
    lo, hi = np.floor(centre).astype(int), np.ceil(centre).astype(int)
    q = np.empty((B, n, 4))
    for b in range(B):
        for k in range(n):
            q[b, k] = poses[b, lo[k]] if lo[k] == hi[k] else geom.slerp(poses[b, lo[k]], poses[b, hi[k]], 0.5)
    return geom.quat_rotate(q, geom.FORWARD)


def embed_audio(spec, weight, bias, patch_width: int = 1, mono: bool = False, use_pose: bool = True) -> TokenSet:
    """Linear projection of vertical spectrogram patches.

    ``spec`` is a Spectrogram or a (B×C×H×W magnitudes, B×W×4 poses) pair.
    Without pose every audio token sits on the identity forward axis.
    """
    if isinstance(spec, Spectrogram):
        mags, poses = spec.magnitudes[None], spec.poses[None]
    else:
        mags, poses = spec
        if poses is None:
            raise ValueError("audio embedding needs pose references")
    x = audio_patches(mags, patch_width, mono)
    if x.shape[-1] != weight.shape[0]:
        raise nc.ShapeError(f"audio patch size {x.shape[-1]} vs projection {weight.shape}")
    sem = nc.linear(x, weight, bias)
    if use_pose:
        pos = audio_positions(poses, patch_width)
    else:
        pos = np.broadcast_to(geom.FORWARD, x.shape[:2] + (3,))
    return _single(Modality.AUDIO, sem, pos)


VISUAL_STRIDE = 8


def conv_extractor(frames, layers):
    """Three stride-2, 2×2 conv layers with GELU between them.

    frames B×H×W×C; ``layers`` is a list of (weight (4·C_in)×C_out, bias).
    A 2×2 stride-2 convolution is a patch reshape followed by a matmul.
    """
    x = nc.as_tensor(frames)
    B, H, W, _ = x.shape
    if H % VISUAL_STRIDE or W % VISUAL_STRIDE:
        raise ValueError(f"frame {H}×{W} does not reduce to a token grid (needs multiples of {VISUAL_STRIDE})")
    for k, (w, b) in enumerate(layers):
        B, H, W, C = x.shape
        x = nc.reshape(x, (B, H // 2, 2, W // 2, 2, C))
        x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
        x = nc.reshape(x, (B, H // 2, W // 2, 4 * C))
        x = nc.linear(x, w, b)
        if k < len(layers) - 1:
            x = nc.gelu(x)
    return x


def visual_token_rays(cam: warp.CameraModel):
    """Head-frame rays through the centre of every stride-8 token patch (h×w×3)."""
    h, w = cam.height // VISUAL_STRIDE, cam.width // VISUAL_STRIDE
    v, u = np.meshgrid(np.arange(h) * VISUAL_STRIDE + VISUAL_STRIDE / 2,
                       np.arange(w) * VISUAL_STRIDE + VISUAL_STRIDE / 2, indexing="ij")
    return warp.ray_direction(u, v, cam)


def embed_visual(frames, cam: warp.CameraModel, poses, layers, use_pose: bool = True) -> TokenSet:
    """Conv features of B frames as tokens at their world-locked patch centres."""
    frames = np.asarray(frames, float)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.shape[1:3] != (cam.height, cam.width):
        raise ValueError(f"frames {frames.shape[1:3]} do not match camera {cam.height}×{cam.width}")
    feat = conv_extractor(frames, layers)
    B, h, w, d = feat.shape
    sem = nc.reshape(feat, (B, h * w, d))
    rays = visual_token_rays(cam).reshape(-1, 3)
    poses = np.asarray(poses, float).reshape(-1, 4)
    if use_pose:
        pos = geom.quat_rotate(poses[:, None, :], rays[None])
    else:
        pos = np.broadcast_to(rays, (B, h * w, 3))
    return _single(Modality.VISUAL, sem, pos)


N_KINDS = len(BehaviorKind)


def behavior_features(kinds, dirs, time_bins, n_time_bins):
    """One-hot design matrix whose product with the stacked behaviour
    parameters gives W_b[kind]·dir + b_b[kind] + time_emb[bin]."""
    kinds = np.asarray(kinds, int)
    dirs = np.asarray(dirs, float)
    bins = np.asarray(time_bins, int)
    if np.any(kinds < 0) or np.any(kinds >= N_KINDS):
        raise ValueError("unknown behavior kind")
    if np.any(bins < 0) or np.any(bins >= n_time_bins):
        raise ValueError("behavior time offset outside the embedding range")
    onehot = np.eye(N_KINDS)[kinds]
    kd = (onehot[..., :, None] * dirs[..., None, :]).reshape(kinds.shape + (3 * N_KINDS,))
    return np.concatenate([kd, onehot, np.eye(n_time_bins)[bins]], axis=-1)


def embed_behavior(kinds, dirs, time_bins, W_b, b_b, time_emb) -> TokenSet:
    """Behaviour tokens; W_b K×3×d, b_b K×d, time_emb T×d; inputs B×N_b."""
    kinds = np.asarray(kinds, int)
    if kinds.ndim == 1:
        kinds, dirs, time_bins = kinds[None], np.asarray(dirs)[None], np.asarray(time_bins)[None]
    dirs = np.asarray(dirs, float)
    d = W_b.shape[2]
    if kinds.shape[1] == 0:
        return _single(Modality.BEHAVIOR, nc.Tensor(np.zeros((kinds.shape[0], 0, d))), np.zeros((kinds.shape[0], 0, 3)))
    feats = behavior_features(kinds, dirs, time_bins, time_emb.shape[0])
    table = nc.concat([nc.reshape(W_b, (3 * N_KINDS, d)), b_b, time_emb], axis=0)
    return _single(Modality.BEHAVIOR, nc.matmul(feats, table), dirs)


def records_to_arrays(records, bin_seconds: float):
    """BehaviorRecords -> (kinds, dirs, time bins); bin = round(-offset / bin_seconds)."""
    kinds = np.array([int(r.kind) for r in records], int)
    dirs = np.array([r.direction for r in records], float).reshape(-1, 3)
    bins = np.array([int(round(-r.time_offset / bin_seconds)) for r in records], int)
    return kinds, dirs, bins


def assemble(cls=None, audio=None, visual=None, behavior=None) -> TokenSet:
    """Concatenate token parts in CLS/audio/visual/behavior order."""
    parts = [(m, p) for m, p in zip(Modality, (cls, audio, visual, behavior)) if p is not None and p.n > 0]
    if not parts:
        raise ValueError("assemble: no tokens")
    d = {p.d for _, p in parts}
    if len(d) != 1:
        raise nc.ShapeError(f"assemble: token widths differ {sorted(d)}")
    B = max(p.batch for _, p in parts)
    sems, poss, counts = [], [], {}
    for m, p in parts:
        s = p.semantics
        if p.batch != B:
            s = nc.add(s, np.zeros((B,) + s.shape[1:]))
        sems.append(s)
        poss.append(np.broadcast_to(p.positions, (B,) + p.positions.shape[1:]))
        counts[m] = p.n
    sem = sems[0] if len(sems) == 1 else nc.concat(sems, axis=1)
    return TokenSet(sem, np.concatenate(poss, axis=1), counts)
