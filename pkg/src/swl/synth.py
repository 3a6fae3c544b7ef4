"""Synthetic egocentric scenes for the three localisation tasks.

Audio is rendered in the head frame with a cardioid-power gain per
microphone channel, so recovering world-frame source directions needs the
head pose. Visual frames show Gaussian blobs ("faces") at the projected
source positions, a little brighter while the source is active. Head motion
is a yaw random walk with mean-reverting pitch and roll; in the behaviour
task the head and eyes additionally turn toward the active speaker.

Every episode is a pure function of ``(SceneSpec, task, index)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import geom, warp
from .tokens import BehaviorKind

TASKS = ("ssl", "asl", "behavior")
HORIZONS_MS = (300, 500, 700)
BEHAVIOR_BIN_MS = 100
CONTEXT_MS = 700

_s = 1 / np.sqrt(3)
TETRAHEDRAL_AXES = ((_s, _s, _s), (_s, -_s, -_s), (-_s, _s, -_s), (-_s, -_s, _s))


@dataclass(frozen=True)
class SceneSpec:
    n_sources: int = 3
    frame_ms: float = 25.0
    window_ms: float = 200.0
    warmup_ms: float = 1500.0
    n_freq: int = 16
    mic_axes: tuple = TETRAHEDRAL_AXES
    kappa: float = 2.0
    noise: float = 0.05
    activity_prob: float = 0.5
    switch_ms: float = 0.0  # mean on/off run length; 0 keeps activity fixed over the window
    min_separation_deg: float = 40.0
    seats: tuple = ()  # world azimuths of fixed seats; empty places sources freely
    seat_jitter_deg: float = 3.0
    voice_jitter: float = 1.5  # per-episode spread of a seat's spectral centre, in bins
    head_yaw_deg: float = 40.0  # seated scenes: final head yaw drawn within ± this
    elevation_deg: float = 30.0  # sources at |elevation| <= this
    yaw_rate_deg: float = 90.0  # std of yaw angular velocity, deg/s
    pitch_deg: float = 10.0  # std of pitch excursion
    roll_deg: float = 3.0
    smoothness: float = 8.0
    max_step_deg: float = 10.0
    hfov: float = 90.0
    vfov: float = 90.0
    image_size: int = 32
    blob_sigma_deg: float = 5.0
    active_brightness: float = 1.0
    inactive_brightness: float = 0.75
    brightness_jitter: float = 0.1
    visual_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        axes = np.asarray(self.mic_axes, float)
        if axes.ndim != 2 or axes.shape[1] != 3 or len(axes) == 0:
            raise ValueError("need at least one microphone axis")
        if np.any(np.abs(np.linalg.norm(axes, axis=1) - 1) > 1e-6):
            raise ValueError("microphone axes must be unit norm")

    @property
    def camera(self):
        return warp.CameraModel(self.hfov, self.vfov, self.image_size, self.image_size)

    @property
    def window_frames(self):
        return int(round(self.window_ms / self.frame_ms))

    @property
    def dt(self):
        return self.frame_ms / 1000.0


SEATS = (-75.0, -45.0, -15.0, 15.0, 45.0, 75.0)

PRESETS = {
    # sources anywhere around the wearer, elevation spread
    "ssl": dict(window_ms=200.0, elevation_deg=30.0),
    "ssl_azimuth": dict(window_ms=200.0, elevation_deg=0.0),
    # seated conversation: fixed world seats with their own voices
    "asl_easy": dict(window_ms=300.0, seats=SEATS, yaw_rate_deg=150.0, noise=0.05,
                     inactive_brightness=0.7, brightness_jitter=0.1),
    "asl_hard": dict(window_ms=300.0, seats=SEATS, seat_jitter_deg=6.0, yaw_rate_deg=200.0, noise=0.3,
                     inactive_brightness=0.85, brightness_jitter=0.15),
    "behavior": dict(window_ms=float(CONTEXT_MS), elevation_deg=10.0, yaw_rate_deg=60.0),
}


def scene_preset(name, **overrides) -> SceneSpec:
    return SceneSpec(**{**PRESETS[name], **overrides})


@dataclass
class Episode:
    task: str
    poses: np.ndarray  # T×4 head orientation per audio frame
    mags: np.ndarray  # C×F×T
    source_dirs: np.ndarray  # S×3 world
    activity: np.ndarray  # S×T bool
    frame: np.ndarray | None = None  # H×W×3 at the last frame
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), int))  # u0, v0, u1, v1 (exclusive)
    box_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    box_sources: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    behavior_kinds: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    behavior_dirs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    behavior_bins: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    future: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 3)))  # kind × horizon × 3

    @property
    def n_frames(self):
        return len(self.poses)

    def active_sources(self):
        """Sources active for at least half of the window."""
        return self.activity.mean(axis=1) >= 0.5

    def gt_dirs(self):
        return self.source_dirs[self.active_sources()]


# --- motion --------------------------------------------------------------------


def _euler_quat(yaw, pitch, roll):
    qy = geom.quat_from_axis_angle(geom.UP, np.radians(yaw))
    qp = geom.quat_from_axis_angle(geom.LEFT, np.radians(-pitch))
    qr = geom.quat_from_axis_angle(geom.FORWARD, np.radians(roll))
    return geom.quat_mul(geom.quat_mul(qy, qp), qr)


def _motion(rng, T, smoothness, max_step_deg, dt, yaw_rate, pitch_std, roll_std, yaw_target=None, gain=0.0):
    """Yaw/pitch/roll tracks in degrees; yaw velocity is low-pass filtered noise."""
    yaw, pitch, roll = np.zeros(T), np.zeros(T), np.zeros(T)
    if np.isinf(smoothness):
        return yaw, pitch, roll
    a = smoothness / (1.0 + smoothness)
    drive = np.sqrt(max(1 - a * a, 0.0))
    w = np.zeros(3)
    sig = np.array([yaw_rate, pitch_std * 2.0, roll_std * 2.0])
    for t in range(1, T):
        w = a * w + drive * sig * rng.normal(size=3)
        step = w * dt
        step[1] -= 0.5 * dt * pitch[t - 1] * 4.0
        step[2] -= 0.5 * dt * roll[t - 1] * 4.0
        if yaw_target is not None and np.isfinite(yaw_target[t]):
            err = (yaw_target[t] - yaw[t - 1] + 180.0) % 360.0 - 180.0
            step[0] += gain * err * dt
        tot = np.abs(step).sum()
        if tot > max_step_deg:
            step *= max_step_deg / tot
        yaw[t] = yaw[t - 1] + step[0]
        pitch[t] = pitch[t - 1] + step[1]
        roll[t] = roll[t - 1] + step[2]
    return yaw, pitch, roll


def gen_trajectory(seed, T: int, smoothness: float = 8.0, max_step_deg: float = 10.0, dt: float = 0.025,
                   yaw_rate_deg: float = 90.0, pitch_deg: float = 10.0, roll_deg: float = 3.0) -> np.ndarray:
    """T×4 unit quaternions starting at identity.

    Angular velocity is AR(1)-filtered Gaussian noise; ``smoothness`` sets
    the filter memory and ``inf`` freezes the head. Consecutive poses differ
    by at most ``max_step_deg``.
    """
    if T < 1:
        raise ValueError("trajectory needs at least one pose")
    rng = np.random.default_rng(seed)
    yaw, pitch, roll = _motion(rng, T, smoothness, max_step_deg, dt, yaw_rate_deg, pitch_deg, roll_deg)
    return _euler_quat(yaw, pitch, roll)


# --- rendering -------------------------------------------------------------------


def channel_gains(scene: SceneSpec, poses, source_dirs):
    """C×S×T cardioid-power gains ((1 + cos θ) / 2)^κ in the head frame."""
    axes = np.asarray(scene.mic_axes, float)
    if len(axes) == 0:
        raise ValueError("no microphone channels")
    poses = np.asarray(poses, float)
    src = np.asarray(source_dirs, float)
    head = geom.quat_rotate(geom.quat_conj(poses)[None, :, :], src[:, None, :])  # S×T×3
    cos = np.einsum("cx,stx->cst", axes, head)
    return ((1.0 + cos) / 2.0) ** scene.kappa


def render_audio(scene: SceneSpec, poses, source_dirs, activity, spectra, rng=None, modulation=None):
    """C×F×T magnitudes: Σ_active gain_c · spectrum (+ |noise|)."""
    g = channel_gains(scene, poses, source_dirs)
    act = np.asarray(activity, float)
    if modulation is not None:
        act = act * modulation
    mags = np.einsum("cst,sf,st->cft", g, np.asarray(spectra, float), act)
    if scene.noise > 0 and rng is not None:
        mags = mags + np.abs(rng.normal(0.0, scene.noise, mags.shape))
    return mags


def render_visual(scene: SceneSpec, pose, source_dirs, active, rng=None, brightness=None):
    """Frame with a Gaussian blob per visible source, plus boxes.

    Returns (frame H×W×3, boxes K×4, box source indices K).
    """
    cam = scene.camera
    dirs = warp.pixel_directions(cam, pose)
    img = np.zeros((cam.height, cam.width))
    src = np.asarray(source_dirs, float)
    u, v, inside = warp.sphere_to_pixel(src, cam, pose)
    if brightness is None:
        brightness = np.where(active, scene.active_brightness, scene.inactive_brightness)
    half = 2.0 * scene.blob_sigma_deg * cam.width / cam.hfov
    boxes, which = [], []
    for s in np.nonzero(inside)[0]:
        ang = geom.great_circle_angle(dirs, src[s])
        img += brightness[s] * np.exp(-0.5 * (ang / scene.blob_sigma_deg) ** 2)
        box = [int(np.floor(u[s] - half)), int(np.floor(v[s] - half)),
               int(np.ceil(u[s] + half)), int(np.ceil(v[s] + half))]
        box = [max(box[0], 0), max(box[1], 0), min(box[2], cam.width), min(box[3], cam.height)]
        if box[2] > box[0] and box[3] > box[1]:
            boxes.append(box)
            which.append(s)
    if scene.visual_noise > 0 and rng is not None:
        img = img + rng.normal(0, scene.visual_noise, img.shape)
    frame = np.repeat(img[:, :, None], 3, axis=2)
    return frame, np.array(boxes, int).reshape(-1, 4), np.array(which, int)


# --- episodes ----------------------------------------------------------------------


def _place_sources(rng, scene, n, centre_yaw=None, spread=180.0):
    # greedy placement can paint itself into a corner, so restart from scratch
    for _ in range(200):
        out = []
        for _ in range(50):
            if len(out) == n:
                return np.array(out)
            az = rng.uniform(-spread, spread) + (0.0 if centre_yaw is None else centre_yaw)
            el = rng.uniform(-scene.elevation_deg, scene.elevation_deg)
            d = geom.latlon_to_vec(el, az)
            if all(geom.great_circle_angle(d, o) >= scene.min_separation_deg for o in out):
                out.append(d)
        if len(out) == n:
            return np.array(out)
    raise ValueError("could not place sources with the requested separation")


def _spectra(rng, scene, n, centre=None):
    f = np.arange(scene.n_freq)
    if centre is None:
        centre = rng.uniform(0, scene.n_freq - 1, n)
    width = rng.uniform(1.5, 4.0, n)
    level = rng.uniform(0.7, 1.2, n)
    return level[:, None] * np.exp(-0.5 * ((f[None] - centre[:, None]) / width[:, None]) ** 2)


def seat_voices(scene: SceneSpec):
    """Spectral centre of each seat's voice, fixed for the whole scene."""
    rng = np.random.default_rng([scene.seed, 991])
    return rng.permutation(np.linspace(1.0, scene.n_freq - 2.0, len(scene.seats)))


def _seated_sources(rng, scene):
    if scene.n_sources > len(scene.seats):
        raise ValueError("more sources than seats")
    pick = np.sort(rng.choice(len(scene.seats), scene.n_sources, replace=False))
    az = np.asarray(scene.seats, float)[pick] + rng.uniform(-1, 1, len(pick)) * scene.seat_jitter_deg
    el = rng.uniform(-1, 1, len(pick)) * scene.seat_jitter_deg
    centre = seat_voices(scene)[pick] + rng.normal(0, scene.voice_jitter, len(pick))
    return geom.latlon_to_vec(el, az), _spectra(rng, scene, len(pick), centre)


def _activity(rng, scene, n, T):
    on = rng.random(n) < scene.activity_prob
    if not on.any():
        on[rng.integers(n)] = True
    if scene.switch_ms <= 0:
        return np.repeat(on[:, None], T, axis=1)
    # two-state Markov turn taking, started in the drawn state at the window end
    flip = rng.random((n, T)) < scene.frame_ms / scene.switch_ms
    act = np.empty((n, T), bool)
    act[:, -1] = on
    for t in range(T - 2, -1, -1):
        act[:, t] = act[:, t + 1] ^ flip[:, t]
    return act


def _rng(scene, task, index):
    return np.random.default_rng([scene.seed, TASKS.index(task), index])


def gen_episode(scene: SceneSpec, task: str, index: int = 0) -> Episode:
    """One labelled episode of the given task ("ssl", "asl" or "behavior")."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if scene.n_sources < 1:
        raise ValueError("localisation tasks need at least one source")
    if task == "behavior":
        return _behavior_episode(scene, index)
    rng = _rng(scene, task, index)
    T = scene.window_frames
    warm = int(round(scene.warmup_ms / scene.frame_ms))
    yaw, pitch, roll = _motion(rng, warm + T, scene.smoothness, scene.max_step_deg, scene.dt,
                               scene.yaw_rate_deg, scene.pitch_deg, scene.roll_deg)
    poses = _euler_quat(yaw, pitch, roll)[warm:]
    if task == "ssl":
        src = _place_sources(rng, scene, scene.n_sources)
    else:
        src = _place_sources(rng, scene, scene.n_sources, centre_yaw=yaw[-1], spread=70.0)
    act = _activity(rng, scene, scene.n_sources, T)
    spectra = _spectra(rng, scene, scene.n_sources)
    if scene.seats and task == "asl":
        src, spectra = _seated_sources(rng, scene)
        yaw = yaw - yaw[-1] + rng.uniform(-scene.head_yaw_deg, scene.head_yaw_deg)
        poses = _euler_quat(yaw, pitch, roll)[warm:]
    mod = rng.uniform(0.7, 1.0, act.shape)
    mags = render_audio(scene, poses, src, act, spectra, rng, mod)
    ep = Episode(task, poses, mags, src, act)
    if task == "asl":
        bright = np.where(act[:, -1], scene.active_brightness, scene.inactive_brightness)
        bright = bright + rng.uniform(-scene.brightness_jitter, scene.brightness_jitter, len(bright))
        frame, boxes, which = render_visual(scene, poses[-1], src, act[:, -1], rng, bright)
        ep.frame, ep.boxes, ep.box_sources = frame, boxes, which
        ep.box_labels = act[which, -1].astype(bool)
    return ep


def _behavior_episode(scene: SceneSpec, index: int) -> Episode:
    rng = _rng(scene, "behavior", index)
    step = scene.frame_ms
    T = int(round(CONTEXT_MS / step))
    fut = int(round(max(HORIZONS_MS) / step))
    warm = int(round(scene.warmup_ms / step))
    total = warm + T + fut
    src = _place_sources(rng, scene, scene.n_sources, spread=120.0)
    src_az = np.degrees(np.arctan2(src[:, 1], src[:, 0]))
    # speaker turns: one active talker at a time, switching at random
    talker = np.empty(total, int)
    cur = rng.integers(scene.n_sources)
    for t in range(total):
        if rng.random() < step / 600.0:
            cur = rng.integers(scene.n_sources)
        talker[t] = cur
    lag = int(round(250 / step))
    target = src_az[talker[np.maximum(np.arange(total) - lag, 0)]]
    yaw, pitch, roll = _motion(rng, total, scene.smoothness, scene.max_step_deg, scene.dt,
                               scene.yaw_rate_deg * 0.3, scene.pitch_deg, scene.roll_deg,
                               yaw_target=target, gain=4.0)
    quats = _euler_quat(yaw, pitch, roll)
    # eyes lead the head toward the talker
    err = (src_az[talker] - yaw + 180.0) % 360.0 - 180.0
    eye_yaw = np.clip(0.8 * err, -30, 30)
    eye_pitch = np.zeros(total)
    ey, ep_ = 0.0, 0.0
    for t in range(total):
        ey = 0.9 * ey + 0.1 * eye_yaw[t] + rng.normal(0, 0.5)
        ep_ = 0.95 * ep_ + rng.normal(0, 0.5)
        eye_yaw[t], eye_pitch[t] = ey, ep_
    gaze = geom.quat_rotate(quats, geom.latlon_to_vec(eye_pitch, eye_yaw))
    orient = geom.quat_rotate(quats, geom.FORWARD)
    heading = np.zeros(total)
    h = 0.0
    alpha = step / 500.0
    for t in range(total):
        h += alpha * (((yaw[t] - h) + 180.0) % 360.0 - 180.0)
        heading[t] = h
    traj = geom.latlon_to_vec(np.zeros(total), heading)
    tracks = {BehaviorKind.GAZE: gaze, BehaviorKind.ORIENTATION: orient, BehaviorKind.TRAJECTORY: traj}

    now = warm + T - 1
    sl = slice(warm, warm + T)
    poses = quats[sl]
    act = np.zeros((scene.n_sources, total), bool)
    act[talker, np.arange(total)] = True
    spectra = _spectra(rng, scene, scene.n_sources)
    mags = render_audio(scene, poses, src, act[:, sl], spectra, rng, rng.uniform(0.7, 1.0, (scene.n_sources, T)))
    frame, _, _ = render_visual(scene, quats[now], src, act[:, now], rng)

    bin_frames = int(round(BEHAVIOR_BIN_MS / step))
    n_bins = CONTEXT_MS // BEHAVIOR_BIN_MS
    kinds, dirs, bins = [], [], []
    for k in BehaviorKind:
        for b in range(n_bins):
            kinds.append(int(k))
            dirs.append(tracks[k][now - b * bin_frames])
            bins.append(b)
    future = np.array([[tracks[k][now + int(round(hz / step))] for hz in HORIZONS_MS] for k in BehaviorKind])
    return Episode("behavior", poses, mags, src, act[:, sl], frame=frame,
                   behavior_kinds=np.array(kinds), behavior_dirs=np.array(dirs),
                   behavior_bins=np.array(bins), future=future)


def gen_dataset(scene: SceneSpec, task: str, n: int, start: int = 0):
    return [gen_episode(scene, task, start + i) for i in range(n)]


# --- dataset files ------------------------------------------------------------------

DATA_MAGIC = b"SWLDATA v1\n"
_ARRAYS = ("poses", "mags", "source_dirs", "activity", "frame", "boxes", "box_labels", "box_sources",
           "behavior_kinds", "behavior_dirs", "behavior_bins", "future")


def _scene_to_dict(scene):
    d = asdict(scene)
    d["mic_axes"] = [list(a) for a in scene.mic_axes]
    return d


def scene_from_dict(d):
    d = dict(d)
    d["mic_axes"] = tuple(tuple(a) for a in d["mic_axes"])
    d["seats"] = tuple(d.get("seats", ()))
    return SceneSpec(**{f.name: d[f.name] for f in fields(SceneSpec) if f.name in d})


def save_dataset(path, episodes, scene: SceneSpec, task: str):
    """Length-prefixed npz records plus a ``<path>.manifest`` text file."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        for ep in episodes:
            buf = io.BytesIO()
            arrays = {k: getattr(ep, k) for k in _ARRAYS if getattr(ep, k) is not None}
            np.savez(buf, task=np.array(ep.task), **arrays)
            payload = buf.getvalue()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    manifest = {"task": task, "episodes": len(episodes), "seed": scene.seed, "scene": _scene_to_dict(scene)}
    Path(str(path) + ".manifest").write_text(
        "\n".join(f"{k} = {json.dumps(v)}" for k, v in manifest.items()) + "\n")


def read_manifest(path):
    out = {}
    for line in Path(str(path) + ".manifest").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = json.loads(v)
    return out


def load_dataset(path):
    """(episodes, manifest) from a dataset file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(DATA_MAGIC):
        raise ValueError(f"{path}: not an SWLDATA v1 file")
    pos = len(DATA_MAGIC)
    eps = []
    while pos < len(raw):
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        with np.load(io.BytesIO(raw[pos:pos + n])) as z:
            kw = {k: z[k] for k in z.files if k != "task"}
            eps.append(Episode(task=str(z["task"]), **kw))
        pos += n
    return eps, read_manifest(path)


__all__ = ["SceneSpec", "Episode", "gen_trajectory", "render_audio", "render_visual", "gen_episode",
           "gen_dataset", "save_dataset", "load_dataset", "scene_preset", "replace"]
