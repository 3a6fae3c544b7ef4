"""Training, evaluation and ablation drivers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import decoder as dec
from .. import geom, warp
from .. import model as M
from .. import numcore as nc
from ..synth import HORIZONS_MS, Episode, SceneSpec
from ..tokens import BehaviorKind
from . import metrics
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Loss or a primitive went non-finite; the last good checkpoint was saved."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class Model:
    cfg: RunConfig
    spec: M.ModelSpec
    params: dict
    scene: SceneSpec

    @property
    def cam(self):
        return self.scene.camera


@dataclass
class TrainResult:
    model: Model
    curve: list = field(default_factory=list)  # (epoch, step, loss)

    def curve_text(self):
        rows = [f"{'epoch':>5} {'step':>6} {'loss':>12}"]
        rows += [f"{e:>5d} {s:>6d} {l:>12.6f}" for e, s, l in self.curve]
        return "\n".join(rows) + "\n"


def _check_task(cfg: RunConfig, episodes):
    if not episodes:
        raise ConfigError("empty dataset")
    tasks = {e.task for e in episodes}
    if tasks != {cfg.task}:
        raise ConfigError(f"dataset task {sorted(tasks)} does not match config task {cfg.task!r}")


def _behavior_heads(cfg):
    try:
        return [BehaviorKind[k.upper()] for k in cfg.behavior_targets]
    except KeyError as err:
        raise ConfigError(f"unknown behaviour target {err}") from None


def behavior_targets(episodes, spec: M.ModelSpec, heads) -> np.ndarray:
    """B×N_c×(heads·horizons) one-hot cell targets for future behaviour."""
    grid = spec.grid
    out = np.zeros((len(episodes), grid.rows * grid.cols, len(heads) * len(HORIZONS_MS)))
    for b, e in enumerate(episodes):
        for h, kind in enumerate(heads):
            cells = grid.cell_of(e.future[int(kind)])
            out[b, cells, h * len(HORIZONS_MS) + np.arange(len(HORIZONS_MS))] = 1.0
    return out


def _targets(cfg, spec, episodes):
    if cfg.task == "behavior":
        return behavior_targets(episodes, spec, _behavior_heads(cfg))
    return M.map_targets(episodes, spec, cfg.target_radius_deg)


def batch_loss(model: Model, episodes):
    spec = model.spec
    batch = M.make_batch(episodes, spec, model.scene.frame_ms)
    logits = M.forward(model.params, spec, batch, model.cam)
    return dec.bce_loss(logits, _targets(model.cfg, spec, episodes))


def dataset_loss(model: Model, episodes, batch_size=64) -> float:
    total = 0.0
    with nc.no_grad():
        for i in range(0, len(episodes), batch_size):
            chunk = episodes[i:i + batch_size]
            total += float(batch_loss(model, chunk).data) * len(chunk)
    return total / len(episodes)


def new_model(cfg: RunConfig, scene: SceneSpec) -> Model:
    cfg.validate()
    spec = cfg.model_spec(len(scene.mic_axes), scene.n_freq)
    return Model(cfg, spec, M.init_params(spec, cfg.seed), scene)


def train(cfg: RunConfig, episodes, scene: SceneSpec, checkpoint_path=None) -> TrainResult:
    """Adam on mean BCE; shuffling is seeded by ``cfg.seed``.

    On a non-finite loss the parameters from before the failing step are
    written to ``checkpoint_path`` (if given) and TrainingAborted is raised.
    """
    _check_task(cfg, episodes)
    model = new_model(cfg, scene)
    state = nc.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        for i in range(0, len(order), cfg.batch_size):
            chunk = [episodes[j] for j in order[i:i + cfg.batch_size]]
            good = {k: p.data.copy() for k, p in model.params.items()}
            try:
                loss = batch_loss(model, chunk)
                if not np.isfinite(loss.data):
                    raise nc.NumericError("loss is not finite")
                grads = nc.gradients(loss, model.params)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise nc.NumericError("non-finite gradient")
            except nc.NumericError as err:
                if checkpoint_path is not None:
                    nc.save_checkpoint(checkpoint_path, good)
                raise TrainingAborted(f"epoch {epoch} step {step}: {err}", checkpoint_path) from err
            nc.adam_step(state, model.params, grads)
            curve.append((epoch, step, float(loss.data)))
            step += 1
        log.info("epoch %d mean loss %.5f", epoch, np.mean([c[2] for c in curve if c[0] == epoch]))
    if checkpoint_path is not None:
        nc.save_checkpoint(checkpoint_path, model.params)
    return TrainResult(model, curve)


def load_model(cfg: RunConfig, scene: SceneSpec, checkpoint_path) -> Model:
    model = new_model(cfg, scene)
    stored = nc.load_checkpoint(checkpoint_path)
    missing = set(model.params) - set(stored)
    if missing:
        raise ConfigError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
    for k, p in model.params.items():
        if stored[k].shape != p.shape:
            raise ConfigError(f"checkpoint parameter {k} has shape {stored[k].shape}, expected {p.shape}")
        p.data = stored[k]
    return model


# --- prediction ------------------------------------------------------------------


def predict(model: Model, episodes, batch_size=64) -> np.ndarray:
    """Raw decoder logits for every episode, computed without the tape."""
    outs = []
    with nc.no_grad():
        for i in range(0, len(episodes), batch_size):
            chunk = episodes[i:i + batch_size]
            batch = M.make_batch(chunk, model.spec, model.scene.frame_ms)
            outs.append(M.forward(model.params, model.spec, batch, model.cam).data)
    return np.concatenate(outs)


def prediction_maps(model: Model, episodes, batch_size=64):
    """North-first lat-lon logit maps (B×H×W[×heads])."""
    return M.logits_to_maps(predict(model, episodes, batch_size), model.spec)


# --- evaluation -------------------------------------------------------------------


@dataclass
class EvalReport:
    metrics: dict
    per_episode: list
    fingerprint: str

    def text(self):
        w = max(len(k) for k in self.metrics) if self.metrics else 6
        lines = [f"{'metric':<{w}}  {'value':>10}"]
        lines += [f"{k:<{w}}  {v:>10.4f}" for k, v in self.metrics.items()]
        lines.append(f"{'config':<{w}}  {self.fingerprint:>10}")
        return "\n".join(lines) + "\n"

    def csv(self):
        return "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in self.metrics.items())

    def episodes_csv(self):
        if not self.per_episode:
            return ""
        keys = list(self.per_episode[0])
        return ",".join(keys) + "\n" + "".join(",".join(repr(r[k]) for k in keys) + "\n" for r in self.per_episode)


def _need_task(episodes, task):
    if not episodes or any(e.task != task for e in episodes):
        raise ConfigError(f"evaluation needs a {task} dataset")


def eval_map_fov(model: Model, episodes) -> EvalReport:
    """Box mAP: each box scores the max FOV logit inside it."""
    _need_task(episodes, "asl")
    if sum(len(e.boxes) for e in episodes) == 0:
        raise ValueError("dataset has no boxes")
    raw = predict(model, episodes)
    scores, labels, rows = [], [], []
    for n, e in enumerate(episodes):
        if not len(e.boxes):
            continue
        if model.spec.decoder.kind == "sparse_point":
            s = raw[n][e.box_sources]
        else:
            pano = M.logits_to_maps(raw[n:n + 1], model.spec)[0]
            fov = dec.map_to_fov(pano, model.cam, M.eval_pose(e, model.spec))
            s = metrics.box_scores(fov, e.boxes)
        scores.append(s)
        labels.append(e.box_labels)
        rows += [{"episode": n, "box": k, "score": float(s[k]), "label": int(e.box_labels[k])} for k in range(len(s))]
    ap = metrics.average_precision(np.concatenate(scores), np.concatenate(labels))
    return EvalReport({"mAP": ap}, rows, model.cfg.fingerprint())


def _map_dirs(model):
    h, w = M.output_map_shape(model.spec)
    return warp.map_directions(h, w).reshape(-1, 3)


def ssl_peaks(model: Model, episodes):
    """Per-window NMS peaks with k = number of active sources (windows with none are skipped)."""
    if model.spec.decoder.kind == "sparse_point":
        raise ConfigError("localisation peaks need a map decoder")
    maps = prediction_maps(model, episodes)
    dirs = _map_dirs(model)
    out = []
    for n, e in enumerate(episodes):
        gt = e.gt_dirs()
        if len(gt) == 0:
            continue
        res = geom.sphere_nms(dirs, maps[n].reshape(-1), len(gt), model.cfg.nms_radius_deg)
        out.append((n, gt, res))
    return out


def eval_mae(model: Model, episodes) -> EvalReport:
    _need_task(episodes, "ssl")
    rows = []
    for n, gt, res in ssl_peaks(model, episodes):
        g2p, p2g = metrics.bidirectional_mae(gt, res.directions)
        rows.append({"episode": n, "k": len(gt), "mae_g2p": g2p, "mae_p2g": p2g})
    if not rows:
        raise ValueError("no window with active sources")
    m = {"MAE_g2p": float(np.mean([r["mae_g2p"] for r in rows])),
         "MAE_p2g": float(np.mean([r["mae_p2g"] for r in rows]))}
    return EvalReport(m, rows, model.cfg.fingerprint())


def eval_spherical_map(model: Model, episodes, radii_deg=None) -> EvalReport:
    _need_task(episodes, "ssl")
    radii = list(model.cfg.spherical_radii if radii_deg is None else radii_deg)
    if not radii:
        raise ValueError("no radii given")
    peaks = ssl_peaks(model, episodes)
    p = [(r.directions, r.scores) for _, _, r in peaks]
    g = [gt for _, gt, _ in peaks]
    m = {f"sph_mAP@{r:g}": metrics.spherical_ap(p, g, r) for r in radii}
    return EvalReport(m, [], model.cfg.fingerprint())


def eval_behavior(model: Model, episodes) -> EvalReport:
    """MAE of the argmax cell per (kind, horizon) head."""
    _need_task(episodes, "behavior")
    heads = _behavior_heads(model.cfg)
    raw = predict(model, episodes)  # B×N_c×(heads·horizons)
    dirs = model.spec.grid.flat_directions
    err = np.zeros((len(episodes), len(heads), len(HORIZONS_MS)))
    for n, e in enumerate(episodes):
        for h, kind in enumerate(heads):
            for t in range(len(HORIZONS_MS)):
                pred = metrics.argmax_direction(raw[n, :, h * len(HORIZONS_MS) + t], dirs)
                err[n, h, t] = geom.great_circle_angle(pred, e.future[int(kind)][t])
    m = {}
    for h, kind in enumerate(heads):
        for t, hz in enumerate(HORIZONS_MS):
            m[f"{kind.name.lower()}@{hz}ms"] = float(err[:, h, t].mean())
    m["mean"] = float(err.mean())
    return EvalReport(m, [], model.cfg.fingerprint())


def behavior_table(report: EvalReport, heads=("gaze", "orientation", "trajectory")) -> str:
    """Kinds as columns, horizons as rows."""
    lines = [f"{'horizon':<8}" + "".join(f"{h:>13}" for h in heads)]
    for hz in HORIZONS_MS:
        lines.append(f"{str(hz) + 'ms':<8}" + "".join(f"{report.metrics[f'{h}@{hz}ms']:>13.2f}" for h in heads))
    return "\n".join(lines) + "\n"


def evaluate(model: Model, episodes) -> EvalReport:
    """All metrics that apply to the model's task, merged into one report."""
    task = model.cfg.task
    if task == "asl":
        return eval_map_fov(model, episodes)
    if task == "behavior":
        return eval_behavior(model, episodes)
    a = eval_mae(model, episodes)
    b = eval_spherical_map(model, episodes)
    return EvalReport({**a.metrics, **b.metrics}, a.per_episode, a.fingerprint)


PRIMARY = {"asl": "mAP", "ssl": "MAE_g2p", "behavior": "mean"}


# --- ablations ------------------------------------------------------------------

AXES = ("POSE", "MODALITY", "DECODER", "ENCODER_FLAGS", "WINDOW", "HORIZONTAL")


def truncate_window(episodes, window_ms, frame_ms):
    """Keep only the last ``window_ms`` of audio/pose frames of each episode."""
    n = int(round(window_ms / frame_ms))
    out = []
    for e in episodes:
        if n < 1 or n > e.n_frames:
            raise ConfigError(f"window {window_ms} ms outside the {e.n_frames}-frame episodes")
        out.append(replace(e, poses=e.poses[-n:], mags=e.mags[..., -n:], activity=e.activity[:, -n:]))
    return out


def ablation_variants(base: RunConfig, axis: str):
    """(label, config, window_ms or None) rows for an ablation axis."""
    axis = axis.upper()
    if axis == "POSE":
        return [("w/o pose", base.update(use_pose=False), None), ("with pose", base.update(use_pose=True), None)]
    if axis == "MODALITY":
        sets = [("B_pose", ("pose",)), ("+A_mono", ("pose", "audio_mono")), ("+V", ("pose", "visual")),
                ("+A_mono+V", ("pose", "audio_mono", "visual")), ("+A_multi", ("pose", "audio_multi")),
                ("+A_multi+V", ("pose", "audio_multi", "visual"))]
        return [(n, base.update(modalities=m), None) for n, m in sets]
    if axis == "DECODER":
        return [(k, base.update(decoder=k), None) for k in ("sparse_point", "dense", "sparse_grid")]
    if axis == "ENCODER_FLAGS":
        off = dict(spatial_bias=False, modality_ln=False, modality_qkv=False)
        return [("plain", base.update(**off), None),
                ("+spatial", base.update(**{**off, "spatial_bias": True}), None),
                ("+M-LN", base.update(**{**off, "modality_ln": True}), None),
                ("+M-Attn", base.update(**{**off, "modality_qkv": True}), None),
                ("all", base.update(spatial_bias=True, modality_ln=True, modality_qkv=True), None)]
    if axis == "WINDOW":
        return [(f"{w}ms", base.update(window_ms=float(w)), float(w)) for w in (100, 200, 300)]
    if axis == "HORIZONTAL":
        return [("sparse_grid", base.update(decoder="sparse_grid"), None),
                ("horizontal", base.update(decoder="horizontal"), None)]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


@dataclass
class AblationReport:
    axis: str
    metric: str
    rows: list  # (label, seed, metrics dict)

    def value(self, label, seed):
        for l, s, m in self.rows:
            if l == label and s == seed:
                return m[self.metric]
        raise KeyError((label, seed))

    def labels(self):
        return list(dict.fromkeys(r[0] for r in self.rows))

    def seeds(self):
        return list(dict.fromkeys(r[1] for r in self.rows))

    def text(self):
        seeds = self.seeds()
        w = max(12, max(len(l) for l in self.labels()) + 2)
        head = f"{'variant':<{w}}" + "".join(f"{'seed ' + str(s):>10}" for s in seeds) + f"{'mean':>10}{'range':>10}"
        lines = [f"{self.axis} ablation, {self.metric}", head]
        for lab in self.labels():
            v = [self.value(lab, s) for s in seeds]
            lines.append(f"{lab:<{w}}" + "".join(f"{x:>10.4f}" for x in v)
                         + f"{np.mean(v):>10.4f}{np.max(v) - np.min(v):>10.4f}")
        return "\n".join(lines) + "\n"

    def csv(self):
        keys = sorted({k for _, _, m in self.rows for k in m})
        out = "variant,seed," + ",".join(keys) + "\n"
        for l, s, m in self.rows:
            out += f"{l},{s}," + ",".join(repr(m.get(k, float('nan'))) for k in keys) + "\n"
        return out


def run_ablation(base: RunConfig, axis: str, train_eps, eval_eps, scene: SceneSpec, seeds=(0, 1, 2)) -> AblationReport:
    """Train and evaluate every variant of the axis with shared seeds."""
    rows = []
    for label, cfg, window in ablation_variants(base, axis):
        tr, ev = train_eps, eval_eps
        if window is not None:
            tr = truncate_window(train_eps, window, scene.frame_ms)
            ev = truncate_window(eval_eps, window, scene.frame_ms)
        for s in seeds:
            c = cfg.update(seed=s)
            res = train(c, tr, scene)
            rep = evaluate(res.model, ev)
            log.info("%s seed %d: %s", label, s, rep.metrics)
            rows.append((label, s, rep.metrics))
    return AblationReport(axis.upper(), PRIMARY[base.task], rows)


def save_report(report, out_dir, stem):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(report.text())
    (out / f"{stem}.csv").write_text(report.csv())
