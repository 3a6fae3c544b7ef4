"""Command line entry point: ``swl synth|train|eval|ablate|warp|plot``.

Every config key can be overridden with ``--key value`` after the
subcommand's own options. Exit codes: 0 ok, 2 config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import synth, warp
from .harness import runner
from .harness.config import ConfigError, RunConfig, apply_overrides, dumps, load_config

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _overrides(extra):
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            val = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {tok}")
        out[key] = val
    return out


def _config(args, extra) -> RunConfig:
    ov = _overrides(extra)
    cfg = load_config(args.config, ov) if args.config else apply_overrides(RunConfig(), ov)
    return cfg.validate(check_files=True)


def _dataset(path):
    if not path:
        raise ConfigError("no dataset file configured")
    try:
        eps, manifest = synth.load_dataset(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset not found: {path}") from None
    return eps, synth.scene_from_dict(manifest["scene"])


def cmd_synth(args, extra):
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    preset = args.preset or ("ssl" if args.task == "ssl" else "asl_easy" if args.task == "asl" else "behavior")
    kw = {"seed": args.seed}
    if args.window_ms:
        kw["window_ms"] = args.window_ms
    try:
        scene = synth.scene_preset(preset, **kw)
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(synth.PRESETS)}") from None
    eps = synth.gen_dataset(scene, args.task, args.episodes, args.start)
    synth.save_dataset(args.out, eps, scene, args.task)
    print(f"wrote {len(eps)} {args.task} episodes to {args.out}")


def cmd_train(args, extra):
    cfg = _config(args, extra)
    eps, scene = _dataset(cfg.train_data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    res = runner.train(cfg, eps, scene, checkpoint_path=ckpt)
    (out / "config.txt").write_text(dumps(cfg))
    (out / "loss.txt").write_text(res.curve_text())
    (out / "loss.csv").write_text("epoch,step,loss\n" + "".join(f"{e},{s},{l!r}\n" for e, s, l in res.curve))
    print(res.curve_text(), end="")
    print(f"checkpoint: {ckpt}")


def cmd_eval(args, extra):
    cfg = _config(args, extra)
    eps, scene = _dataset(cfg.eval_data)
    ckpt = args.checkpoint or str(Path(cfg.out_dir) / "model.ckpt")
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = runner.load_model(cfg, scene, ckpt)
    fns = {"map": runner.eval_map_fov, "mae": runner.eval_mae, "spherical": runner.eval_spherical_map,
           "behavior": runner.eval_behavior, "all": runner.evaluate}
    rep = fns[args.metric](model, eps)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.metric}"
    runner.save_report(rep, out, stem)
    if rep.per_episode:
        (out / f"{stem}_episodes.csv").write_text(rep.episodes_csv())
    text = rep.text()
    if cfg.task == "behavior" and args.metric in ("behavior", "all"):
        text += "\n" + runner.behavior_table(rep, cfg.behavior_targets)
    print(text, end="")


def cmd_ablate(args, extra):
    cfg = _config(args, extra)
    tr, scene = _dataset(cfg.train_data)
    ev, _ = _dataset(cfg.eval_data)
    seeds = [int(s) for s in args.seeds.split(",")]
    rep = runner.run_ablation(cfg, args.axis, tr, ev, scene, seeds)
    runner.save_report(rep, cfg.out_dir, f"ablate_{args.axis.lower()}")
    print(rep.text(), end="")


def _read_image(path):
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), float) / 255.0


def _write_image(path, img):
    from PIL import Image

    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def _pose(text):
    try:
        return warp.Pose(np.array([float(x) for x in text.split(",")]))
    except ValueError as err:
        raise ConfigError(f"bad pose {text!r}: {err}") from None


def cmd_warp(args, extra):
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    poses = args.pose or ["1,0,0,0"]
    if len(poses) != len(args.inputs):
        raise ConfigError(f"{len(args.inputs)} frames but {len(poses)} poses")
    panos = []
    for path, text in zip(args.inputs, poses):
        frame = _read_image(path)
        cam = warp.CameraModel(args.hfov, args.vfov, frame.shape[1], frame.shape[0])
        panos.append(warp.warp_fov_to_pano(frame, cam, _pose(text), args.radius))
    pano = warp.accumulate(panos)
    _write_image(args.out, pano.image)
    if args.mask:
        _write_image(args.mask, np.repeat(pano.mask[..., None], 3, axis=2).astype(float))
    print(f"panorama {pano.height}×{pano.width}, {pano.mask.mean():.3f} covered -> {args.out}")


def cmd_plot(args, extra):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.loss:
        rows = np.loadtxt(args.loss, delimiter=",", skiprows=1, ndmin=2)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(rows[:, 1], rows[:, 2])
        ax.set_xlabel("step")
        ax.set_ylabel("BCE")
        fig.tight_layout()
        fig.savefig(args.out)
        plt.close(fig)
        print(f"loss curve -> {args.out}")
        return
    cfg = _config(args, extra)
    eps, scene = _dataset(cfg.eval_data)
    ckpt = args.checkpoint or str(Path(cfg.out_dir) / "model.ckpt")
    model = runner.load_model(cfg, scene, ckpt)
    if not 0 <= args.episode < len(eps):
        raise ConfigError(f"episode {args.episode} out of range")
    maps = runner.prediction_maps(model, eps[args.episode:args.episode + 1])[0]
    if maps.ndim == 3:
        maps = maps[..., 0]
    from .decoder import save_heatmap_png

    save_heatmap_png(args.out, maps)
    print(f"heatmap {maps.shape[0]}×{maps.shape[1]} -> {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="swl", description="Spherical world-locking experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--task", required=True, choices=synth.TASKS)
    s.add_argument("--episodes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, default=0, help="index of the first episode")
    s.add_argument("--preset", default=None)
    s.add_argument("--window-ms", type=float, default=None)
    s.add_argument("--out", required=True)

    for name in ("train", "eval", "ablate", "plot"):
        q = sub.add_parser(name)
        q.add_argument("--config", default=None)
        if name in ("eval", "plot"):
            q.add_argument("--checkpoint", default=None)
        if name == "eval":
            q.add_argument("--metric", default="all", choices=("all", "map", "mae", "spherical", "behavior"))
        if name == "ablate":
            q.add_argument("--axis", required=True, type=str.upper, choices=runner.AXES)
            q.add_argument("--seeds", default="0,1,2")
        if name == "plot":
            q.add_argument("--loss", default=None, help="loss.csv written by train")
            q.add_argument("--episode", type=int, default=0)
            q.add_argument("--out", required=True)

    w = sub.add_parser("warp", help="warp FOV images into a world-locked panorama")
    w.add_argument("--in", dest="inputs", action="append", required=True,
                   help="FOV frame; repeat with --pose to composite frames, latest on top")
    w.add_argument("--pose", action="append", help="w,x,y,z head orientation (default identity)")
    w.add_argument("--radius", type=float, default=128)
    w.add_argument("--hfov", type=float, default=90.0)
    w.add_argument("--vfov", type=float, default=60.0)
    w.add_argument("--out", required=True)
    w.add_argument("--mask", default=None, help="also write the coverage mask")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "warp": cmd_warp, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.cmd](args, extra)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (runner.TrainingAborted, nc.NumericError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
