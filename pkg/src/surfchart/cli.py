"""Command line entry point: ``synth``, ``train``, ``infer`` and ``eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Settings come from schema defaults, then ``--config FILE``, then
``--section.key value`` flags and the per-command shortcuts.
"""
import argparse
import json
import logging
import math
import os
from pathlib import Path
import sys

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, IncompatibleCheckpointError, SurfchartError

log = logging.getLogger("surfchart")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# shortcut flag -> (config key, argparse kwargs)
SHORTCUTS = {
    "synth": {
        "--shapes": ("data.shapes", {}), "--views": ("data.views", {}),
        "--res": ("data.res", {}), "--out": ("data.root", {}), "--seed": ("data.seed", {}),
        "--families": ("data.families", {}), "--background": ("data.background", {}),
    },
    "train": {
        "--data": ("data.root", {}), "--run": ("train.run", {}), "--name": ("train.name", {}),
        "--epochs1": ("train.epochs1", {}), "--epochs2": ("train.epochs2", {}),
        "--lr1": ("train.lr1", {}), "--lr2": ("train.lr2", {}), "--views": ("train.views", {}),
        "--seed": ("train.seed", {}), "--resume": ("train.resume", {}),
        "--multiview": ("train.multiview", {"action": "store_const", "const": "true"}),
        "--hidden": ("train.predict_hidden", {"action": "store_const", "const": "true"}),
        "--ablate": ("train.ablate", {"action": "append"}),
    },
    "infer": {
        "--checkpoint": ("infer.checkpoint", {}), "--images": ("infer.images", {"nargs": "+"}),
        "--data": ("data.root", {}), "--shape": ("infer.shape", {}),
        "--mode": ("infer.mode", {}), "--out": ("infer.out", {}),
    },
    "eval": {
        "--checkpoint": ("eval.checkpoint", {}), "--predictions": ("eval.predictions", {}),
        "--data": ("data.root", {}), "--mode": ("eval.mode", {}), "--out": ("eval.out", {}),
        "--eps": ("eval.eps", {}),
        "--hidden": ("eval.hidden", {"action": "store_const", "const": "true"}),
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="surfchart", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in SHORTCUTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat [section] key = value file")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, (key, kw) in flags.items():
            p.add_argument(flag, dest="short:" + key, **kw)
    return parser


def resolve_config(command, argv):
    """Parse ``argv`` for ``command`` into a :class:`RunConfig`."""
    parser = build_parser()
    args, extra = parser.parse_known_args([command] + list(argv))
    cfg = RunConfig.defaults()
    if args.config:
        cfg.load_file(args.config)
    overrides = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 1
        overrides.append((key, value))
        i += 1
    for key, value in overrides:
        cfg.set(key, value, "flag")
    for dest, value in vars(args).items():
        if dest.startswith("short:") and value is not None:
            key = dest[len("short:"):]
            if isinstance(value, list):
                value = ",".join(value)
            cfg.set(key, value, "flag")
    return cfg, args


def runs_root():
    return Path(os.environ.get("PIX2SURF_RUNS", "runs"))


def run_dir_for(cfg):
    if cfg["train.run"]:
        return Path(cfg["train.run"])
    return runs_root() / cfg["train.name"]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg):
    from .synthcam import build_dataset
    manifest = build_dataset(cfg["data.shapes"], cfg["data.views"], (cfg["data.res"],) * 2,
                             cfg["data.seed"], cfg["data.root"], families=cfg["data.families"],
                             fov=math.radians(cfg["data.fov_deg"]),
                             background=cfg["data.background"], train_views=cfg["train.views"])
    print(f"wrote {len(manifest.views)} views of {cfg['data.shapes']} shapes to {cfg['data.root']}")
    for w in manifest.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def _net_config(cfg, resolution):
    from .netcore import NetConfig
    n = cfg.section("net")
    return NetConfig(resolution=resolution, latent_dim=n["latent_dim"],
                     amp_dims=tuple(n["amp_dims"]), sp_width=n["sp_width"], sp_depth=n["sp_depth"],
                     channel_scale=n["channel_scale"], n_pool=n["n_pool"],
                     convs_per_stage=n["convs_per_stage"], chart_mode=n["chart_mode"])


def _train_config(cfg):
    from .trainer import TrainConfig
    t = cfg.section("train")
    flags = {a: True for a in t["ablate"]}
    return TrainConfig(epochs1=t["epochs1"], epochs2=t["epochs2"], lr1=t["lr1"], lr2=t["lr2"],
                       batch_size=t["batch_size"], views=t["views"], seed=t["seed"],
                       multiview=t["multiview"], nofuse_epochs=t["nofuse_epochs"],
                       predict_hidden=t["predict_hidden"], dtype=t["dtype"],
                       grad_clip=t["grad_clip"], checkpoint_every=t["checkpoint_every"], **flags)


def _loss_weights(cfg, multiview):
    from .losses import LossWeights
    kw = cfg.section("loss")
    if multiview:
        # multi-view training lowers the NOCS and mask weights unless set explicitly
        for k in ("wn", "wm"):
            if cfg.is_default(f"loss.{k}"):
                kw[k] = 0.1
    return LossWeights(**kw)


def _load_dataset(root):
    from .synthcam import load_dataset
    if not (Path(root) / "manifest.json").exists():
        raise ConfigurationError(f"no dataset at {root} (manifest.json missing)")
    return load_dataset(root)


def cmd_train(cfg):
    import torch
    from .trainer import (TrainingData, init_state, load_checkpoint, save_training, train,
                          write_losses)
    dataset = _load_dataset(cfg["data.root"])
    tcfg = _train_config(cfg)
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    if not (cfg["train.resume"] and (run_dir / "config.ini").exists()):
        (run_dir / "config.ini").write_text(cfg.dumps())
    if cfg["train.resume"]:
        path = Path(cfg["train.resume"])
        if cfg["train.resume"] == "latest":
            ckpts = sorted(run_dir.glob("ckpt_*"), key=lambda p: int(p.name.split("_")[1]))
            if not ckpts:
                raise ConfigurationError(f"no checkpoints to resume in {run_dir}")
            path = ckpts[-1]
        state = load_checkpoint(path)
        log.info("resumed %s at epoch %d", path, state.epoch)
        data = TrainingData.from_dataset(dataset, getattr(torch, state.config.dtype))
    else:
        data = TrainingData.from_dataset(dataset, getattr(torch, tcfg.dtype))
        state = init_state(_net_config(cfg, data.resolution), tcfg,
                           _loss_weights(cfg, tcfg.use_multiview))
    tcfg = state.config
    if state.model.config.resolution != data.resolution:
        raise ConfigurationError(f"dataset resolution {data.resolution} != net resolution "
                                 f"{state.model.config.resolution}")
    meta = {
        "ablations": cfg["train.ablate"],
        "phase1_skipped": tcfg.no_nocs_pretrain,
        "multiview": tcfg.use_multiview,
        "view_pairs_per_object": math.comb(tcfg.views, 2) if tcfg.use_multiview else 0,
        "net_config": state.model.config.to_dict(),
        "loss_weights": vars(state.weights),
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if tcfg.use_multiview:
        print(f"multi-view training: {tcfg.views} views, "
              f"{meta['view_pairs_per_object']} view pairs per object")
    if tcfg.no_nocs_pretrain:
        print("phase 1 (NOCS/mask pretraining) skipped")
    train(state, data, run_dir)
    final = save_training(state, run_dir)
    write_losses(state, run_dir / "losses.csv")
    print(f"final checkpoint {final}")
    return EXIT_OK


def _require_checkpoint(path):
    if not path:
        raise ConfigurationError("no checkpoint given")
    if not Path(path).exists():
        raise ConfigurationError(f"checkpoint not found: {path}")


def _read_rgb(path):
    import cv2
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ConfigurationError(f"cannot read image {path}")
    return img[..., ::-1].astype(np.float64) / 255.0


def cmd_infer(cfg):
    from .chart2mesh import reconstruct, write_reconstruction
    from .netcore import load_model
    _require_checkpoint(cfg["infer.checkpoint"])
    model = load_model(cfg["infer.checkpoint"])
    if cfg["infer.images"]:
        images = [_read_rgb(p) for p in cfg["infer.images"]]
        ids = [str(i) for i in range(len(images))]
    elif cfg["infer.shape"]:
        dataset = _load_dataset(cfg["data.root"])
        if cfg["infer.shape"] not in dataset.shapes:
            raise ConfigurationError(f"shape {cfg['infer.shape']} not in dataset")
        views = dataset.shapes[cfg["infer.shape"]]
        images = [v.rgb for v in views]
        ids = [v.view_id for v in views]
    else:
        raise ConfigurationError("infer needs --images or --data with --shape")
    recs = reconstruct(model, images, cfg["infer.mode"], upsample_factor=cfg["infer.upsample"],
                       uv_res=cfg["infer.uv_res"], final_res=cfg["infer.final_res"],
                       uv_grad_thresh=cfg["infer.uv_grad_thresh"], k=cfg["infer.k"],
                       discontinuity_threshold=cfg["infer.discontinuity_threshold"],
                       outlier_t=cfg["infer.outlier_t"], view_ids=ids)
    files = write_reconstruction(recs, cfg["infer.out"])
    print(f"wrote {len(files)} files to {cfg['infer.out']}")
    return EXIT_OK


def _predictions_from_dir(root, dataset):
    """Predicted NOCS maps stored in the dataset layout (missing files are skipped)."""
    from .synthcam.dataset import read_view
    preds = {}
    for sid in dataset.shape_ids:
        for v in dataset.shapes[sid]:
            folder = Path(root) / sid
            if (folder / f"view_{v.view_id}_nocs_v.png").exists():
                try:
                    pv = read_view(folder, v.view_id, sid)
                except OSError:
                    continue
                preds[(sid, v.view_id)] = {"visible": pv.nocs_visible, "hidden": pv.nocs_hidden}
    return preds


def _predictions_from_model(model, dataset, mode, hidden):
    from .chart2mesh import predict_nocs_maps
    preds = {}
    for sid in dataset.shape_ids:
        views = dataset.shapes[sid]
        if mode == "multi":
            maps = predict_nocs_maps(model, [v.rgb for v in views], "multi")
        else:
            maps = [m for v in views for m in predict_nocs_maps(model, [v.rgb], "single")]
        for v, (vis, hid) in zip(views, maps):
            preds[(sid, v.view_id)] = {"visible": vis, "hidden": hid if hidden else None}
    return preds


def cmd_eval(cfg):
    from .metrics import evaluate
    from .netcore import load_model
    dataset = _load_dataset(cfg["data.root"])
    hidden = cfg["eval.hidden"]
    if cfg["eval.predictions"]:
        preds = _predictions_from_dir(cfg["eval.predictions"], dataset)
        if not hidden:
            preds = {k: v["visible"] for k, v in preds.items()}
    else:
        _require_checkpoint(cfg["eval.checkpoint"])
        model = load_model(cfg["eval.checkpoint"])
        if hidden and not model.config.predict_hidden:
            raise ConfigurationError("--hidden needs a checkpoint trained with predict_hidden")
        preds = _predictions_from_model(model, dataset, cfg["eval.mode"], hidden)
    report = evaluate(preds, dataset, cfg["eval.mode"], cfg["eval.eps"])
    report.write(cfg["eval.out"])
    overall = report.aggregates["overall"]
    for name, entry in overall.items():
        mean = entry["mean"]
        shown = "n/a" if mean is None else f"{mean:.6g}"
        print(f"{name}: {shown} (n={entry['count']}, missing={entry['missing']})")
    if report.missing:
        print(f"missing predictions: {len(report.missing)}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            build_parser().print_help()
            return EXIT_OK
        print(f"usage: surfchart {{{','.join(COMMANDS)}}} [options]", file=sys.stderr)
        return EXIT_USAGE
    command = argv[0]
    try:
        if any(a in ("-h", "--help") for a in argv[1:]):
            build_parser().parse_args([command, "--help"])
        cfg, args = resolve_config(command, argv[1:])
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[command](cfg)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SurfchartError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
