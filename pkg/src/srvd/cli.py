"""Batch command line tying the pipeline together.

Subcommands: ``synth`` (dataset generation), ``anchors`` (prior-box
clustering), ``train`` (the three phases), ``eval`` (image-quality and
detection reports plus PR/ROC plot data as CSV), and ``sr``
(single-image 4x upscale).

Configuration is a flat ``key = value`` text file; ``#`` starts a
comment. Precedence is CLI flag over config file over built-in default,
and unknown keys are rejected so typos fail loudly. Every subcommand is
deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .boxes import AnchorSet, decode_predictions, kmeans_anchors, nms
from .errors import CheckpointError, ParseError, ShapeError, TrainingDiverged
from .imaging import (
    bicubic_downscale,
    load_dataset,
    make_pair,
    read_image,
    synthesize_scene,
    write_dataset,
    write_image,
)
from .losses import LossWeights
from .metrics import evaluate_detections, image_quality
from .nets import NetConfig, build_models
from .trainer import (
    TrainConfig,
    configure_threads,
    joint_state,
    joint_train,
    load_state,
    new_state,
    pretrain_detector,
    pretrain_sr,
)

N_ANCHOR_LINES = 9


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_grids(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace(",", " ").split())


def _parse_opt_int(text: str):
    return None if text.lower() in ("none", "") else int(text)


# every accepted config key with its value parser
SCHEMA = {
    "seed": int,
    "out": str,
    "data": str,
    "anchors": str,
    "checkpoint": str,
    "identity_features": _parse_bool,
    "synth.n": int,
    "synth.size": int,
    "synth.vehicles": int,
    "net.base_resolution": int,
    "net.n_residual_blocks": int,
    "net.feature_width": int,
    "net.leaky_slope": float,
    "net.detector_grids": _parse_grids,
    "net.channels": int,
    "train.lr": float,
    "train.lr_decay_factor": float,
    "train.lr_decay_every": int,
    "train.ema_decay": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.conf_threshold": float,
    "train.nms_threshold": float,
    "train.joint_lr_mode": str,
    "train.update_discriminators": _parse_bool,
    "train.gen_loss_form": str,
    "train.grad_clip": float,
    "train.max_steps": _parse_opt_int,
    "train.checkpoint_every": _parse_opt_int,
    "train.split_check": _parse_bool,
    "train.perceptual_layer": int,
    "weights.alpha": float,
    "weights.beta": float,
    "weights.gamma": float,
    "weights.lambda_coord": float,
    "weights.lambda_noobj": float,
    "weights.lambda_l1": float,
    "eval.iou_threshold": float,
}

PHASE_NAMES = {"sr": "pretrain_sr", "det": "pretrain_det", "joint": "joint"}


def parse_config(path) -> dict:
    """Read a flat key = value file into typed values."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in SCHEMA:
            raise ParseError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = SCHEMA[key](raw)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def merge_config(args) -> dict:
    """File values overridden by CLI flags."""
    values = parse_config(args.config) if args.config else {}
    for key in ("seed", "out", "checkpoint"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = SCHEMA[key](str(flag))
    return values


def _require(cfg: dict, key: str) -> object:
    if key not in cfg:
        raise ValueError(f"missing required config key {key!r} (set it in the "
                         f"config file or via the matching flag)")
    return cfg[key]


def net_config(cfg: dict) -> NetConfig:
    kwargs = {
        key.split(".", 1)[1]: value
        for key, value in cfg.items()
        if key.startswith("net.")
    }
    return NetConfig(**kwargs)


def train_config(cfg: dict, phase: str) -> TrainConfig:
    weights = LossWeights(**{
        key.split(".", 1)[1]: value
        for key, value in cfg.items()
        if key.startswith("weights.")
    })
    kwargs = {
        key.split(".", 1)[1]: value
        for key, value in cfg.items()
        if key.startswith("train.")
    }
    return TrainConfig(phase=phase, seed=cfg.get("seed", 0), weights=weights, **kwargs)


# ------------------------------------------------------------- subcommands


def cmd_synth(cfg: dict) -> int:
    out = _require(cfg, "out")
    seed = cfg.get("seed", 0)
    n = cfg.get("synth.n", 8)
    size = cfg.get("synth.size", 128)
    vehicles = cfg.get("synth.vehicles", 8)
    scenes = [
        synthesize_scene(seed=seed + i, size=size, n_vehicles=vehicles)
        for i in range(n)
    ]
    write_dataset(scenes, out)
    print(f"wrote {len(scenes)} scenes ({size}x{size}, up to {vehicles} vehicles) to {out}")
    return 0


def cmd_anchors(cfg: dict) -> int:
    data = _require(cfg, "data")
    out = _require(cfg, "out")
    scenes = load_dataset(data)
    dims = [(b.w, b.h) for scene in scenes for b in scene.boxes]
    if len(set(dims)) < N_ANCHOR_LINES:
        raise ValueError(
            f"need at least {N_ANCHOR_LINES} distinct box extents to cluster, "
            f"got {len(set(dims))}"
        )
    centers = kmeans_anchors(dims, k=N_ANCHOR_LINES, seed=cfg.get("seed", 0))
    lines = [f"{w:.8f} {h:.8f}" for w, h in centers]
    Path(out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} anchors from {len(dims)} boxes to {out}")
    return 0


def read_anchor_file(path) -> AnchorSet:
    """Parse the ``anchors`` subcommand's output: one 'w h' pair per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'w h', got {line!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: expected 'w h', got {line!r}") from None
    return AnchorSet.from_array(np.asarray(rows, dtype=np.float64))


def _training_anchors(cfg: dict, scenes) -> AnchorSet | None:
    """Priors for a fresh bundle: the anchors file when configured,
    else k-means over the training labels, else built-in defaults."""
    if "anchors" in cfg:
        return read_anchor_file(cfg["anchors"])
    dims = [(b.w, b.h) for scene in scenes for b in scene.boxes]
    if len(set(dims)) < N_ANCHOR_LINES:
        return None
    return AnchorSet.from_array(kmeans_anchors(dims, k=N_ANCHOR_LINES, seed=cfg.get("seed", 0)))


def _load_scenes(data, net: NetConfig):
    scenes = load_dataset(data)
    if not scenes:
        raise ValueError(f"no scenes under {data}")
    side = scenes[0].image.shape[1]
    if side != net.output_resolution:
        raise ShapeError(
            f"dataset images are {side}px but the network expects "
            f"{net.output_resolution}px; adjust net.base_resolution or synth.size"
        )
    return scenes


def cmd_train(cfg: dict, args) -> int:
    out = _require(cfg, "out")
    data = _require(cfg, "data")
    phase = PHASE_NAMES[args.phase]
    config = train_config(cfg, phase)
    net = net_config(cfg)
    identity = cfg.get("identity_features", False)

    if phase == "pretrain_sr":
        scenes = _load_scenes(data, net)
        pairs = [make_pair(s) for s in scenes]
        models = build_models(net, seed=config.seed, identity_features=identity,
                              anchors=_training_anchors(cfg, scenes))
        state = pretrain_sr(pairs, new_state(models, config), out_dir=out)
    elif phase == "pretrain_det":
        scenes = _load_scenes(data, net)
        models = build_models(net, seed=config.seed, identity_features=identity,
                              anchors=_training_anchors(cfg, scenes))
        state = pretrain_detector(scenes, new_state(models, config), out_dir=out)
    else:
        init_sr = load_state(args.init_sr)
        init_det = load_state(args.init_det)
        pairs = [make_pair(s) for s in _load_scenes(data, init_sr.models.config)]
        state = joint_state(init_sr.models, init_det.models, config)
        state = joint_train(pairs, state, out_dir=out)

    if not all(math.isfinite(row.total) for row in state.history):
        raise TrainingDiverged("loss history contains non-finite entries")
    last = state.history[-1] if state.history else None
    tail = f", final total {last.total:.6g}" if last else ""
    print(f"{phase}: {state.step} steps{tail}; checkpoint in {out}")
    return 0


def evaluate_scenes(models, scenes, conf_threshold=0.5, nms_threshold=0.5,
                    iou_threshold=0.5, sr_override=None, detect_override=None):
    """Score SR quality and detection over labeled scenes.

    ``sr_override``/``detect_override`` swap out the generator or the
    whole detection path (each takes the scene, returning an SR image or
    a final box list); production runs leave both None.
    """
    models.eval_mode()
    net = models.config
    quality_rows = []
    preds_per_image = []
    gts_per_image = []
    for scene in scenes:
        if scene.image.shape[1] != net.output_resolution:
            raise ShapeError(
                f"scene {scene.source_id} is {scene.image.shape[1]}px; the "
                f"checkpoint expects {net.output_resolution}px"
            )
        if sr_override is not None:
            sr = np.asarray(sr_override(scene))
        else:
            lr = bicubic_downscale(scene.image, 4)
            with torch.no_grad():
                sr = models.generator(torch.as_tensor(lr)[None]).full[0].numpy()
        quality_rows.append((scene.source_id, image_quality(scene.image, sr)))
        if detect_override is not None:
            kept = list(detect_override(scene))
        else:
            with torch.no_grad():
                encodings = models.detector.detect(torch.as_tensor(sr))
            candidates = []
            for enc in encodings:
                candidates.extend(decode_predictions(enc, conf_threshold))
            kept = nms(candidates, nms_threshold)
        preds_per_image.append(kept)
        gts_per_image.append(list(scene.boxes))
    report = evaluate_detections(preds_per_image, gts_per_image, iou_threshold)
    return quality_rows, report


def cmd_eval(cfg: dict, args) -> int:
    checkpoint = _require(cfg, "checkpoint")
    data = _require(cfg, "data")
    out = Path(_require(cfg, "out"))
    state = load_state(checkpoint)
    scenes = load_dataset(data)
    if not scenes:
        raise ValueError(f"no scenes under {data}")
    quality_rows, report = evaluate_scenes(
        state.models,
        scenes,
        conf_threshold=cfg.get("train.conf_threshold", state.config.conf_threshold),
        nms_threshold=cfg.get("train.nms_threshold", state.config.nms_threshold),
        iou_threshold=cfg.get("eval.iou_threshold", 0.5),
    )
    out.mkdir(parents=True, exist_ok=True)

    lines = ["image,psnr,ms_ssim,uqi,vif"]
    for source_id, q in quality_rows:
        lines.append(f"{source_id},{q.psnr!r},{q.ms_ssim!r},{q.uqi!r},{q.vif!r}")
    means = [
        sum(getattr(q, name) for _, q in quality_rows) / len(quality_rows)
        for name in ("psnr", "ms_ssim", "uqi", "vif")
    ]
    lines.append("mean," + ",".join(repr(v) for v in means))
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    (out / "pr.csv").write_text(
        "recall,precision\n"
        + "".join(f"{r!r},{p!r}\n" for r, p in report.pr_points)
    )
    (out / "roc.csv").write_text(
        "fpr,tpr\n" + "".join(f"{x!r},{y!r}\n" for x, y in report.roc_points)
    )
    summary = {
        "n_images": report.n_images,
        "n_gt": report.n_gt,
        "tp": report.tp,
        "fp": report.fp,
        "fn": report.fn,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "map50": report.ap,
        "auc": report.auc,
        "mean_psnr": means[0],
        "mean_ms_ssim": means[1],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"evaluated {report.n_images} scenes: map50 {report.ap:.4f}, "
        f"f1 {report.f1:.4f}, mean psnr {means[0]:.2f}; reports in {out}"
    )
    return 0


def cmd_sr(cfg: dict, args) -> int:
    checkpoint = _require(cfg, "checkpoint")
    out = _require(cfg, "out")
    state = load_state(checkpoint)
    state.models.eval_mode()
    net = state.models.config
    img = read_image(args.input)
    if img.shape[1] != net.base_resolution or img.shape[2] != net.base_resolution:
        raise ShapeError(
            f"{args.input} is {img.shape[2]}x{img.shape[1]}; the checkpoint "
            f"upscales exactly {net.base_resolution}x{net.base_resolution} inputs"
        )
    with torch.no_grad():
        sr = state.models.generator(torch.as_tensor(img)[None]).full[0].numpy()
    write_image(sr, out)
    print(f"wrote {net.output_resolution}x{net.output_resolution} image to {out}")
    return 0


# -------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srvd",
        description="Joint super-resolution and vehicle detection pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (or file, where noted)")

    p_synth = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p_synth)

    p_anchors = sub.add_parser("anchors", help="cluster dataset boxes into priors")
    common(p_anchors)

    p_train = sub.add_parser("train", help="run one training phase")
    common(p_train)
    p_train.add_argument("--phase", required=True, choices=sorted(PHASE_NAMES))
    p_train.add_argument("--init-sr", help="SR checkpoint (joint phase)")
    p_train.add_argument("--init-det", help="detector checkpoint (joint phase)")

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p_eval)
    p_eval.add_argument("--checkpoint", help="training checkpoint to score")

    p_sr = sub.add_parser("sr", help="super-resolve one image")
    common(p_sr)
    p_sr.add_argument("--checkpoint", help="training checkpoint to apply")
    p_sr.add_argument("input", help="input PNG at the network's base resolution")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_threads()
    if args.command == "train" and args.phase == "joint" and (
        not args.init_sr or not args.init_det
    ):
        parser.error("train --phase joint requires --init-sr and --init-det")
    try:
        cfg = merge_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "anchors":
            return cmd_anchors(cfg)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        return cmd_sr(cfg, args)
    except (ValueError, ParseError, ShapeError, CheckpointError,
            TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
