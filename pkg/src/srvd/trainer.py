"""Three-phase optimization: SR pretraining, detector pretraining, joint.

All three phases share one loop skeleton: a seeded per-epoch sample
permutation, an adaptive-moment optimizer per parameter group, global
gradient-norm clipping, and a rolling checkpoint. Sample order for
epoch e is derived statelessly from (seed, e), so resuming from a
checkpoint mid-epoch replays the exact remaining batches and the whole
trajectory is bit-identical to an uninterrupted run.

Pretraining schedules step the learning rate down by ``lr_decay_factor``
every ``lr_decay_every`` epochs. The joint phase instead decays the
rate per step by ``ema_decay`` (default 0.9991); switching
``joint_lr_mode`` to "ema" keeps the rate constant and maintains a
Polyak average of the generator and detector weights under the same
decay constant. Normalization layers run on frozen statistics during
the joint phase, where the batch size is typically 1.

``gradient_check`` is the verification harness: central finite
differences against analytic gradients on sampled coordinates, plus
term-isolation decompositions of the detection gradient (coordinate /
size / confidence) and of the full objective's gradient at the
generator outputs (content / perceptual / adversarial / detection).
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .boxes import AnchorSet, N_SCALES, encode_targets
from .checkpoint import load_container, save_container
from .errors import CheckpointError, ShapeError, TrainingDiverged
from .imaging import PairedSample, bicubic_downscale
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_loss,
    batch_targets,
    detection_loss,
    joint_loss,
)
from .nets import ModelBundle, NetConfig, build_models

logger = logging.getLogger(__name__)

PHASES = ("pretrain_sr", "pretrain_det", "joint")
JOINT_LR_MODES = ("decay", "ema")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
FD_TOLERANCE = 1e-3
SPLIT_TOLERANCE = 1e-6
STATE_FILENAME = "state.srvd1"


def configure_threads(default: int = 1) -> int:
    """Pin torch's worker count from SRVD_THREADS (or the default)."""
    n = max(1, int(os.environ.get("SRVD_THREADS", default)))
    torch.set_num_threads(n)
    return n


@dataclass(frozen=True)
class TrainConfig:
    """One phase's optimization settings.

    ``lr_decay_factor``/``lr_decay_every`` drive the epoch schedule of
    the pretraining phases; ``ema_decay`` drives the per-step joint
    schedule (or the parameter average when ``joint_lr_mode`` is
    "ema"). ``max_steps`` caps the total generator-step count below
    what ``epochs`` implies; ``checkpoint_every`` (generator steps)
    controls the rolling checkpoint cadence when an output directory
    is given.
    """

    phase: str = "pretrain_sr"
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5
    ema_decay: float = 0.9991
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    conf_threshold: float = 0.5
    nms_threshold: float = 0.5
    joint_lr_mode: str = "decay"
    update_discriminators: bool = True
    gen_loss_form: str = "non_saturating"
    grad_clip: float = 10.0
    max_steps: int | None = None
    checkpoint_every: int | None = None
    split_check: bool = True
    perceptual_layer: int = 2

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr!r}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor!r}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.joint_lr_mode not in JOINT_LR_MODES:
            raise ValueError(
                f"joint_lr_mode must be one of {JOINT_LR_MODES}, got {self.joint_lr_mode!r}"
            )
        for name in ("conf_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v!r}")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Stepped pretraining rate: lr * factor^(epoch div every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def joint_lr(config: TrainConfig, step: int) -> float:
    """Per-step exponential rate for the joint phase."""
    if config.joint_lr_mode == "ema":
        return config.lr
    return config.lr * config.ema_decay**step


class Adam:
    """Adaptive-moment descent over a named parameter dict.

    First/second moment decays default to 0.9/0.999. All state is
    float64 and serializable, so a reloaded optimizer continues
    bit-identically; ``lr`` is assigned from outside by the schedule.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: torch.zeros_like(p) for name, p in self.params.items()}
        self.v = {name: torch.zeros_like(p) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        with torch.no_grad():
            for name, p in self.params.items():
                g = p.grad
                if g is None:
                    continue
                m = self.m[name]
                v = self.v[name]
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.sub_(self.lr * (m / bias1) / ((v / bias2).sqrt() + self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t, dtype=np.int64)}
        for name in self.params:
            out[f"m/{name}"] = self.m[name].numpy().copy()
            out[f"v/{name}"] = self.v[name].numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["t"])
        for name in self.params:
            self.m[name] = torch.as_tensor(arrays[f"m/{name}"]).clone()
            self.v[name] = torch.as_tensor(arrays[f"v/{name}"]).clone()


@dataclass
class TrainState:
    """Everything a phase needs to continue: nets, moments, history."""

    models: ModelBundle
    config: TrainConfig
    step: int = 0
    optimizers: dict[str, Adam] = field(default_factory=dict)
    history: list[LossBreakdown] = field(default_factory=list)
    ema: dict[str, torch.Tensor] | None = None


def _phase_groups(config: TrainConfig) -> tuple[str, ...]:
    w = config.weights
    if config.phase == "pretrain_sr":
        groups = ["generator"]
        if w.beta > 0:
            groups += ["discriminator_mid", "discriminator_full"]
    elif config.phase == "pretrain_det":
        groups = ["detector"]
    else:
        groups = ["generator"]
        if w.gamma > 0:
            groups.append("detector")
        if w.beta > 0 and config.update_discriminators:
            groups += ["discriminator_mid", "discriminator_full"]
    return tuple(groups)


def new_state(models: ModelBundle, config: TrainConfig) -> TrainState:
    """Fresh optimizers (and EMA shadows where configured) for a phase."""
    opts = {
        group: Adam(dict(models.module(group).named_parameters()), lr=config.lr)
        for group in _phase_groups(config)
    }
    ema = None
    if config.phase == "joint" and config.joint_lr_mode == "ema":
        ema = {}
        for group in ("generator", "detector"):
            for name, p in models.module(group).named_parameters():
                ema[f"{group}/{name}"] = p.detach().clone()
    return TrainState(models=models, config=config, optimizers=opts, ema=ema)


def joint_state(sr_models: ModelBundle, det_models: ModelBundle,
                config: TrainConfig) -> TrainState:
    """Merge pretrained bundles: SR side from one, detector from the other."""
    if sr_models.config != det_models.config:
        raise ValueError(
            f"incompatible network configs: {sr_models.config} vs {det_models.config}"
        )
    models = ModelBundle(
        config=sr_models.config,
        anchors=det_models.anchors,
        generator=sr_models.generator,
        discriminator_mid=sr_models.discriminator_mid,
        discriminator_full=sr_models.discriminator_full,
        detector=det_models.detector,
        feature_extractor=sr_models.feature_extractor,
    )
    return new_state(models, config)


# ------------------------------------------------------------ persistence


def dataset_fingerprint(samples) -> str:
    """Content hash over images, boxes, and provenance tags."""
    h = hashlib.sha256()
    for s in samples:
        h.update(s.source_id.encode())
        if isinstance(s, PairedSample):
            h.update(s.hr.tobytes())
            h.update(s.lr.tobytes())
            boxes = s.labels
        else:
            h.update(s.image.tobytes())
            boxes = s.boxes
        for b in boxes:
            h.update(np.array([b.cx, b.cy, b.w, b.h]).tobytes())
    return h.hexdigest()


def save_state(state: TrainState, path) -> None:
    arrays = {}
    for name, arr in state.models.state_arrays().items():
        arrays[f"model/{name}"] = arr
    arrays["anchors"] = state.models.anchors.as_array()
    for group, opt in state.optimizers.items():
        for name, arr in opt.state_arrays().items():
            arrays[f"opt/{group}/{name}"] = arr
    arrays["step"] = np.array(state.step, dtype=np.int64)
    if state.history:
        arrays["history"] = np.array(
            [
                [b.content, b.perceptual, b.adversarial_g, b.detection, b.total]
                for b in state.history
            ]
        )
    if state.ema is not None:
        for name, t in state.ema.items():
            arrays[f"ema/{name}"] = t.numpy().copy()
    meta = {
        "kind": "train_state",
        "net": asdict(state.models.config),
        "train": asdict(state.config),
        "identity_features": bool(state.models.feature_extractor.identity),
        "optimizer_groups": sorted(state.optimizers),
        "has_ema": state.ema is not None,
    }
    save_container(path, arrays, meta)


def load_state(path) -> TrainState:
    meta, arrays = load_container(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a training checkpoint")
    net = NetConfig(**meta["net"])
    train_meta = dict(meta["train"])
    weights = LossWeights(**train_meta.pop("weights"))
    config = TrainConfig(weights=weights, **train_meta)
    models = build_models(
        net,
        seed=0,
        anchors=AnchorSet.from_array(arrays["anchors"]),
        identity_features=meta["identity_features"],
    )
    prefix = "model/"
    models.load_state_arrays(
        {n[len(prefix):]: a for n, a in arrays.items() if n.startswith(prefix)}
    )
    optimizers = {}
    for group in meta["optimizer_groups"]:
        opt = Adam(dict(models.module(group).named_parameters()), lr=config.lr)
        gp = f"opt/{group}/"
        opt.load_state_arrays(
            {n[len(gp):]: a for n, a in arrays.items() if n.startswith(gp)}
        )
        optimizers[group] = opt
    history = [
        LossBreakdown(
            content=float(r[0]),
            perceptual=float(r[1]),
            adversarial_g=float(r[2]),
            detection=float(r[3]),
            total=float(r[4]),
        )
        for r in arrays.get("history", [])
    ]
    ema = None
    if meta["has_ema"]:
        ep = "ema/"
        ema = {
            n[len(ep):]: torch.as_tensor(a).clone()
            for n, a in arrays.items()
            if n.startswith(ep)
        }
    return TrainState(
        models=models,
        config=config,
        step=int(arrays["step"]),
        optimizers=optimizers,
        history=history,
        ema=ema,
    )


def write_loss_csv(history, path) -> None:
    lines = [LossBreakdown.CSV_HEADER]
    lines += [b.to_csv_row(i) for i, b in enumerate(history)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_manifest(config: TrainConfig, net: NetConfig, data, path) -> None:
    """Flat key = value record of the run inputs, same syntax as configs."""
    lines = [
        f"phase = {config.phase}",
        f"samples = {len(data)}",
        f"dataset_sha256 = {dataset_fingerprint(data)}",
    ]
    for key, value in asdict(net).items():
        lines.append(f"net.{key} = {value}")
    train_fields = asdict(config)
    weights = train_fields.pop("weights")
    train_fields.pop("phase")
    for key, value in train_fields.items():
        lines.append(f"train.{key} = {value}")
    for key, value in weights.items():
        lines.append(f"weights.{key} = {value}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- loop core


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # stateless: epoch e's order never depends on how we got to e
    return np.random.default_rng((seed, epoch)).permutation(n)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def _total_steps(config: TrainConfig, n: int) -> int:
    total = config.epochs * _steps_per_epoch(n, config.batch_size)
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    return total


def _stack(images) -> torch.Tensor:
    return torch.as_tensor(np.stack(images))


def _clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    total = math.sqrt(total)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return total


def _abort_if_diverged(value: float, state: TrainState, out_dir, label: str):
    if math.isfinite(value):
        return
    where = ""
    if out_dir is not None:
        path = os.path.join(out_dir, "diverged.srvd1")
        save_state(state, path)
        where = f"; diagnostic checkpoint at {path}"
    raise TrainingDiverged(
        f"non-finite {label} ({value!r}) at step {state.step}{where}"
    )


def _set_lr(state: TrainState, lr: float):
    for opt in state.optimizers.values():
        opt.lr = lr


def _optimize_group(state: TrainState, group: str):
    opt = state.optimizers[group]
    _clip_gradients(opt.params.values(), state.config.grad_clip)
    opt.step()


def _discriminator_step(state: TrainState, lr_in: torch.Tensor, hr: torch.Tensor,
                        mid_real: torch.Tensor, out_dir) -> float:
    """One update of both discriminators on a frozen generator output."""
    models = state.models
    with torch.no_grad():
        fake = models.generator(lr_in)
    loss = adversarial_loss(
        models.discriminator_mid(mid_real),
        models.discriminator_mid(fake.mid),
        "discriminator",
    ) + adversarial_loss(
        models.discriminator_full(hr),
        models.discriminator_full(fake.full),
        "discriminator",
    )
    value = float(loss.detach())
    _abort_if_diverged(value, state, out_dir, "discriminator loss")
    for group in ("discriminator_mid", "discriminator_full"):
        state.optimizers[group].zero_grad()
    loss.backward()
    for group in ("discriminator_mid", "discriminator_full"):
        _optimize_group(state, group)
    return value


def _mid_references(data, idxs) -> torch.Tensor:
    # the 2x discriminator's real samples: HR reduced to the mid scale
    return _stack([bicubic_downscale(data[i].hr, 2) for i in idxs])


def _checkpoint_tick(state: TrainState, out_dir):
    every = state.config.checkpoint_every
    if out_dir is not None and every and state.step % every == 0:
        save_state(state, os.path.join(out_dir, STATE_FILENAME))


def _finalize(state: TrainState, out_dir):
    if out_dir is not None:
        save_state(state, os.path.join(out_dir, STATE_FILENAME))
        write_loss_csv(state.history, os.path.join(out_dir, "losses.csv"))


def _prepare_out_dir(state: TrainState, data, out_dir):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(
        state.config, state.models.config, data, os.path.join(out_dir, "manifest.txt")
    )


def _check_pair_shapes(data, config: NetConfig):
    base = config.base_resolution
    for s in data:
        if s.lr.shape != (config.channels, base, base):
            raise ShapeError(
                f"sample {s.source_id}: lr shape {s.lr.shape} does not match "
                f"({config.channels}, {base}, {base})"
            )


# ------------------------------------------------------------------ phases


def pretrain_sr(data, state: TrainState, out_dir=None) -> TrainState:
    """Adversarial SR pretraining on paired low/high-res samples.

    Each step runs one discriminator update (both scales) against the
    frozen generator, then one generator update on the content +
    perceptual + adversarial objective. The detection weight is forced
    to zero here regardless of the config, so the detector is never
    touched. With beta = 0 the discriminator side is skipped entirely
    and the trace reduces to plain supervised regression.
    """
    config = state.config
    if config.phase != "pretrain_sr":
        raise ValueError(f"state is configured for {config.phase!r}, not 'pretrain_sr'")
    if not data:
        raise ValueError("empty dataset")
    _check_pair_shapes(data, state.models.config)
    weights = replace(config.weights, gamma=0.0)
    models = state.models
    _prepare_out_dir(state, data, out_dir)
    # discriminators keep frozen normalization stats: their deepest map is
    # 1x1, where batch statistics are undefined at batch size 1
    models.eval_mode()
    models.train_mode(["generator"])

    n = len(data)
    spe = _steps_per_epoch(n, config.batch_size)
    total = _total_steps(config, n)
    order = None
    current_epoch = -1
    while state.step < total:
        epoch = state.step // spe
        if epoch != current_epoch:
            order = _epoch_order(config.seed, epoch, n)
            current_epoch = epoch
            _set_lr(state, lr_schedule(config, epoch))
        k = state.step % spe
        idxs = order[k * config.batch_size : (k + 1) * config.batch_size]
        lr_in = _stack([data[i].lr for i in idxs])
        hr = _stack([data[i].hr for i in idxs])

        if weights.beta > 0:
            _discriminator_step(state, lr_in, hr, _mid_references(data, idxs), out_dir)

        breakdown = joint_loss(models, lr_in, hr, None, weights, config.perceptual_layer)
        _abort_if_diverged(breakdown.total, state, out_dir, "generator loss")
        gen_opt = state.optimizers["generator"]
        gen_opt.zero_grad()
        breakdown.tensors["total"].backward()
        _optimize_group(state, "generator")

        breakdown.tensors = {}
        state.history.append(breakdown)
        state.step += 1
        _checkpoint_tick(state, out_dir)
    models.eval_mode()
    _finalize(state, out_dir)
    return state


def pretrain_detector(data, state: TrainState, out_dir=None) -> TrainState:
    """Detection pretraining on labeled full-resolution scenes."""
    config = state.config
    if config.phase != "pretrain_det":
        raise ValueError(f"state is configured for {config.phase!r}, not 'pretrain_det'")
    if not data:
        raise ValueError("empty dataset")
    models = state.models
    net = models.config
    side = net.output_resolution
    for s in data:
        if s.image.shape != (net.channels, side, side):
            raise ShapeError(
                f"scene {s.source_id}: image shape {s.image.shape} does not match "
                f"({net.channels}, {side}, {side})"
            )
    grids = net.detector_grids
    targets = [
        encode_targets(s.boxes, models.anchors, grids, n_classes=1) for s in data
    ]
    anchors_per_scale = [models.anchors.for_scale(i) for i in range(N_SCALES)]
    _prepare_out_dir(state, data, out_dir)
    models.eval_mode()
    models.train_mode(["detector"])

    n = len(data)
    spe = _steps_per_epoch(n, config.batch_size)
    total = _total_steps(config, n)
    order = None
    current_epoch = -1
    det_opt = state.optimizers["detector"]
    while state.step < total:
        epoch = state.step // spe
        if epoch != current_epoch:
            order = _epoch_order(config.seed, epoch, n)
            current_epoch = epoch
            _set_lr(state, lr_schedule(config, epoch))
        k = state.step % spe
        idxs = order[k * config.batch_size : (k + 1) * config.batch_size]
        images = _stack([data[i].image for i in idxs])

        raws = models.detector(images)
        loss, _ = detection_loss(
            raws,
            batch_targets([targets[i] for i in idxs]),
            anchors_per_scale,
            grids,
            config.weights,
        )
        value = float(loss.detach())
        _abort_if_diverged(value, state, out_dir, "detection loss")
        det_opt.zero_grad()
        loss.backward()
        _optimize_group(state, "detector")

        state.history.append(
            LossBreakdown(
                content=0.0,
                perceptual=0.0,
                adversarial_g=0.0,
                detection=value,
                total=value,
            )
        )
        state.step += 1
        _checkpoint_tick(state, out_dir)
    models.eval_mode()
    _finalize(state, out_dir)
    return state


def joint_train(data, state: TrainState, out_dir=None) -> TrainState:
    """End-to-end phase: detector gradients flow into the generator.

    Per step: interleaved discriminator update (when enabled), then one
    update of the generator — and of the detector when gamma > 0 — on
    the full objective evaluated on the super-resolved output.
    Normalization layers stay on frozen statistics throughout. On each
    epoch's first step the gradient at the generator outputs is checked
    against its per-term decomposition.
    """
    config = state.config
    if config.phase != "joint":
        raise ValueError(f"state is configured for {config.phase!r}, not 'joint'")
    if not data:
        raise ValueError("empty dataset")
    _check_pair_shapes(data, state.models.config)
    weights = config.weights
    models = state.models
    grids = models.config.detector_grids
    targets = None
    if weights.gamma > 0:
        targets = [
            encode_targets(s.labels, models.anchors, grids, n_classes=1) for s in data
        ]
    _prepare_out_dir(state, data, out_dir)
    models.eval_mode()

    n = len(data)
    spe = _steps_per_epoch(n, config.batch_size)
    total = _total_steps(config, n)
    order = None
    current_epoch = -1
    update_d = weights.beta > 0 and config.update_discriminators
    while state.step < total:
        epoch = state.step // spe
        if epoch != current_epoch:
            order = _epoch_order(config.seed, epoch, n)
            current_epoch = epoch
        _set_lr(state, joint_lr(config, state.step))
        k = state.step % spe
        idxs = order[k * config.batch_size : (k + 1) * config.batch_size]
        lr_in = _stack([data[i].lr for i in idxs])
        hr = _stack([data[i].hr for i in idxs])

        if update_d:
            _discriminator_step(state, lr_in, hr, _mid_references(data, idxs), out_dir)

        bt = batch_targets([targets[i] for i in idxs]) if targets is not None else None
        breakdown = joint_loss(models, lr_in, hr, bt, weights, config.perceptual_layer)
        _abort_if_diverged(breakdown.total, state, out_dir, "joint loss")
        if config.split_check and k == 0:
            residual = _output_split_residual(breakdown.tensors, weights)
            if residual > SPLIT_TOLERANCE:
                raise TrainingDiverged(
                    f"gradient decomposition residual {residual:.3e} exceeds "
                    f"{SPLIT_TOLERANCE} at step {state.step}"
                )
        for group in ("generator", "detector"):
            if group in state.optimizers:
                state.optimizers[group].zero_grad()
        breakdown.tensors["total"].backward()
        _optimize_group(state, "generator")
        if "detector" in state.optimizers:
            _optimize_group(state, "detector")
        if state.ema is not None:
            _ema_update(state)

        breakdown.tensors = {}
        state.history.append(breakdown)
        state.step += 1
        _checkpoint_tick(state, out_dir)
    _finalize(state, out_dir)
    return state


def _ema_update(state: TrainState):
    d = state.config.ema_decay
    with torch.no_grad():
        for group in ("generator", "detector"):
            for name, p in state.models.module(group).named_parameters():
                shadow = state.ema[f"{group}/{name}"]
                shadow.mul_(d).add_(p, alpha=1.0 - d)


def apply_ema(state: TrainState):
    """Copy the Polyak-averaged weights over the live parameters."""
    if state.ema is None:
        raise ValueError("state carries no parameter averages")
    with torch.no_grad():
        for group in ("generator", "detector"):
            for name, p in state.models.module(group).named_parameters():
                p.copy_(state.ema[f"{group}/{name}"])


# -------------------------------------------------------- gradient checking


@dataclass(frozen=True)
class FdRecord:
    """One coordinate's analytic-vs-numeric comparison."""

    group: str
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradientCheckReport:
    term: str
    eps: float
    fd_tolerance: float
    split_tolerance: float
    records: list[FdRecord]
    max_rel_error: float
    detection_split_residual: float | None
    output_split_residual: float
    failures: list[str]
    passed: bool

    def summary(self) -> str:
        det = (
            "n/a"
            if self.detection_split_residual is None
            else f"{self.detection_split_residual:.3e}"
        )
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} term={self.term} coords={len(self.records)} "
            f"max_rel={self.max_rel_error:.3e} det_split={det} "
            f"out_split={self.output_split_residual:.3e}"
        )


def _grad_list(scalar, leaves, retain=True):
    grads = torch.autograd.grad(scalar, leaves, retain_graph=retain, allow_unused=True)
    return [
        torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)
    ]


def _residual_between(total_grads, summed_grads) -> float:
    num = 0.0
    den = 0.0
    for g, a in zip(total_grads, summed_grads):
        num += float(((g - a) ** 2).sum())
        den += float((g**2).sum())
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num / den)


def _output_split_residual(tensors, weights: LossWeights) -> float:
    """Gradient at the generator outputs vs its weighted per-term sum."""
    leaves = [tensors["mid"], tensors["full"]]
    total = _grad_list(tensors["total"], leaves)
    acc = [torch.zeros_like(leaf) for leaf in leaves]
    parts = [(1.0, tensors["content"]), (weights.alpha, tensors["perceptual"])]
    if "adversarial_g" in tensors:
        parts.append((weights.beta, tensors["adversarial_g"]))
    if "detection" in tensors:
        parts.append((weights.gamma, tensors["detection"]))
    for coeff, scalar in parts:
        for a, g in zip(acc, _grad_list(scalar, leaves)):
            a.add_(g, alpha=coeff)
    return _residual_between(total, acc)


def _detection_split_residual(models: ModelBundle, lr_in, targets,
                              weights: LossWeights) -> float:
    """Detection gradient at the raw heads vs coordinate+size+confidence."""
    with torch.no_grad():
        sr = models.generator(lr_in).full
    raws = models.detector(sr)
    _, comp = detection_loss(
        raws,
        targets,
        [models.anchors.for_scale(i) for i in range(N_SCALES)],
        models.config.detector_grids,
        weights,
    )
    coord = weights.lambda_coord * comp["center"]
    size = weights.lambda_coord * comp["size"]
    confidence = comp["conf_obj"] + weights.lambda_noobj * comp["conf_noobj"] + comp["cls"]
    total = coord + size + confidence
    total_grads = _grad_list(total, raws)
    acc = [torch.zeros_like(r) for r in raws]
    for scalar in (coord, size, confidence):
        for a, g in zip(acc, _grad_list(scalar, raws)):
            a.add_(g)
    return _residual_between(total_grads, acc)


def gradient_check(models: ModelBundle, sample: PairedSample, weights: LossWeights,
                   n_coords: int = 16, eps: float = 1e-4, seed: int = 0,
                   term: str = "total", fd_tolerance: float = FD_TOLERANCE,
                   split_tolerance: float = SPLIT_TOLERANCE,
                   perceptual_layer: int = 2) -> GradientCheckReport:
    """Verify backpropagation against central finite differences.

    ``term`` selects which objective scalar to differentiate: one of
    content, perceptual, adversarial_g, detection, or total. Sampled
    generator coordinates are always checked; detector coordinates are
    added when the term reaches them. The two decomposition residuals
    (detection three-way, output four-term) are reported alongside.
    A failure names every offending coordinate; nothing is raised.
    """
    models.eval_mode()
    grids = models.config.detector_grids
    targets = None
    if weights.gamma > 0:
        targets = batch_targets(
            [encode_targets(sample.labels, models.anchors, grids, n_classes=1)]
        )
    lr_in = torch.as_tensor(sample.lr)[None]
    hr = torch.as_tensor(sample.hr)[None]

    def term_value() -> float:
        with torch.no_grad():
            lb = joint_loss(models, lr_in, hr, targets, weights, perceptual_layer)
        return {
            "content": lb.content,
            "perceptual": lb.perceptual,
            "adversarial_g": lb.adversarial_g,
            "detection": lb.detection,
            "total": lb.total,
        }[term]

    if term not in ("content", "perceptual", "adversarial_g", "detection", "total"):
        raise ValueError(f"unknown objective term {term!r}")
    if term == "adversarial_g" and weights.beta <= 0:
        raise ValueError("adversarial term inactive with beta = 0")
    if term == "detection" and weights.gamma <= 0:
        raise ValueError("detection term inactive with gamma = 0")

    groups = ["generator"]
    if term in ("detection", "total") and weights.gamma > 0:
        groups.append("detector")

    # analytic pass
    for group in groups:
        for p in models.module(group).parameters():
            p.grad = None
    tensors = joint_loss(models, lr_in, hr, targets, weights, perceptual_layer).tensors
    scalar = tensors[term] if term != "total" else tensors["total"]
    output_split = _output_split_residual(tensors, weights)
    scalar.backward()

    rng = np.random.default_rng(seed)
    records = []
    for group in groups:
        params = list(models.module(group).named_parameters())
        sizes = np.array([p.numel() for _, p in params])
        bounds = np.cumsum(sizes)
        chosen = rng.choice(int(bounds[-1]), size=min(n_coords, int(bounds[-1])),
                            replace=False)
        for flat in sorted(int(c) for c in chosen):
            pi = int(np.searchsorted(bounds, flat, side="right"))
            offset = flat - (int(bounds[pi - 1]) if pi else 0)
            name, p = params[pi]
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[offset])
            with torch.no_grad():
                original = float(p.view(-1)[offset])
                p.view(-1)[offset] = original + eps
                plus = term_value()
                p.view(-1)[offset] = original - eps
                minus = term_value()
                p.view(-1)[offset] = original
            numeric = (plus - minus) / (2.0 * eps)
            denom = max(abs(analytic), abs(numeric))
            rel = 0.0 if denom < 1e-12 else abs(analytic - numeric) / denom
            records.append(FdRecord(group, name, offset, analytic, numeric, rel))
    for group in groups:
        for p in models.module(group).parameters():
            p.grad = None

    det_split = None
    if weights.gamma > 0:
        det_split = _detection_split_residual(models, lr_in, targets, weights)

    failures = [
        f"{r.group}/{r.param}[{r.index}]: analytic {r.analytic:.6e} vs "
        f"numeric {r.numeric:.6e} (rel {r.rel_error:.3e})"
        for r in records
        if r.rel_error > fd_tolerance
    ]
    if det_split is not None and det_split > split_tolerance:
        failures.append(f"detection split residual {det_split:.3e}")
    if output_split > split_tolerance:
        failures.append(f"output split residual {output_split:.3e}")
    max_rel = max((r.rel_error for r in records), default=0.0)
    return GradientCheckReport(
        term=term,
        eps=eps,
        fd_tolerance=fd_tolerance,
        split_tolerance=split_tolerance,
        records=records,
        max_rel_error=max_rel,
        detection_split_residual=det_split,
        output_split_residual=output_split,
        failures=failures,
        passed=not failures,
    )
