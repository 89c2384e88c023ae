"""Training objectives for the upsampler, discriminators, and detector.

The joint objective is

    total = content + alpha * perceptual + beta * adversarial_g
          + gamma * detection

where content is the pixel MSE against the reference (plus an optional
L1 reconstruction term weighted by lambda_l1), perceptual is the MSE in
feature space, adversarial_g sums the generator-side scores from both
discriminators, and detection is the grid loss on the super-resolved
output. Zero-weight terms are skipped entirely, so their parameters see
exactly zero gradient.

Probabilities entering a log are clamped at 1e-7 from below, which
guards the gradient while keeping a perfectly saturated prediction at
exactly zero loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import ANCHORS_PER_SCALE
from .errors import ShapeError
from .nets import DTYPE, FeatureExtractor, ModelBundle

LOG_EPS = 1e-7
SQRT_FLOOR = 1e-6

ADV_FORMS = ("non_saturating", "minimax")


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; the alpha/beta/gamma defaults are the tuned ones."""

    alpha: float = 2e-6
    beta: float = 1e-3
    gamma: float = 1e-3
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_l1: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lambda_coord", "lambda_noobj", "lambda_l1"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_EPS))


def _bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross entropy with the log-argument guard."""
    return -(target * _clamped_log(p) + (1.0 - target) * _clamped_log(1.0 - p))


def content_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel error, averaged over every element."""
    _check_same_shape(pred, target)
    return torch.mean((pred - target) ** 2)


def l1_reconstruction(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample sum of absolute errors, averaged over the batch."""
    _check_same_shape(pred, target)
    return torch.abs(pred - target).flatten(1).sum(dim=1).mean()


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor,
                    features: FeatureExtractor, layer: int = 2) -> torch.Tensor:
    """Mean squared error between feature maps of the two images.

    With an identity extractor this equals content_loss exactly.
    """
    _check_same_shape(pred, target)
    return torch.mean((features(pred, layer) - features(target, layer)) ** 2)


def adversarial_loss(d_real: torch.Tensor | None, d_fake: torch.Tensor,
                     side: str, form: str = "non_saturating") -> torch.Tensor:
    """Two-player loss on discriminator probabilities.

    side "discriminator": -mean log D(real) - mean log(1 - D(fake)).
    side "generator": the non-saturating -mean log D(fake) by default,
    or the minimax +mean log(1 - D(fake)); d_real is unused and may be
    None.
    """
    if form not in ADV_FORMS:
        raise ValueError(f"form must be one of {ADV_FORMS}, got {form!r}")
    if side == "discriminator":
        if d_real is None:
            raise ValueError("discriminator side needs d_real")
        return -torch.mean(_clamped_log(d_real)) - torch.mean(_clamped_log(1.0 - d_fake))
    if side == "generator":
        if form == "non_saturating":
            return -torch.mean(_clamped_log(d_fake))
        return torch.mean(_clamped_log(1.0 - d_fake))
    raise ValueError(f"side must be 'discriminator' or 'generator', got {side!r}")


@dataclass
class BatchTargets:
    """Per-scale stacked training targets for a batch."""

    values: np.ndarray  # (N, M, M, B, 5 + C) decoded-space targets
    obj: np.ndarray  # (N, M, M, B) responsibility mask


def batch_targets(per_sample_targets) -> list[BatchTargets]:
    """Stack each sample's per-scale ScaleTargets into batch arrays."""
    if not per_sample_targets:
        raise ValueError("empty batch")
    n_scales = len(per_sample_targets[0])
    out = []
    for s in range(n_scales):
        ref = per_sample_targets[0][s].encoding
        depth = ref.values.shape[2] // ANCHORS_PER_SCALE
        vals = np.stack(
            [
                t[s].encoding.values.reshape(ref.grid, ref.grid, ANCHORS_PER_SCALE, depth)
                for t in per_sample_targets
            ]
        )
        obj = np.stack([t[s].obj_mask for t in per_sample_targets])
        out.append(BatchTargets(values=vals, obj=obj))
    return out


def detection_loss(raws: list[torch.Tensor], targets: list[BatchTargets],
                   anchors_per_scale, grids, weights: LossWeights):
    """Grid detection loss, averaged over the batch.

    Responsible slots pay squared error on decoded centers, squared
    error on square-rooted extents (floored at 1e-6 before the root),
    objectness BCE toward 1 and class BCE; everything else pays the
    no-object BCE toward 0, weighted by lambda_noobj. Center and size
    terms carry lambda_coord. Returns (total, components) with
    components keyed center/size/conf_obj/conf_noobj/cls.
    """
    if not len(raws) == len(targets) == len(grids):
        raise ValueError("scale count mismatch between raws, targets, grids")
    zero = torch.zeros((), dtype=DTYPE)
    comp = {k: zero for k in ("center", "size", "conf_obj", "conf_noobj", "cls")}
    batch = raws[0].shape[0]
    for raw, tgt, anchors, m in zip(raws, targets, anchors_per_scale, grids):
        if raw.shape[0] != batch:
            raise ShapeError("inconsistent batch size across scales")
        if raw.shape[1:3] != (m, m):
            raise ShapeError(f"raw grid {tuple(raw.shape[1:3])} does not match {m}")
        depth = raw.shape[3] // ANCHORS_PER_SCALE
        v = raw.reshape(batch, m, m, ANCHORS_PER_SCALE, depth)
        tv = torch.as_tensor(tgt.values, dtype=DTYPE)
        obj = torch.as_tensor(tgt.obj)
        anchor_arr = torch.as_tensor(np.asarray(anchors, dtype=np.float64))

        cols = torch.arange(m, dtype=DTYPE).view(1, 1, m, 1)
        rows = torch.arange(m, dtype=DTYPE).view(1, m, 1, 1)
        px = (cols + torch.sigmoid(v[..., 0])) / m
        py = (rows + torch.sigmoid(v[..., 1])) / m
        pw = anchor_arr[:, 0].view(1, 1, 1, -1) * torch.exp(v[..., 2])
        ph = anchor_arr[:, 1].view(1, 1, 1, -1) * torch.exp(v[..., 3])
        conf = torch.sigmoid(v[..., 4])

        o = obj
        comp["center"] = comp["center"] + ((px - tv[..., 0])[o] ** 2).sum() + (
            (py - tv[..., 1])[o] ** 2
        ).sum()
        sw = torch.sqrt(torch.clamp(pw, min=SQRT_FLOOR)) - torch.sqrt(tv[..., 2].clamp(min=0.0))
        sh = torch.sqrt(torch.clamp(ph, min=SQRT_FLOOR)) - torch.sqrt(tv[..., 3].clamp(min=0.0))
        comp["size"] = comp["size"] + (sw[o] ** 2).sum() + (sh[o] ** 2).sum()
        comp["conf_obj"] = comp["conf_obj"] + _bce(conf[o], torch.ones_like(conf[o])).sum()
        noobj = ~obj
        comp["conf_noobj"] = comp["conf_noobj"] + _bce(
            conf[noobj], torch.zeros_like(conf[noobj])
        ).sum()
        cls_prob = torch.sigmoid(v[..., 5:])
        comp["cls"] = comp["cls"] + _bce(cls_prob[o], tv[..., 5:][o]).sum()

    for k in comp:
        comp[k] = comp[k] / batch
    total = (
        weights.lambda_coord * (comp["center"] + comp["size"])
        + comp["conf_obj"]
        + weights.lambda_noobj * comp["conf_noobj"]
        + comp["cls"]
    )
    return total, comp


@dataclass
class LossBreakdown:
    """One training step's objective, already weighted into the total.

    The float fields are the unweighted term values; ``total`` is
    content + alpha * perceptual + beta * adversarial_g
    + gamma * detection. ``tensors`` holds the graph-connected scalars
    (and generator outputs) for callers that backpropagate; it never
    goes into logs.
    """

    content: float
    perceptual: float
    adversarial_g: float
    detection: float
    total: float
    tensors: dict = field(default_factory=dict, repr=False, compare=False)

    CSV_HEADER = "step,content,perceptual,adversarial_g,detection,total"

    def to_csv_row(self, step: int) -> str:
        return (
            f"{step},{self.content!r},{self.perceptual!r},{self.adversarial_g!r},"
            f"{self.detection!r},{self.total!r}"
        )

    def weighted_total(self, weights: LossWeights) -> float:
        return (
            self.content
            + weights.alpha * self.perceptual
            + weights.beta * self.adversarial_g
            + weights.gamma * self.detection
        )


def joint_loss(models: ModelBundle, lr: torch.Tensor, hr: torch.Tensor,
               targets: list[BatchTargets] | None, weights: LossWeights,
               perceptual_layer: int = 2) -> LossBreakdown:
    """Full generator-side objective on one batch.

    Runs the generator once and reuses its outputs for every term. The
    adversarial term (generator side, both discriminators) is computed
    only when beta > 0 and the detection term only when gamma > 0;
    ``targets`` may be None iff gamma is 0.
    """
    out = models.generator(lr)
    content = content_loss(out.full, hr)
    if weights.lambda_l1 > 0:
        content = content + weights.lambda_l1 * l1_reconstruction(out.full, hr)
    perceptual = perceptual_loss(out.full, hr, models.feature_extractor, perceptual_layer)
    tensors = {"mid": out.mid, "full": out.full, "content": content, "perceptual": perceptual}

    total = content + weights.alpha * perceptual
    adv_val = 0.0
    if weights.beta > 0:
        adv = adversarial_loss(None, models.discriminator_mid(out.mid), "generator")
        adv = adv + adversarial_loss(None, models.discriminator_full(out.full), "generator")
        tensors["adversarial_g"] = adv
        total = total + weights.beta * adv
        adv_val = float(adv.detach())
    det_val = 0.0
    if weights.gamma > 0:
        if targets is None:
            raise ValueError("detection targets required when gamma > 0")
        raws = models.detector(out.full)
        anchors = [models.anchors.for_scale(i) for i in range(len(raws))]
        det, det_comp = detection_loss(
            raws, targets, anchors, models.config.detector_grids, weights
        )
        tensors["detection"] = det
        tensors["detection_components"] = det_comp
        total = total + weights.gamma * det
        det_val = float(det.detach())
    tensors["total"] = total
    return LossBreakdown(
        content=float(content.detach()),
        perceptual=float(perceptual.detach()),
        adversarial_g=adv_val,
        detection=det_val,
        total=float(total.detach()),
        tensors=tensors,
    )
