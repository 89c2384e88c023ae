"""Network architectures: 4x upsampler, patch discriminators, grid detector.

Everything runs in float64 on CPU. Construction is deterministic: all
parameters are drawn from an explicit torch.Generator seeded by the
caller, so the same config and seed always build bit-identical models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import ANCHORS_PER_SCALE, AnchorSet, GridEncoding, N_SCALES
from .errors import ShapeError

DTYPE = torch.float64

UPSCALE = 4  # low-res to full-res
N_DISC_LAYERS = 11
DISC_STRIDES = (1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1)
FEATURE_WIDTHS = (16, 32, 64, 64)

# sensible priors for the synthetic vehicle statistics at 4x32 output,
# area ascending; anchor design via kmeans_anchors replaces these
DEFAULT_ANCHORS = (
    (0.10, 0.14),
    (0.16, 0.11),
    (0.14, 0.18),
    (0.20, 0.15),
    (0.16, 0.26),
    (0.26, 0.18),
    (0.30, 0.22),
    (0.24, 0.34),
    (0.40, 0.30),
)


@dataclass(frozen=True)
class NetConfig:
    """Sizes shared by every network in the bundle.

    The output side is 4x base_resolution; each detector grid must
    divide it with a power-of-two stride so the backbone taps line up.
    """

    base_resolution: int = 32
    n_residual_blocks: int = 16
    feature_width: int = 64
    leaky_slope: float = 0.2
    detector_grids: tuple[int, int, int] = (4, 8, 16)
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "detector_grids", tuple(int(g) for g in self.detector_grids))
        if self.base_resolution < 16 or self.base_resolution % 4:
            raise ValueError(
                f"base_resolution must be a multiple of 4 and >= 16, got {self.base_resolution}"
            )
        if self.n_residual_blocks < 1:
            raise ValueError(f"n_residual_blocks must be >= 1, got {self.n_residual_blocks}")
        if self.feature_width < 4:
            raise ValueError(f"feature_width must be >= 4, got {self.feature_width}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        grids = self.detector_grids
        if len(grids) != N_SCALES or any(b <= a for a, b in zip(grids, grids[1:])):
            raise ValueError(f"detector_grids must be {N_SCALES} ascending values, got {grids}")
        out = self.output_resolution
        for g in grids:
            if out % g:
                raise ValueError(f"grid {g} does not divide the output side {out}")
            stride = out // g
            if stride < 2 or stride & (stride - 1):
                raise ValueError(
                    f"grid {g} implies stride {stride}; strides must be powers of two >= 2"
                )

    @property
    def output_resolution(self) -> int:
        return UPSCALE * self.base_resolution

    @property
    def mid_resolution(self) -> int:
        return 2 * self.base_resolution


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Channel-to-space rearrangement: (C r^2, H, W) -> (C, H r, W r).

    Output (c, y, x) reads input (c r^2 + r (y mod r) + (x mod r),
    y div r, x div r). Accepts an optional leading batch axis.
    """
    if r < 1:
        raise ValueError(f"upscale factor must be >= 1, got {r}")
    if x.dim() not in (3, 4):
        raise ShapeError(f"expected 3 or 4 dims, got {x.dim()}")
    channels = x.shape[-3]
    if channels % (r * r):
        raise ShapeError(f"channel count {channels} not divisible by {r * r}")
    if x.dim() == 3:
        return F.pixel_shuffle(x.unsqueeze(0), r).squeeze(0)
    return F.pixel_shuffle(x, r)


def _init_module(module: nn.Module, gen: torch.Generator):
    """Fan-in scaled uniform init, deterministic in the generator state."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
        elif isinstance(m, nn.PReLU):
            with torch.no_grad():
                m.weight.fill_(0.25)


class MultiScaleOutput(NamedTuple):
    mid: torch.Tensor  # (N, C, 2 base, 2 base)
    full: torch.Tensor  # (N, C, 4 base, 4 base)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(width)
        self.act = nn.PReLU(width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(width)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return x + y


class _UpsampleStage(nn.Module):
    """conv to 4x channels, pixel shuffle by 2, PReLU."""

    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv2d(width, 4 * width, 3, padding=1)
        self.act = nn.PReLU(width)

    def forward(self, x):
        return self.act(pixel_shuffle(self.conv(x), 2))


class Generator(nn.Module):
    """Residual trunk with two pixel-shuffle stages and a head per scale.

    The 2x head taps the trunk after the first stage, so losses applied
    to the intermediate image reach every shared layer below it.
    """

    def __init__(self, config: NetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.feature_width
        self.head = nn.Conv2d(config.channels, w, 9, padding=4)
        self.head_act = nn.PReLU(w)
        self.blocks = nn.Sequential(*[ResidualBlock(w) for _ in range(config.n_residual_blocks)])
        self.trunk_conv = nn.Conv2d(w, w, 3, padding=1)
        self.trunk_bn = nn.BatchNorm2d(w)
        self.up1 = _UpsampleStage(w)
        self.to_mid = nn.Conv2d(w, config.channels, 3, padding=1)
        self.up2 = _UpsampleStage(w)
        self.to_full = nn.Conv2d(w, config.channels, 3, padding=1)
        self.to(DTYPE)
        _init_module(self, torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor) -> MultiScaleOutput:
        base = self.config.base_resolution
        if x.dim() != 4 or x.shape[1] != self.config.channels or x.shape[2:] != (base, base):
            raise ShapeError(
                f"expected (N, {self.config.channels}, {base}, {base}) input, got {tuple(x.shape)}"
            )
        feat = self.head_act(self.head(x))
        trunk = self.trunk_bn(self.trunk_conv(self.blocks(feat))) + feat
        t1 = self.up1(trunk)
        mid = torch.sigmoid(self.to_mid(t1))
        t2 = self.up2(t1)
        full = torch.sigmoid(self.to_full(t2))
        return MultiScaleOutput(mid=mid, full=full)


class Discriminator(nn.Module):
    """Eleven 4x4 conv layers, every other one strided, then a dense score.

    Stride-1 layers keep their spatial size through asymmetric padding;
    the five stride-2 layers reduce the input 32-fold before the final
    linear layer and sigmoid.
    """

    def __init__(self, config: NetConfig, input_size: int, seed: int = 0):
        super().__init__()
        if input_size % 32 or input_size < 32:
            raise ValueError(f"discriminator input must be a multiple of 32, got {input_size}")
        self.input_size = input_size
        self.channels = config.channels
        self.slope = config.leaky_slope
        w = max(4, config.feature_width // 2)
        widths = [w, w, 2 * w, 2 * w, 4 * w, 4 * w, 8 * w, 8 * w, 8 * w, 8 * w, 8 * w]
        convs = []
        norms = []
        c_in = config.channels
        for i, (c_out, stride) in enumerate(zip(widths, DISC_STRIDES)):
            convs.append(nn.Conv2d(c_in, c_out, 4, stride=stride, padding=stride - 1))
            norms.append(nn.BatchNorm2d(c_out) if i > 0 else nn.Identity())
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.final = nn.Linear(widths[-1] * (input_size // 32) ** 2, 1)
        self.to(DTYPE)
        _init_module(self, torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.input_size
        if x.dim() != 4 or x.shape[1] != self.channels or x.shape[2:] != (s, s):
            raise ShapeError(
                f"expected (N, {self.channels}, {s}, {s}) input, got {tuple(x.shape)}"
            )
        for conv, norm, stride in zip(self.convs, self.norms, DISC_STRIDES):
            if stride == 1:
                x = F.pad(x, (1, 2, 1, 2))
            x = F.leaky_relu(norm(conv(x)), self.slope)
        return torch.sigmoid(self.final(x.flatten(1)))


class _DetectorHead(nn.Module):
    def __init__(self, c_in: int, c_mid: int, depth: int, slope: float):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_mid, 3, padding=1)
        self.bn = nn.BatchNorm2d(c_mid)
        self.out = nn.Conv2d(c_mid, depth, 1)
        self.slope = slope

    def forward(self, x):
        return self.out(F.leaky_relu(self.bn(self.conv(x)), self.slope))


class Detector(nn.Module):
    """Strided backbone with two upsample-and-concat fusions, three heads.

    Head raw output for grid M is (N, M, M, B * (5 + C)) with the slot
    layout the grid encoding expects: per anchor tx, ty, tw, th, to and
    the class logits. Scales are emitted coarse to fine, matching the
    ascending grid tuple.
    """

    def __init__(self, config: NetConfig, anchors: AnchorSet | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.anchors = anchors if anchors is not None else AnchorSet(DEFAULT_ANCHORS)
        out = config.output_resolution
        self.strides = tuple(out // g for g in config.detector_grids)  # descending
        n_down = int(math.log2(self.strides[0]))
        dw = max(8, config.feature_width // 2)
        self.slope = config.leaky_slope
        depth = ANCHORS_PER_SCALE * (5 + 1)

        self.stem = nn.Conv2d(config.channels, dw, 3, padding=1)
        downs = []
        width = dw
        tap_widths = {}
        for i in range(n_down):
            width_next = min(2 * width, 8 * dw)
            downs.append(
                nn.Sequential(
                    nn.Conv2d(width, width_next, 3, stride=2, padding=1),
                    nn.BatchNorm2d(width_next),
                    nn.LeakyReLU(self.slope),
                    nn.Conv2d(width_next, width_next, 3, padding=1),
                    nn.BatchNorm2d(width_next),
                    nn.LeakyReLU(self.slope),
                )
            )
            width = width_next
            tap_widths[2 ** (i + 1)] = width
        self.downs = nn.ModuleList(downs)

        w_coarse = tap_widths[self.strides[0]]
        w_mid = tap_widths[self.strides[1]]
        w_fine = tap_widths[self.strides[2]]
        fuse = 4 * dw
        self.head_coarse = _DetectorHead(w_coarse, fuse, depth, self.slope)
        self.reduce_mid = nn.Conv2d(w_coarse + w_mid, fuse, 1)
        self.head_mid = _DetectorHead(fuse, fuse, depth, self.slope)
        self.reduce_fine = nn.Conv2d(fuse + w_fine, fuse, 1)
        self.head_fine = _DetectorHead(fuse, fuse, depth, self.slope)
        self.to(DTYPE)
        _init_module(self, torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = self.config.output_resolution
        if x.dim() != 4 or x.shape[1] != self.config.channels or x.shape[2:] != (out, out):
            raise ShapeError(
                f"expected (N, {self.config.channels}, {out}, {out}) input, got {tuple(x.shape)}"
            )
        feat = F.leaky_relu(self.stem(x), self.slope)
        taps = {}
        stride = 1
        for down in self.downs:
            feat = down(feat)
            stride *= 2
            taps[stride] = feat

        coarse_feat = taps[self.strides[0]]
        raw_coarse = self.head_coarse(coarse_feat)

        up = F.interpolate(coarse_feat, scale_factor=self.strides[0] // self.strides[1], mode="nearest")
        fused_mid = F.leaky_relu(self.reduce_mid(torch.cat([up, taps[self.strides[1]]], dim=1)), self.slope)
        raw_mid = self.head_mid(fused_mid)

        up = F.interpolate(fused_mid, scale_factor=self.strides[1] // self.strides[2], mode="nearest")
        fused_fine = F.leaky_relu(self.reduce_fine(torch.cat([up, taps[self.strides[2]]], dim=1)), self.slope)
        raw_fine = self.head_fine(fused_fine)

        outs = []
        for raw, grid in zip((raw_coarse, raw_mid, raw_fine), self.config.detector_grids):
            if raw.shape[2:] != (grid, grid):
                raise ShapeError(f"head produced {tuple(raw.shape[2:])}, expected {grid}x{grid}")
            outs.append(raw.permute(0, 2, 3, 1).contiguous())
        return outs

    def detect(self, img: torch.Tensor) -> list[GridEncoding]:
        """Single-image forward wrapped into grid encodings."""
        if img.dim() != 3:
            raise ShapeError(f"expected (C, H, W) input, got {tuple(img.shape)}")
        raws = self.forward(img.unsqueeze(0))
        return [
            GridEncoding(
                scale_id=i,
                grid=self.config.detector_grids[i],
                anchors=self.anchors.for_scale(i),
                values=raws[i][0].detach().cpu().numpy(),
            )
            for i in range(N_SCALES)
        ]


class FeatureExtractor(nn.Module):
    """Small frozen conv stack standing in for a pretrained feature net.

    Four stride-2 stages of widths 16/32/64/64. ``identity=True`` makes
    it pass inputs through untouched, which turns any feature-space
    distance into a pixel-space one. Weights never receive gradients;
    externally trained weights can be loaded over the seeded ones.
    """

    def __init__(self, channels: int, identity: bool = False, seed: int = 0):
        super().__init__()
        self.identity = identity
        self.n_layers = len(FEATURE_WIDTHS)
        convs = []
        c_in = channels
        for w in FEATURE_WIDTHS:
            convs.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
            c_in = w
        self.convs = nn.ModuleList(convs)
        self.to(DTYPE)
        _init_module(self, torch.Generator().manual_seed(seed))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor, layer: int = 2) -> torch.Tensor:
        if self.identity or layer == 0:
            return x
        if not 1 <= layer <= self.n_layers:
            raise ValueError(f"layer must be in [0, {self.n_layers}], got {layer}")
        for conv in self.convs[:layer]:
            x = F.relu(conv(x))
        return x


GROUP_NAMES = (
    "generator",
    "discriminator_mid",
    "discriminator_full",
    "detector",
    "feature_extractor",
)


@dataclass
class ModelBundle:
    """The five networks plus the shared config and anchor set.

    Named parameter groups address the pieces for optimization and
    checkpointing; the feature extractor is the one frozen group.
    """

    config: NetConfig
    anchors: AnchorSet
    generator: Generator
    discriminator_mid: Discriminator
    discriminator_full: Discriminator
    detector: Detector
    feature_extractor: FeatureExtractor

    def __post_init__(self):
        # the detector decodes with its own copy; a silent mismatch would
        # train against one prior set and decode with another
        if not np.array_equal(self.anchors.as_array(), self.detector.anchors.as_array()):
            raise ValueError("bundle anchors disagree with detector anchors")

    def module(self, group: str) -> nn.Module:
        if group not in GROUP_NAMES:
            raise ValueError(f"unknown parameter group {group!r}; expected one of {GROUP_NAMES}")
        return getattr(self, group)

    def trainable_groups(self) -> tuple[str, ...]:
        return GROUP_NAMES[:-1]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter and buffer."""
        arrays = {}
        for group in GROUP_NAMES:
            for name, tensor in self.module(group).state_dict().items():
                arrays[f"{group}/{name}"] = tensor.detach().cpu().numpy().copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for group in GROUP_NAMES:
            prefix = f"{group}/"
            state = {
                name[len(prefix) :]: torch.as_tensor(arr)
                for name, arr in arrays.items()
                if name.startswith(prefix)
            }
            self.module(group).load_state_dict(state, strict=True)

    def train_mode(self, groups=None):
        for group in groups if groups is not None else GROUP_NAMES[:-1]:
            self.module(group).train()

    def eval_mode(self):
        for group in GROUP_NAMES:
            self.module(group).eval()


def build_models(config: NetConfig, seed: int = 0, anchors: AnchorSet | None = None,
                 identity_features: bool = False) -> ModelBundle:
    """Construct all networks with per-group seeds derived from one seed."""
    anchors = anchors if anchors is not None else AnchorSet(DEFAULT_ANCHORS)
    bundle = ModelBundle(
        config=config,
        anchors=anchors,
        generator=Generator(config, seed=seed),
        discriminator_mid=Discriminator(config, config.mid_resolution, seed=seed + 1),
        discriminator_full=Discriminator(config, config.output_resolution, seed=seed + 2),
        detector=Detector(config, anchors=anchors, seed=seed + 3),
        feature_extractor=FeatureExtractor(config.channels, identity=identity_features, seed=seed + 4),
    )
    bundle.eval_mode()
    return bundle
