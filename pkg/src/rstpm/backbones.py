"""The four networks: teacher-A / student-A pyramid nets, the deeper teacher-B,
and the student-B reconstruction decoder, plus pretext pretraining for teachers.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import nn as core
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

ROLES = ("teacher-A", "student-A", "teacher-B", "student-B")
# scale denominators: level 4 is 1/4 of the input, etc.
DISTILL_LEVELS = (4, 8, 16)
ALL_LEVELS = (4, 8, 16, 32)


@dataclass(frozen=True)
class PyramidSpec:
    stem_channels: int = 16
    stem_stride: int = 2
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    tap_levels: tuple[int, ...] = ALL_LEVELS
    # optional per-channel standardization of the [0, 1] input (external-weight interop)
    input_mean: tuple[float, ...] | None = None
    input_std: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "tap_levels", tuple(self.tap_levels))
        for name in ("input_mean", "input_std"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(c) for c in v))

    def validate(self) -> None:
        if len(self.blocks) != 4 or len(self.channels) != 4:
            raise ConfigError("a pyramid spec needs exactly 4 stages")
        if any(b < 1 for b in self.blocks) or any(c < 1 for c in self.channels):
            raise ConfigError("stage block counts and channels must be positive")
        if any(b > a for a, b in zip(self.channels[1:], self.channels[:-1])):
            raise ConfigError(f"stage channels must be non-decreasing, got {self.channels}")
        if self.stem_stride != 2:
            raise ConfigError("stem stride must be 2 (stages then reach 1/4 ... 1/32)")
        if self.stem_channels < 1:
            raise ConfigError("stem width must be positive")
        if not set(DISTILL_LEVELS) <= set(self.tap_levels) <= set(ALL_LEVELS):
            raise ConfigError(f"tap levels must include {DISTILL_LEVELS}, got {self.tap_levels}")
        if (self.input_mean is None) != (self.input_std is None):
            raise ConfigError("input mean and std must be given together")
        if self.input_mean is not None:
            if len(self.input_mean) != 3 or len(self.input_std) != 3:
                raise ConfigError("input mean/std need one value per RGB channel")
            if min(self.input_std) <= 0:
                raise ConfigError(f"input std must be positive, got {self.input_std}")

    def level_channels(self) -> dict[int, int]:
        return dict(zip(ALL_LEVELS, self.channels))


@dataclass(frozen=True)
class DecoderSpec:
    input_channels: int = 128
    # internal widths at 1/16, 1/8, 1/4
    widths: tuple[int, ...] = (96, 48, 24)
    # head output channels at 1/16, 1/8, 1/4 (= teacher-B tap channels)
    out_channels: tuple[int, ...] = (96, 48, 24)
    blocks_per_level: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "out_channels", tuple(self.out_channels))

    def validate(self) -> None:
        if len(self.widths) != 3 or len(self.out_channels) != 3:
            raise ConfigError("a decoder spec has exactly three output levels")
        if self.input_channels < 1 or min(self.widths) < 1 or min(self.out_channels) < 1:
            raise ConfigError("decoder channel counts must be positive")
        if self.blocks_per_level < 0:
            raise ConfigError("blocks_per_level must be >= 0")

    @property
    def levels(self) -> tuple[int, ...]:
        return (16, 8, 4)

    @classmethod
    def for_teachers(cls, teacher_a: PyramidSpec, teacher_b: PyramidSpec,
                     widths: tuple[int, ...] | None = None) -> "DecoderSpec":
        b = teacher_b.level_channels()
        out = (b[16], b[8], b[4])
        return cls(input_channels=teacher_a.channels[3], widths=widths or out, out_channels=out)


DESK_TEACHER_A = PyramidSpec()
DESK_TEACHER_B = PyramidSpec(stem_channels=24, blocks=(2, 2, 2, 2), channels=(24, 48, 96, 192))


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["kind"] = "decoder" if isinstance(spec, DecoderSpec) else "pyramid"
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def spec_from_dict(d: Mapping):
    d = dict(d)
    kind = d.pop("kind", "pyramid")
    cls = DecoderSpec if kind == "decoder" else PyramidSpec
    return cls(**d)


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]
    source_role: str
    attention: dict[int, Tensor] = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def __contains__(self, level: int) -> bool:
        return level in self.levels


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class PyramidNet(nn.Module):
    """Miniature residual net with taps at 1/4, 1/8, 1/16 and 1/32."""

    def __init__(self, spec: PyramidSpec, role: str, generator: torch.Generator):
        super().__init__()
        self.spec, self.role, self.frozen = spec, role, False
        self.meta: dict = {}
        self.stem = core.ConvBNReLU(3, spec.stem_channels, 3, spec.stem_stride, generator)
        stages = []
        c_in = spec.stem_channels
        for n_blocks, c_out in zip(spec.blocks, spec.channels):
            blocks = [core.ResidualBlock(c_in, c_out, 2, generator)]
            blocks += [core.ResidualBlock(c_out, c_out, 1, generator) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor, levels=DISTILL_LEVELS, gates=None, guide=None):
        feats, attn = {}, {}
        deepest = max(levels)
        if self.spec.input_mean is not None:
            mean = torch.tensor(self.spec.input_mean, dtype=x.dtype).view(1, 3, 1, 1)
            std = torch.tensor(self.spec.input_std, dtype=x.dtype).view(1, 3, 1, 1)
            x = (x - mean) / std
        x = self.stem(x)
        for level, stage in zip(ALL_LEVELS, self.stages):
            x = stage(x)
            if gates is not None and level in gates:
                x, attn[level] = gates.modulate(level, x, guide[level])
            if level in levels:
                feats[level] = x
            if level == deepest:
                break
        return feats, attn


class Decoder(nn.Module):
    """Student-B: reconstructs 1/16, 1/8, 1/4 features from the 1/32 bottleneck.

    Each level: bilinear x2 -> conv3x3-BN-ReLU -> residual block(s) -> trunk;
    the trunk (optionally attention-gated) feeds both the next level and a
    bias-free 1x1 projection head producing the tapped feature.
    """

    def __init__(self, spec: DecoderSpec, role: str, generator: torch.Generator):
        super().__init__()
        self.spec, self.role, self.frozen = spec, role, False
        self.meta: dict = {}
        ups, heads = [], []
        c_in = spec.input_channels
        for width, c_out in zip(spec.widths, spec.out_channels):
            layers = [core.ConvBNReLU(c_in, width, 3, 1, generator)]
            layers += [core.ResidualBlock(width, width, 1, generator)
                       for _ in range(spec.blocks_per_level)]
            ups.append(nn.Sequential(*layers))
            heads.append(core.Conv(width, c_out, 1, 1, generator))
            c_in = width
        self.ups = nn.ModuleList(ups)
        self.heads = nn.ModuleList(heads)

    def forward(self, z: Tensor, gates=None, guide=None):
        feats, attn = {}, {}
        x = z
        for level, up, head in zip(self.spec.levels, self.ups, self.heads):
            x = core.upsample_bilinear(x, x.shape[2] * 2, x.shape[3] * 2)
            x = up(x)
            if gates is not None and level in gates:
                x, attn[level] = gates.modulate(level, x, guide[level])
            feats[level] = head(x)
        return feats, attn


Network = PyramidNet | Decoder


def build_network(role: str, spec, seed: int) -> Network:
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}; expected one of {ROLES}")
    spec.validate()
    g = torch.Generator().manual_seed(int(seed))
    if role == "student-B":
        if not isinstance(spec, DecoderSpec):
            raise ConfigError("student-B needs a DecoderSpec")
        return Decoder(spec, role, g)
    if not isinstance(spec, PyramidSpec):
        raise ConfigError(f"{role} needs a PyramidSpec")
    return PyramidNet(spec, role, g)


def freeze(net: Network) -> Network:
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    net.frozen = True
    return net


def named_parameters(net: nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in net.named_parameters()}


def _check_input(batch: Tensor) -> None:
    core.check4(batch, "image batch")
    if batch.shape[1] != 3:
        raise ShapeError(f"expected 3-channel images, got {batch.shape[1]}")
    if batch.shape[2] % 32 or batch.shape[3] % 32:
        raise ShapeError(f"image size {batch.shape[2]}x{batch.shape[3]} is not divisible by 32")


def forward_pyramid(net: PyramidNet, batch: Tensor, levels=None, gates=None,
                    guide: FeaturePyramid | None = None) -> FeaturePyramid:
    """Run a pyramid net and return its taps.

    ``levels`` defaults to the network's tap levels. A frozen net runs in eval
    mode without recording a tape. ``gates`` (level -> attention gate) with a
    detached ``guide`` pyramid modulates the stage outputs in place.
    """
    _check_input(batch)
    levels = tuple(levels or net.spec.tap_levels)
    if gates is not None and guide is None:
        raise ShapeError("attention gates need the teacher pyramid as guide")
    g = None if guide is None else {k: v.detach() for k, v in guide.levels.items()}
    if net.frozen:
        net.eval()
        with torch.no_grad():
            feats, attn = net(batch, levels, gates, g)
    else:
        feats, attn = net(batch, levels, gates, g)
    return FeaturePyramid(feats, net.role, attn)


def forward_decoder(decoder: Decoder, bottleneck: Tensor, gates=None,
                    guide: FeaturePyramid | None = None) -> FeaturePyramid:
    core.check4(bottleneck, "bottleneck")
    if bottleneck.shape[1] != decoder.spec.input_channels:
        raise ShapeError(f"decoder expects {decoder.spec.input_channels} bottleneck channels, "
                         f"got {bottleneck.shape[1]}")
    if gates is not None and guide is None:
        raise ShapeError("attention gates need the teacher pyramid as guide")
    g = None if guide is None else {k: v.detach() for k, v in guide.levels.items()}
    z = bottleneck.detach()
    if decoder.frozen:
        decoder.eval()
        with torch.no_grad():
            feats, attn = decoder(z, gates, g)
    else:
        feats, attn = decoder(z, gates, g)
    return FeaturePyramid(feats, decoder.role, attn)


# ---------------------------------------------------------------------------
# pretext pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretextConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0


def _calibrate_bn(net: PyramidNet, corpus, batch_size: int, seed: int) -> None:
    from .data import batch_iter

    net.train()
    with torch.no_grad():
        for _, x in batch_iter(corpus, batch_size, seed, epoch=0):
            net(x, ALL_LEVELS)


def pretrain_teacher(net: PyramidNet, pretext, config: PretextConfig | None = None,
                     heldout=None, skip: bool = False) -> PyramidNet:
    """Train ``net`` as a k-class texture classifier, then freeze it.

    A temporary global-average-pool + linear head sits on the 1/32 tap and is
    discarded afterwards. With ``skip=True`` no optimization happens; batch
    norm running statistics are still populated from the pretext images so
    the frozen net can run in eval mode. Held-out accuracy (or None when
    skipped) is stored in ``net.meta["pretext_accuracy"]``.
    """
    from .data import batch_iter

    config = config or PretextConfig()
    if not isinstance(net, PyramidNet):
        raise ConfigError("only pyramid nets can be pretrained as teachers")
    if skip:
        _calibrate_bn(net, pretext, config.batch_size, config.seed)
        net.meta["pretext_accuracy"] = None
        return freeze(net)

    targets = torch.as_tensor(pretext.targets, dtype=torch.long)
    k = int(targets.max()) + 1
    g = torch.Generator().manual_seed(config.seed + 7919)
    head = nn.Linear(net.spec.channels[3], k)
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=g) / np.sqrt(head.in_features))
        head.bias.zero_()
    params = {**named_parameters(net, "net."), **named_parameters(head, "head.")}
    buffers: dict[str, Tensor] = {}
    net.train()
    for epoch in range(config.epochs):
        for idx, x in batch_iter(pretext, config.batch_size, config.seed, epoch):
            feats, _ = net(x, ALL_LEVELS)
            logits = head(feats[32].mean(dim=(2, 3)))
            loss = F.cross_entropy(logits, targets[idx])
            core.backward(loss)
            core.sgd_step(params, config.lr, config.momentum, config.weight_decay, buffers)
        log.debug("pretext epoch %d loss %.4f", epoch, loss.item())

    if config.epochs == 0:
        _calibrate_bn(net, pretext, config.batch_size, config.seed)
    eval_set = heldout if heldout is not None else pretext
    net.eval()
    correct = 0
    eval_targets = torch.as_tensor(eval_set.targets, dtype=torch.long)
    with torch.no_grad():
        for idx, x in batch_iter(eval_set, 64, 0, 0, shuffle=False):
            feats, _ = net(x, ALL_LEVELS)
            pred = head(feats[32].mean(dim=(2, 3))).argmax(1)
            correct += int((pred == eval_targets[idx]).sum())
    acc = correct / len(eval_set)
    net.meta["pretext_accuracy"] = acc
    if acc <= 1.0 / k + 0.05:
        warnings.warn(f"{net.role} pretext accuracy {acc:.3f} is near chance (k={k}); "
                      "teacher features may be uninformative", RuntimeWarning, stacklevel=2)
    return freeze(net)
