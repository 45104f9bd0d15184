"""Channel-normalized feature matching losses, one-channel attention gates,
and the two (independent) student training loops.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import torch
from torch import Tensor, nn

from . import nn as core
from .backbones import (DISTILL_LEVELS, Decoder, FeaturePyramid, PyramidNet, forward_decoder,
                        forward_pyramid, named_parameters)
from .data import LabeledCorpus, assert_normal_only, batch_iter
from .errors import ConfigError, ShapeError, StateError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def normalize_channels(f: Tensor, dim: int = 1) -> Tensor:
    """Unit l2 norm along the channel axis; vectors with norm < 1e-12 become zero."""
    norm = torch.linalg.vector_norm(f, dim=dim, keepdim=True)
    safe = torch.where(norm < NORM_EPS, torch.ones_like(norm), norm)
    return torch.where(norm < NORM_EPS, torch.zeros_like(f), f / safe)


def position_loss(ft_hat: Tensor, fs_hat: Tensor, dim: int = 1) -> Tensor:
    """0.5 * ||ft_hat - fs_hat||^2 along ``dim`` (= 1 - cosine for unit vectors)."""
    if ft_hat.shape != fs_hat.shape:
        raise ShapeError(f"feature shapes differ: {tuple(ft_hat.shape)} vs {tuple(fs_hat.shape)}")
    return 0.5 * ((ft_hat - fs_hat) ** 2).sum(dim=dim)


def position_map(ft: Tensor, fs: Tensor) -> Tensor:
    """Per-position loss map (N, H, W) of raw features; teacher side detached."""
    if ft.shape != fs.shape:
        raise ShapeError(f"feature shapes differ: {tuple(ft.shape)} vs {tuple(fs.shape)}")
    return position_loss(normalize_channels(ft.detach()), normalize_channels(fs))


def level_loss(ft: Tensor, fs: Tensor) -> Tensor:
    """Mean of the position losses over the h x w grid, averaged over the batch."""
    return position_map(ft, fs).mean()


def total_loss(pyr_t: FeaturePyramid | Mapping[int, Tensor], pyr_s: FeaturePyramid | Mapping[int, Tensor],
               levels=DISTILL_LEVELS, per_level: dict | None = None) -> Tensor:
    """Unweighted sum of level losses. ``per_level`` (if given) receives the detached terms."""
    total = None
    for level in levels:
        if level not in pyr_t or level not in pyr_s:
            raise ShapeError(f"pyramid is missing level 1/{level}")
        term = level_loss(pyr_t[level], pyr_s[level])
        if per_level is not None:
            per_level[level] = term.item()
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class AttentionGate(nn.Module):
    """1x1 conv (C -> 1) + sigmoid on detached teacher features."""

    def __init__(self, channels: int, level: int, pair: str):
        super().__init__()
        self.level, self.pair = level, pair
        self.weight = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, teacher_features: Tensor) -> Tensor:
        return attention_forward(self, teacher_features)


def attention_forward(gate: AttentionGate, teacher_features: Tensor) -> Tensor:
    core.check4(teacher_features, "teacher features")
    if teacher_features.shape[1] != gate.weight.shape[1]:
        raise ShapeError(f"gate at 1/{gate.level} expects {gate.weight.shape[1]} channels, "
                         f"got {teacher_features.shape[1]}")
    logits = core.conv2d(teacher_features.detach(), gate.weight, 1, 0, gate.bias)
    return torch.sigmoid(logits)


def apply_attention(fs: Tensor, a: Tensor) -> Tensor:
    if a.dim() != 4 or a.shape[1] != 1 or a.shape[2:] != fs.shape[2:] or a.shape[0] != fs.shape[0]:
        raise ShapeError(f"attention map {tuple(a.shape)} does not match features {tuple(fs.shape)}")
    return fs * a


class GateSet(nn.Module):
    """The attention gates of one student-teacher pair, one per distillation level."""

    def __init__(self, pair: str, channels: Mapping[int, int], levels=DISTILL_LEVELS):
        super().__init__()
        self.pair = pair
        self.levels = tuple(levels)
        self.gates = nn.ModuleDict({str(l): AttentionGate(channels[l], l, pair) for l in self.levels})

    def __contains__(self, level: int) -> bool:
        return str(level) in self.gates

    def __getitem__(self, level: int) -> AttentionGate:
        return self.gates[str(level)]

    def __len__(self) -> int:
        return len(self.gates)

    def modulate(self, level: int, fs: Tensor, teacher_features: Tensor) -> tuple[Tensor, Tensor]:
        a = self[level](teacher_features)
        return apply_attention(fs, a), a


def make_gates(pair: str, teacher: PyramidNet) -> GateSet:
    return GateSet(pair, teacher.spec.level_channels())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Desk defaults; ``TrainConfig.full_scale()`` gives the full-scale operating point."""
    lr: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    image_size: int = 64
    attention_enabled: bool = True

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} is not divisible by 32")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The full-scale operating point: 256px, batch 32, 100 epochs, lr 0.4."""
        base = dict(lr=0.4, momentum=0.9, weight_decay=1e-4, batch_size=32, epochs=100,
                    image_size=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    levels: tuple[int, ...] = DISTILL_LEVELS
    rows: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        """Loss table (epoch, per-level losses, total). Timings go to ``write_timing_csv``."""
        cols = ["epoch"] + [f"loss_1_{l}" for l in self.levels] + ["total"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(r[l]) for l in self.levels] + [repr(r["total"])])

    def write_timing_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for r, s in zip(self.rows, self.seconds):
                w.writerow([r["epoch"], f"{s:.3f}"])

    def to_meta(self) -> list[dict]:
        return [{("total" if k == "total" else str(k)): v for k, v in r.items()} for r in self.rows]


def teacher_cache(teacher: PyramidNet, corpus: LabeledCorpus, levels, chunk: int = 64) -> dict[int, Tensor]:
    """Frozen-teacher features for the whole corpus, computed once in fixed chunks."""
    if not teacher.frozen:
        raise StateError(f"{teacher.role} must be frozen before distillation")
    out: dict[int, list[Tensor]] = {l: [] for l in levels}
    for _, x in batch_iter(corpus, chunk, 0, shuffle=False):
        pyr = forward_pyramid(teacher, x, levels=levels)
        for l in levels:
            out[l].append(pyr[l])
    return {l: torch.cat(v) for l, v in out.items()}


def _train_loop(student, gates, corpus, config: TrainConfig, step_fn) -> LossReport:
    config.validate()
    assert_normal_only(corpus)
    if corpus.image_size != config.image_size:
        raise ConfigError(f"corpus images are {corpus.image_size}px, config says {config.image_size}px")
    use_gates = gates is not None and config.attention_enabled
    params = named_parameters(student, "student.")
    if use_gates:
        params.update(named_parameters(gates, "gates."))
    buffers: dict[str, Tensor] = {}
    report = LossReport()
    student.train()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = {l: 0.0 for l in DISTILL_LEVELS}
        for idx, x in batch_iter(corpus, config.batch_size, config.seed, epoch):
            per_level: dict[int, float] = {}
            loss = step_fn(idx, x, gates if use_gates else None, per_level)
            core.backward(loss)
            core.sgd_step(params, config.lr, config.momentum, config.weight_decay, buffers)
            for l in DISTILL_LEVELS:
                sums[l] += per_level[l] * len(idx)
        row = {"epoch": epoch + 1, **{l: sums[l] / len(corpus) for l in DISTILL_LEVELS}}
        row["total"] = sum(row[l] for l in DISTILL_LEVELS)
        report.rows.append(row)
        report.seconds.append(time.perf_counter() - t0)
        log.info("%s epoch %d loss %.5f", student.role, epoch + 1, row["total"])
    student.eval()
    return report


def train_student_A(teacher_a: PyramidNet, student_a: PyramidNet, gates_a: GateSet | None,
                    corpus: LabeledCorpus, config: TrainConfig):
    """Distill teacher-A into student-A (same architecture) at 1/4, 1/8, 1/16."""
    cache = teacher_cache(teacher_a, corpus, DISTILL_LEVELS)

    def step(idx, x, gates, per_level):
        t = FeaturePyramid({l: cache[l][idx] for l in DISTILL_LEVELS}, teacher_a.role)
        s = forward_pyramid(student_a, x, levels=DISTILL_LEVELS, gates=gates, guide=t)
        return total_loss(t, s, per_level=per_level)

    report = _train_loop(student_a, gates_a, corpus, config, step)
    return student_a, gates_a, report


def train_student_B(teacher_a: PyramidNet, teacher_b: PyramidNet, decoder: Decoder,
                    gates_b: GateSet | None, corpus: LabeledCorpus, config: TrainConfig):
    """Train the decoder to reconstruct teacher-B's pyramid from teacher-A's 1/32 tap."""
    bottleneck = teacher_cache(teacher_a, corpus, (32,))[32]
    cache = teacher_cache(teacher_b, corpus, DISTILL_LEVELS)

    def step(idx, x, gates, per_level):
        t = FeaturePyramid({l: cache[l][idx] for l in DISTILL_LEVELS}, teacher_b.role)
        s = forward_decoder(decoder, bottleneck[idx], gates=gates, guide=t)
        return total_loss(t, s, per_level=per_level)

    report = _train_loop(decoder, gates_b, corpus, config, step)
    return decoder, gates_b, report
