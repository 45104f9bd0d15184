"""Numeric substrate: 4-D float32 tensors, the layers the backbones need, SGD.

Tensors are ``torch.Tensor`` in (N, C, H, W) layout; torch autograd is the
recorded tape for reverse-mode differentiation. Batch normalization and the
optimizer are written out here so their exact semantics (epsilon, running
statistics momentum, weight-decay ordering) are pinned by this module rather
than by library defaults.
"""
from __future__ import annotations

import math
import os
from typing import Iterable, Mapping, MutableMapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import NumericError, ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Finite-value assertions after forward/backward; enable with RSTPM_DEBUG=1.
DEBUG = os.environ.get("RSTPM_DEBUG", "0") not in ("", "0")


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if DEBUG and not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def check4(x: Tensor, what: str = "input") -> Tensor:
    if x.dim() != 4:
        raise ShapeError(f"{what} must be 4-D (N, C, H, W), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ShapeError(f"{what} has an empty dimension: {tuple(x.shape)}")
    return x


# ---------------------------------------------------------------------------
# functional layer primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    check4(x)
    if weight.dim() != 4:
        raise ShapeError(f"conv weight must be (C_out, C_in, k, k), got {tuple(weight.shape)}")
    if stride not in (1, 2):
        raise ShapeError(f"conv stride must be 1 or 2, got {stride}")
    c_out, c_in, kh, kw = weight.shape
    if c_in != x.shape[1]:
        raise ShapeError(f"conv expects {c_in} input channels, got {x.shape[1]}")
    out_h = (x.shape[2] + 2 * padding - kh) // stride + 1
    out_w = (x.shape[3] + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv output would be {out_h}x{out_w} for input {tuple(x.shape)}")
    return check_finite(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: Tensor,
               running_var: Tensor, stats_ready: Tensor, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics (biased variance) normalize the
    input and the running statistics are updated in place with ``momentum``
    (running variance uses the unbiased estimate). In eval mode only the
    running statistics are used, and they must have been populated first.
    """
    check4(x)
    c = x.shape[1]
    if weight.shape != (c,):
        raise ShapeError(f"batch norm has {weight.shape[0]} channels, input has {c}")
    shape = (1, c, 1, 1)
    if training:
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        with torch.no_grad():
            n = x.numel() // c
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * unbiased.detach())
            stats_ready.fill_(1.0)
    else:
        if float(stats_ready) != 1.0:
            raise StateError("batch norm in eval mode before running statistics were populated")
        mean, var = running_mean, running_var
    y = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + eps)
    return check_finite(y * weight.view(shape) + bias.view(shape), "batch_norm")


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (``align_corners=False``)."""
    check4(x)
    if target_h < x.shape[2] or target_w < x.shape[3]:
        raise ShapeError(f"upsample target {target_h}x{target_w} smaller than source "
                         f"{x.shape[2]}x{x.shape[3]}")
    if (target_h, target_w) == tuple(x.shape[2:]):
        return x
    x = _resize_axis(x, 2, target_h)
    return _resize_axis(x, 3, target_w)


def _resize_axis(x: Tensor, dim: int, size: int) -> Tensor:
    # written as a + t * (b - a) so constant regions stay bit-exact
    n = x.shape[dim]
    if n == size:
        return x
    pos = ((torch.arange(size, dtype=torch.float64) + 0.5) * (n / size) - 0.5).clamp_min(0.0)
    lo = pos.floor().long().clamp_max(n - 1)
    hi = (lo + 1).clamp_max(n - 1)
    shape = [1] * x.dim()
    shape[dim] = size
    t = (pos - lo).to(x.dtype).view(shape)
    a = x.index_select(dim, lo)
    b = x.index_select(dim, hi)
    return a + t * (b - a)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

def he_normal_(w: Tensor, generator: torch.Generator) -> Tensor:
    fan_in = w[0].numel()
    with torch.no_grad():
        w.copy_(torch.randn(w.shape, generator=generator) * math.sqrt(2.0 / fan_in))
    return w


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 generator: torch.Generator | None = None, bias: bool = False):
        super().__init__()
        if stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {stride}")
        self.stride = stride
        self.padding = k // 2
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        he_normal_(self.weight, generator or torch.Generator().manual_seed(0))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding, self.bias)


class BatchNorm(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))
        # 0.0 until one training-mode pass has populated the running stats
        self.register_buffer("stats_ready", torch.zeros(()))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.stats_ready, self.training)


class ConvBNReLU(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.conv = Conv(c_in, c_out, k, stride, generator)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return torch.relu(self.bn(self.conv(x)))


class ResidualBlock(nn.Module):
    """conv3x3-BN-ReLU, conv3x3-BN, plus identity or 1x1-conv-BN projection skip, then ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, 3, stride, generator)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv(c_out, c_out, 3, 1, generator)
        self.bn2 = BatchNorm(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv(c_in, c_out, 1, stride, generator)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        return residual_block_forward(x, self)


def residual_block_forward(x: Tensor, block: ResidualBlock) -> Tensor:
    check4(x)
    if x.shape[1] != block.conv1.weight.shape[1]:
        raise ShapeError(f"residual block expects {block.conv1.weight.shape[1]} channels, "
                         f"got {x.shape[1]}")
    out = torch.relu(block.bn1(block.conv1(x)))
    out = block.bn2(block.conv2(out))
    skip = x if block.proj is None else block.proj_bn(block.proj(x))
    return torch.relu(out + skip)


# ---------------------------------------------------------------------------
# reverse mode and optimizer
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable trainable parameter."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise StateError("backward called on a value with no recorded forward pass")
    loss.backward()
    if DEBUG:
        for p in _params_reachable(loss):
            check_finite(p.grad, "gradient")


def _params_reachable(loss: Tensor) -> Iterable[Tensor]:
    seen, stack = set(), [loss.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        var = getattr(fn, "variable", None)
        if var is not None and var.grad is not None:
            yield var
        stack.extend(f for f, _ in fn.next_functions)


def sgd_step(params: Mapping[str, Tensor], lr: float, momentum: float, weight_decay: float,
             buffers: MutableMapping[str, Tensor]) -> None:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    For each trainable parameter with a gradient::

        g   = grad + weight_decay * value
        buf = momentum * buf + g
        value -= lr * buf

    Parameters that are frozen (``requires_grad=False``) or were not reached by
    the last backward pass (``grad is None``) are left untouched. Gradients are
    zeroed afterwards. ``buffers`` holds the momentum state keyed by name.
    """
    live = [(name, p) for name, p in params.items() if p.requires_grad and p.grad is not None]
    for name, p in live:
        if not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    with torch.no_grad():
        for name, p in live:
            g = p.grad
            if weight_decay:
                g = g + weight_decay * p
            buf = buffers.get(name)
            if buf is None:
                buf = torch.zeros_like(p)
                buffers[name] = buf
            buf.mul_(momentum).add_(g)
            p.sub_(lr * buf)
            p.grad = None


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
