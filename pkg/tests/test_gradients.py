"""Analytic gradients of the distillation loss vs central finite differences.

Each case builds the same computation twice from one seed: once in float32
(the production precision) and once in float64. The float64 replay provides
the finite-difference oracle for both comparisons.
"""
import copy

import pytest
import torch

from rstpm import nn as core
from rstpm.backbones import DecoderSpec, build_network, forward_decoder, forward_pyramid
from rstpm.distill import (AttentionGate, apply_attention, attention_forward, make_gates,
                           normalize_channels, position_loss, total_loss)
from rstpm.gradcheck import max_relative_error, numerical_grad

from conftest import TINY_A, TINY_B

TOL32, TOL64 = 1e-3, 1e-6


def run_check(build, h32=1e-3, h64=1e-6):
    """``build(dtype) -> (loss_fn, leaf)``; returns (err32, err64).

    The float32 analytic gradient is compared with float64 differences at
    step ``h32``; the float64 replay with differences at the finer ``h64``
    (at h = 1e-3 the O(h^2) truncation term alone is ~1e-6).
    """
    f32, x32 = build(torch.float32)
    assert x32.numel() <= 512
    core.backward(f32())
    a32 = x32.grad.detach().double().numpy()
    f64, x64 = build(torch.float64)
    n32 = numerical_grad(f64, x64, h32)
    n64 = numerical_grad(f64, x64, h64)
    x64.grad = None
    core.backward(f64())
    a64 = x64.grad.detach().numpy()
    return max_relative_error(a32, n32), max_relative_error(a64, n64)


def _features(shape, seed, dtype):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)


def test_position_loss_gradient_8_channels():
    def build(dtype):
        ft = _features((1, 8, 4, 4), 0, dtype)
        fs = _features((1, 8, 4, 4), 1, dtype).requires_grad_(True)
        return (lambda: position_loss(normalize_channels(ft), normalize_channels(fs)).mean()), fs
    e32, e64 = run_check(build)
    assert e32 < TOL32 and e64 < TOL64


def test_total_loss_gradient_raw_student_features():
    def build(dtype):
        t = {l: _features((2, c, s, s), l, dtype) for l, c, s in ((4, 4, 4), (8, 6, 2), (16, 8, 1))}
        s = {l: _features(v.shape, 100 + l, dtype).requires_grad_(True) for l, v in t.items()}
        leaf = s[4]
        return (lambda: total_loss(t, s)), leaf
    e32, e64 = run_check(build)
    assert e32 < TOL32 and e64 < TOL64


def _gate(dtype, c, seed):
    gate = AttentionGate(c, 4, "A").to(dtype)
    with torch.no_grad():
        gate.weight.copy_(_features(gate.weight.shape, seed, dtype))
        gate.bias.fill_(0.3)
    return gate


def test_attention_gate_weight_gradient():
    def build(dtype):
        ft = _features((2, 6, 4, 4), 2, dtype)
        fs = _features((2, 6, 4, 4), 3, dtype)
        gate = _gate(dtype, 6, 4)

        def f():
            mod = apply_attention(fs, attention_forward(gate, ft))
            # a channel-sum readout keeps the gate visible (unit-normalized
            # features alone are invariant to the positive gate scale)
            return total_loss({4: ft}, {4: mod}, levels=(4,)) + mod.sum() * 0.01
        return f, gate.weight
    e32, e64 = run_check(build)
    assert e32 < TOL32 and e64 < TOL64


def test_attention_scale_cancels_under_normalization():
    ft = _features((1, 6, 3, 3), 2, torch.float64)
    fs = _features((1, 6, 3, 3), 3, torch.float64)
    gate = _gate(torch.float64, 6, 4)
    loss = total_loss({4: ft}, {4: apply_attention(fs, attention_forward(gate, ft))}, levels=(4,))
    core.backward(loss)
    assert gate.weight.grad.abs().max().item() < 1e-12


def _as(dtype, net):
    return copy.deepcopy(net).to(dtype)


def test_backbone_stem_gradient():
    base_s = build_network("student-A", TINY_A, 11)
    base_t = build_network("teacher-A", TINY_A, 12)
    x0 = _features((2, 3, 32, 32), 5, torch.float32).clamp(-1, 1)

    def build(dtype):
        s, t = _as(dtype, base_s), _as(dtype, base_t)
        x = x0.to(dtype)
        with torch.no_grad():
            tp = forward_pyramid(t, x)
        return (lambda: total_loss(tp, forward_pyramid(s, x))), s.stem.conv.weight
    e32, e64 = run_check(build, h32=1e-5)
    assert e32 < TOL32 and e64 < TOL64


def test_backbone_gradient_through_attention_gates():
    base_s = build_network("student-A", TINY_A, 11)
    base_t = build_network("teacher-A", TINY_A, 12)
    x0 = _features((2, 3, 32, 32), 6, torch.float32).clamp(-1, 1)
    base_g = make_gates("A", base_t)
    with torch.no_grad():
        for l in base_g.levels:
            base_g[l].weight.copy_(_features(base_g[l].weight.shape, l, torch.float32) * 0.5)

    def build(dtype):
        s, t, g = _as(dtype, base_s), _as(dtype, base_t), _as(dtype, base_g)
        x = x0.to(dtype)
        with torch.no_grad():
            tp = forward_pyramid(t, x)
        return (lambda: total_loss(tp, forward_pyramid(s, x, gates=g, guide=tp))), g[4].weight
    e32, e64 = run_check(build, h32=1e-5)
    assert e32 < TOL32 and e64 < TOL64


def test_decoder_gradient():
    dspec = DecoderSpec.for_teachers(TINY_A, TINY_B, widths=(8, 6, 8))
    base_d = build_network("student-B", dspec, 21)
    base_ta = build_network("teacher-A", TINY_A, 22)
    base_tb = build_network("teacher-B", TINY_B, 23)
    x0 = _features((2, 3, 64, 64), 7, torch.float32).clamp(-1, 1)

    def build(dtype):
        d, ta, tb = _as(dtype, base_d), _as(dtype, base_ta), _as(dtype, base_tb)
        x = x0.to(dtype)
        with torch.no_grad():
            z = forward_pyramid(ta, x, levels=(4, 8, 16, 32))[32]
            tp = forward_pyramid(tb, x)
        return (lambda: total_loss(tp, forward_decoder(d, z))), d.ups[1][0].conv.weight
    e32, e64 = run_check(build, h32=1e-5)
    assert e32 < TOL32 and e64 < TOL64


def test_decoder_gradient_with_gates_on_head():
    dspec = DecoderSpec.for_teachers(TINY_A, TINY_B, widths=(8, 6, 8))
    base_d = build_network("student-B", dspec, 31)
    base_ta = build_network("teacher-A", TINY_A, 32)
    base_tb = build_network("teacher-B", TINY_B, 33)
    base_g = make_gates("B", base_tb)
    with torch.no_grad():
        for l in base_g.levels:
            base_g[l].weight.copy_(_features(base_g[l].weight.shape, 40 + l, torch.float32) * 0.5)
    x0 = _features((2, 3, 64, 64), 8, torch.float32).clamp(-1, 1)

    def build(dtype):
        d, ta, tb, g = (_as(dtype, m) for m in (base_d, base_ta, base_tb, base_g))
        x = x0.to(dtype)
        with torch.no_grad():
            z = forward_pyramid(ta, x, levels=(4, 8, 16, 32))[32]
            tp = forward_pyramid(tb, x)
        return (lambda: total_loss(tp, forward_decoder(d, z, gates=g, guide=tp))), d.heads[2].weight
    e32, e64 = run_check(build, h32=1e-5)
    assert e32 < TOL32 and e64 < TOL64


def test_relative_error_definition():
    assert max_relative_error([1.0, 0.0], [1.0, 1e-9]) == pytest.approx(1e-9)
    assert max_relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
    assert max_relative_error([0.0], [0.0]) == 0.0
