"""Test-time anomaly maps: per-level disagreement, lifting to input resolution,
product / add-then-multiply fusion, and the image-level score.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from . import nn as core
from .archive import write_archive
from .backbones import DISTILL_LEVELS, forward_decoder, forward_pyramid
from .bundle import ModelBundle
from .distill import position_map
from .errors import ShapeError, StateError


def level_anomaly_map(ft: Tensor, fs_modulated: Tensor) -> Tensor:
    """(N, h, w) map of position losses between normalized teacher and student features."""
    with torch.no_grad():
        return position_map(ft, fs_modulated)


def lift_to_input(low: Tensor | np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear upsample of an (N, h_l, w_l) or (h_l, w_l) map to (…, h, w)."""
    t = torch.as_tensor(np.asarray(low, dtype=np.float32))
    squeeze = t.dim() == 2
    t = t.reshape(-1, 1, *t.shape[-2:])
    up = core.upsample_bilinear(t, h, w)[:, 0]
    # interpolation of nonnegative values is nonnegative; clamp guards rounding only
    up = up.clamp_min(0.0).numpy()
    return up[0] if squeeze else up


def _check_same(maps: Sequence[np.ndarray]) -> None:
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"anomaly maps differ in shape: {sorted(shapes)}")


def fuse_product(maps: Sequence[np.ndarray]) -> np.ndarray:
    if isinstance(maps, Mapping):
        maps = [maps[k] for k in sorted(maps)]
    maps = [np.asarray(m, dtype=np.float32) for m in maps]
    _check_same(maps)
    out = maps[0].copy()
    for m in maps[1:]:
        out *= m
    return out


def fuse_dual(maps_a, maps_b) -> np.ndarray:
    """prod over levels of (A_l + B_l)."""
    if isinstance(maps_a, Mapping) or isinstance(maps_b, Mapping):
        if not (isinstance(maps_a, Mapping) and isinstance(maps_b, Mapping)) or set(maps_a) != set(maps_b):
            raise ShapeError("fuse_dual needs both sides indexed by the same levels")
        keys = sorted(maps_a)
        maps_a, maps_b = [maps_a[k] for k in keys], [maps_b[k] for k in keys]
    if len(maps_a) != len(maps_b):
        raise ShapeError(f"fuse_dual got {len(maps_a)} vs {len(maps_b)} levels")
    a = [np.asarray(m, dtype=np.float32) for m in maps_a]
    b = [np.asarray(m, dtype=np.float32) for m in maps_b]
    _check_same(a + b)
    return fuse_product([x + y for x, y in zip(a, b)])


def image_score(final: np.ndarray) -> np.ndarray | float:
    """Max over the last two axes (per image for a stack of maps)."""
    final = np.asarray(final)
    s = final.max(axis=(-2, -1))
    return float(s) if s.ndim == 0 else s


def minmax(m: np.ndarray) -> np.ndarray:
    lo = m.min(axis=(-2, -1), keepdims=True)
    hi = m.max(axis=(-2, -1), keepdims=True)
    return (m - lo) / np.where(hi > lo, hi - lo, 1.0)


@dataclass
class InferenceResult:
    """All maps at input resolution; arrays are (N, H, W) float32."""
    maps_a: dict[int, np.ndarray]
    maps_b: dict[int, np.ndarray] = field(default_factory=dict)
    final: np.ndarray | None = None
    scores: np.ndarray | None = None
    attention_a: dict[int, np.ndarray] = field(default_factory=dict)
    attention_b: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return "dual" if self.maps_b else "baseline"

    def per_level_maps(self) -> dict[str, np.ndarray]:
        out = {f"A_1_{l}": m for l, m in self.maps_a.items()}
        out.update({f"B_1_{l}": m for l, m in self.maps_b.items()})
        return out


def infer(bundle: ModelBundle, images, dual: bool | None = None, attention: bool = True,
          normalize_maps: bool = False, chunk: int = 32) -> InferenceResult:
    """Run both student-teacher pairs and build six (or three) lifted maps plus the final map.

    ``dual=None`` picks dual mode when the bundle has student-B. ``attention``
    applies the trained gates (when present) exactly as in training.
    ``normalize_maps`` min-max scales each lifted map per image before fusion
    (off by default; it breaks the loss/score correspondence).
    """
    dual = bundle.mode == "dual" if dual is None else dual
    bundle.require(dual)
    x_all = torch.as_tensor(np.asarray(images, dtype=np.float32))
    core.check4(x_all, "images")
    h, w = x_all.shape[2:]
    ga = bundle.gates_a if attention else None
    gb = bundle.gates_b if attention else None
    parts: dict[str, dict[int, list]] = {k: {l: [] for l in DISTILL_LEVELS}
                                         for k in ("A", "B", "attA", "attB")}
    for nets in (bundle.teacher_a, bundle.student_a, bundle.teacher_b, bundle.student_b):
        if nets is not None:
            nets.eval()
    with torch.no_grad():
        for start in range(0, x_all.shape[0], chunk):
            x = x_all[start:start + chunk]
            levels_a = DISTILL_LEVELS + ((32,) if dual else ())
            ta = forward_pyramid(bundle.teacher_a, x, levels=levels_a)
            sa = forward_pyramid(bundle.student_a, x, levels=DISTILL_LEVELS, gates=ga, guide=ta)
            for l in DISTILL_LEVELS:
                parts["A"][l].append(level_anomaly_map(ta[l], sa[l]))
                if l in sa.attention:
                    parts["attA"][l].append(sa.attention[l][:, 0])
            if dual:
                tb = forward_pyramid(bundle.teacher_b, x, levels=DISTILL_LEVELS)
                sb = forward_decoder(bundle.student_b, ta[32], gates=gb, guide=tb)
                for l in DISTILL_LEVELS:
                    parts["B"][l].append(level_anomaly_map(tb[l], sb[l]))
                    if l in sb.attention:
                        parts["attB"][l].append(sb.attention[l][:, 0])

    def lifted(key):
        return {l: lift_to_input(torch.cat(v), h, w) for l, v in parts[key].items() if v}

    def raw(key):
        return {l: torch.cat(v).numpy() for l, v in parts[key].items() if v}

    res = InferenceResult(lifted("A"), lifted("B") if dual else {},
                          attention_a=raw("attA"), attention_b=raw("attB") if dual else {})
    ma, mb = res.maps_a, res.maps_b
    if normalize_maps:
        ma = {l: minmax(m) for l, m in ma.items()}
        mb = {l: minmax(m) for l, m in mb.items()}
    res.final = fuse_dual(ma, mb) if dual else fuse_product(ma)
    res.scores = image_score(res.final)
    return res


def _check_single(res: InferenceResult) -> None:
    if res.final is None:
        raise StateError("inference result has no final map")


def save_heatmap_png(m: np.ndarray, path: str | Path) -> None:
    """8-bit grayscale after per-image min-max scaling (visualization only)."""
    u8 = np.clip(np.rint(minmax(np.asarray(m, dtype=np.float64)) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def dump_raw_maps(res: InferenceResult, index: int, path: str | Path, meta: dict | None = None) -> None:
    """Raw float32 maps of one image in the tensor-archive format."""
    _check_single(res)
    tensors = {k: v[index] for k, v in res.per_level_maps().items()}
    tensors["final"] = res.final[index]
    for l, a in res.attention_a.items():
        tensors[f"attention_A_1_{l}"] = a[index]
    for l, a in res.attention_b.items():
        tensors[f"attention_B_1_{l}"] = a[index]
    write_archive(path, tensors, {"kind": "anomaly-maps", "score": float(res.scores[index]),
                                  **(meta or {})})
