"""ROC-AUC (Mann-Whitney with half credit for ties), pixel/image AUC reports,
and the ablation harness (per-resolution, teacher swap, attention on/off).
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .anomaly import InferenceResult, image_score, infer
from .backbones import DISTILL_LEVELS
from .bundle import ModelBundle
from .data import LabeledCorpus
from .errors import ConfigError, UndefinedMetricError


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via average ranks in O(n log n)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # tie groups of equal scores: [starts[g], ends[g]) in sorted order
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg_rank = (starts + ends + 1) / 2.0          # 1-based mean rank of each group
    pos_per_group = np.add.reduceat(y_sorted.astype(np.int64), starts)
    rank_sum = float(np.dot(pos_per_group, avg_rank))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def pixel_auc(maps, masks, per_image: bool = False) -> float:
    """AUC over all pixels of all images pooled (default) or averaged per image."""
    maps = np.asarray(maps)
    masks = np.asarray(masks)
    if maps.shape != masks.shape:
        raise ValueError(f"maps {maps.shape} vs masks {masks.shape}")
    if not masks.any():
        raise UndefinedMetricError("no defective pixels in the evaluation set")
    if not per_image:
        return roc_auc(maps.ravel(), masks.ravel())
    vals = [roc_auc(m, k) for m, k in zip(maps, masks) if k.any() and not k.all()]
    return float(np.mean(vals))


def image_auc(scores, labels) -> float:
    return roc_auc(scores, labels)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    category: str
    pixel_auc: float
    image_auc: float
    # (variant, level) -> (pixel AUC, image AUC); variant in {"A", "B", "A+B"}
    per_resolution: dict[tuple[str, int], tuple[float, float]] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    def single_resolution(self, variant: str, metric: str) -> dict[int, float]:
        i = 0 if metric == "pixel" else 1
        return {l: v[i] for (var, l), v in self.per_resolution.items() if var == variant}


VARIANTS = ("A", "B", "A+B")


def evaluate(res: InferenceResult, corpus: LabeledCorpus, per_image_pixel: bool = False,
             tags: Mapping[str, str] | None = None) -> EvalReport:
    masks = corpus.masks
    labels = corpus.is_defect
    rep = EvalReport(corpus.category, pixel_auc(res.final, masks, per_image_pixel),
                     image_auc(res.scores, labels), tags=dict(tags or {}))
    singles: dict[str, dict[int, np.ndarray]] = {"A": res.maps_a}
    if res.maps_b:
        singles["B"] = res.maps_b
        singles["A+B"] = {l: res.maps_a[l] + res.maps_b[l] for l in res.maps_a}
    for variant, maps in singles.items():
        for l, m in maps.items():
            rep.per_resolution[(variant, l)] = (pixel_auc(m, masks, per_image_pixel),
                                                image_auc(image_score(m), labels))
    return rep


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(reports: Iterable[EvalReport]) -> tuple[list[str], list[list[str]]]:
    tag_keys = ["mode", "fusion", "attention", "teacher_b"]
    cols = tag_keys + ["category", "pixel_auc", "image_auc"]
    for metric, variant, l in itertools.product(("pixel", "image"), VARIANTS, DISTILL_LEVELS):
        cols.append(f"{metric}_{variant}_1_{l}")
    rows = []
    for r in reports:
        row = [r.tags.get(k, "") for k in tag_keys] + [r.category, _fmt(r.pixel_auc), _fmt(r.image_auc)]
        for metric, variant, l in itertools.product(("pixel", "image"), VARIANTS, DISTILL_LEVELS):
            v = r.per_resolution.get((variant, l))
            row.append(_fmt(None if v is None else v[0 if metric == "pixel" else 1]))
        rows.append(row)
    return cols, rows


def write_report_csv(reports: Iterable[EvalReport], path: str | Path) -> None:
    cols, rows = report_rows(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        w.writerows(rows)


def with_mean_row(reports: list[EvalReport]) -> list[EvalReport]:
    """Append a 'mean' row (per tag combination) when more than one category is present."""
    if len({r.category for r in reports}) < 2:
        return reports
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        groups.setdefault(tuple(sorted(r.tags.items())), []).append(r)
    out = list(reports)
    for tags, rs in groups.items():
        keys = set.intersection(*(set(r.per_resolution) for r in rs))
        out.append(EvalReport("mean", float(np.mean([r.pixel_auc for r in rs])),
                              float(np.mean([r.image_auc for r in rs])),
                              {k: tuple(np.mean([r.per_resolution[k] for r in rs], axis=0)) for k in keys},
                              dict(tags)))
    return out


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationMode:
    fusion: str = "dual"        # dual | baseline
    attention: bool = True
    teacher_b: str = "deeper"   # deeper | same

    @property
    def name(self) -> str:
        return f"{self.fusion}/att-{'on' if self.attention else 'off'}/tb-{self.teacher_b}"


def bundle_key(attention: bool, teacher_b: str) -> str:
    return f"att-{'on' if attention else 'off'}/tb-{teacher_b}"


@dataclass
class AblationPlan:
    modes: list[AblationMode] = field(default_factory=lambda: [
        AblationMode(f, a, t) for f, a, t in
        itertools.product(("baseline", "dual"), (True, False), ("deeper", "same"))])

    @classmethod
    def desk(cls) -> "AblationPlan":
        """Baseline and dual with attention on/off, deeper teacher-B."""
        return cls([AblationMode(f, a, "deeper")
                    for f, a in itertools.product(("baseline", "dual"), (True, False))])

    def bundle_keys(self) -> list[str]:
        return sorted({bundle_key(m.attention, m.teacher_b) for m in self.modes})


def ablate(bundles: Mapping[str, ModelBundle], corpus: LabeledCorpus, plan: AblationPlan,
           per_image_pixel: bool = False) -> list[EvalReport]:
    """One EvalReport per plan mode; ``bundles`` is keyed by ``bundle_key``.

    Baseline rows use only the A pair; their bundle may come from either
    teacher-B setting (student-A does not depend on teacher-B).
    """
    reports = []
    cache: dict[tuple[str, bool], InferenceResult] = {}
    for mode in plan.modes:
        key = bundle_key(mode.attention, mode.teacher_b)
        if key not in bundles and mode.fusion == "baseline":
            prefix = bundle_key(mode.attention, "").rsplit("/", 1)[0] + "/"
            key = next((k for k in sorted(bundles) if k.startswith(prefix)), key)
        if key not in bundles:
            raise ConfigError(f"no bundle for ablation mode {mode.name} (needs {key!r})")
        dual = mode.fusion == "dual"
        if (key, dual) not in cache:
            cache[(key, dual)] = infer(bundles[key], corpus.images, dual=dual)
        tags = {"mode": mode.name, "fusion": mode.fusion,
                "attention": "on" if mode.attention else "off", "teacher_b": mode.teacher_b}
        reports.append(evaluate(cache[(key, dual)], corpus, per_image_pixel, tags))
    return reports
