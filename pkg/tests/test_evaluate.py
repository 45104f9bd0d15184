"""ROC-AUC against a pairwise oracle, pixel/image AUC, reports and the ablation harness."""
import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rstpm.anomaly import infer
from rstpm.evaluate import (AblationMode, AblationPlan, EvalReport, ablate, bundle_key, evaluate,
                            image_auc, pixel_auc, roc_auc, with_mean_row, write_report_csv)
from rstpm.errors import ConfigError, UndefinedMetricError


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    acc = 0.0
    for p in pos:
        for q in neg:
            acc += 1.0 if p > q else 0.5 if p == q else 0.0
    return acc / (len(pos) * len(neg))


@st.composite
def scored_labels(draw, max_n=500):
    n = draw(st.integers(2, max_n))
    # a small value pool forces plenty of ties
    pool = draw(st.sampled_from([3, 10, 1000]))
    scores = draw(st.lists(st.integers(0, pool), min_size=n, max_size=n))
    labels = draw(st.lists(st.booleans(), min_size=n, max_size=n).filter(
        lambda l: 0 < sum(l) < len(l)))
    return np.array(scores, dtype=np.float64) / pool, np.array(labels)


def test_auc_examples():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5, 0.7], [0, 1, 1]) == 0.75


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


@given(scored_labels())
def test_auc_equals_pairwise_oracle(sl):
    s, y = sl
    assert roc_auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


@given(scored_labels(200))
def test_auc_invariant_to_increasing_transform(sl):
    s, y = sl
    assert roc_auc(np.exp(3 * s) + 7, y) == roc_auc(s, y)


@given(scored_labels(200))
def test_auc_complement(sl):
    s, y = sl
    assert roc_auc(s, y) + roc_auc(s, ~y) == pytest.approx(1.0, abs=1e-12)
    assert 0 <= roc_auc(s, y) <= 1


def test_pixel_auc_examples(rng):
    masks = (rng.random((4, 8, 8)) < 0.2).astype(np.uint8)
    assert pixel_auc(masks.astype(np.float32), masks) == 1.0
    assert pixel_auc(np.full(masks.shape, 0.3), masks) == 0.5
    with pytest.raises(UndefinedMetricError):
        pixel_auc(np.zeros((2, 4, 4)), np.zeros((2, 4, 4), np.uint8))
    # pooled: a global offset between images matters; per-image averaging ignores it
    maps = masks + np.arange(4)[:, None, None] * 10.0
    assert pixel_auc(maps, masks, per_image=True) == 1.0
    assert pixel_auc(maps, masks) < 1.0


def test_image_auc_examples():
    assert image_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_shuffled_labels_average_half(tiny_bundle, tiny_corpus):
    test = tiny_corpus[1]
    scores = infer(tiny_bundle, test.images).scores
    r = np.random.default_rng(7)
    aucs = [image_auc(scores, r.permutation(test.is_defect)) for _ in range(100)]
    assert abs(np.mean(aucs) - 0.5) <= 0.05


def test_evaluate_report_shape(tiny_bundle, tiny_corpus):
    res = infer(tiny_bundle, tiny_corpus[1].images)
    rep = evaluate(res, tiny_corpus[1])
    assert len(rep.per_resolution) == 9
    assert all(0 <= v <= 1 for pair in rep.per_resolution.values() for v in pair)
    assert set(rep.single_resolution("A+B", "image")) == {4, 8, 16}
    base = evaluate(infer(tiny_bundle, tiny_corpus[1].images, dual=False), tiny_corpus[1])
    assert {v for v, _ in base.per_resolution} == {"A"}


def test_ablate_grid_and_csv(tiny_bundle, tiny_corpus, tmp_path):
    bundles = {bundle_key(True, "deeper"): tiny_bundle,
               bundle_key(False, "deeper"): tiny_bundle}
    reps = ablate(bundles, tiny_corpus[1], AblationPlan.desk())
    assert [r.tags["mode"] for r in reps] == [
        "baseline/att-on/tb-deeper", "baseline/att-off/tb-deeper",
        "dual/att-on/tb-deeper", "dual/att-off/tb-deeper"]
    write_report_csv(reps, tmp_path / "a.csv")
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert len(rows) == 5
    header = rows[0]
    assert {"pixel_auc", "image_auc", "pixel_A+B_1_4", "image_B_1_16", "image_A_1_8"} <= set(header)
    base = dict(zip(header, rows[1]))
    assert base["pixel_B_1_4"] == "" and base["pixel_A_1_4"] != ""
    assert len(AblationPlan().modes) == 8


def test_ablate_missing_bundle(tiny_bundle, tiny_corpus):
    plan = AblationPlan([AblationMode("dual", False, "same")])
    with pytest.raises(ConfigError):
        ablate({bundle_key(True, "deeper"): tiny_bundle}, tiny_corpus[1], plan)


def test_mean_row():
    a = EvalReport("x", 0.8, 0.6, {("A", 4): (0.5, 0.5)})
    b = EvalReport("y", 0.6, 1.0, {("A", 4): (1.0, 0.0)})
    out = with_mean_row([a, b])
    assert out[-1].category == "mean"
    assert out[-1].pixel_auc == pytest.approx(0.7) and out[-1].image_auc == pytest.approx(0.8)
    assert out[-1].per_resolution[("A", 4)] == (0.75, 0.25)
    assert with_mean_row([a]) == [a]
