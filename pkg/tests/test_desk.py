"""Desk-scale training behaviour, read off the cached seed-0 desk run."""
import numpy as np

from conftest import desk_run


def test_student_a_loss_drops_below_quarter():
    totals = desk_run(0).losses["A"].totals
    assert len(totals) == 30
    assert totals[-1] < 0.25 * totals[0]


def test_student_b_smoothed_loss_non_increasing():
    totals = np.asarray(desk_run(0).losses["B"].totals)
    ma = np.convolve(totals, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0), np.round(ma, 5)


def test_normal_training_images_score_below_defect_median():
    run = desk_run(0)
    from rstpm.anomaly import infer
    from rstpm.pipeline import make_corpus
    train, _ = make_corpus(run.cfg)
    normal = infer(run.bundle, train.images[:20]).scores
    defect_median = np.median(run.dual.scores[run.test.is_defect])
    assert np.all(normal < defect_median)
