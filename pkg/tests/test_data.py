"""Synthetic corpora, pretext corpora, batching and the MVTec directory layout."""
import shutil
import time

import numpy as np
import pytest
from PIL import Image

from rstpm.data import (DEFECT_KINDS, NORMAL, DefectSpec, LabeledCorpus, TextureSpec,
                        assert_normal_only, batch_iter, export_mvtec_layout, gen_pretext,
                        gen_synthetic, inject_defects, load_mvtec_layout, render_texture)
from rstpm.errors import ConfigError, IngestionError, InputError


def test_synthetic_deterministic():
    a = gen_synthetic(6, 3, 4, seed=11)
    b = gen_synthetic(6, 3, 4, seed=11)
    c = gen_synthetic(6, 3, 4, seed=12)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.masks.tobytes() == y.masks.tobytes() and x.labels == y.labels
    assert a[0].images.tobytes() != c[0].images.tobytes()


@pytest.mark.parametrize("kind", DEFECT_KINDS)
def test_mask_is_exactly_changed_pixels(kind):
    spec = DefectSpec(kinds=(kind,))
    for seed in range(5):
        r = np.random.default_rng(seed)
        base = render_texture(TextureSpec(), 64, r)
        img, mask = inject_defects(base, kind, spec, r)
        changed = np.any(img != base, axis=0)
        assert np.array_equal(changed, mask.astype(bool))
        assert mask.sum() >= 1
        assert img.min() >= 0 and img.max() <= 1


def test_corpus_contract():
    train, test = gen_synthetic(5, 4, 8, seed=2)
    assert train.labels == [NORMAL] * 5 and not train.masks.any()
    assert test.labels[:4] == [NORMAL] * 4
    assert set(test.labels[4:]) == set(DEFECT_KINDS)
    assert all(m.sum() >= 1 for m in test.masks[4:])
    assert not test.masks[:4].any()
    assert test.masks.shape[1:] == test.images.shape[2:] == (64, 64)
    for c in (train, test):
        assert c.images.dtype == np.float32 and c.images.min() >= 0 and c.images.max() <= 1


def test_bad_configs():
    with pytest.raises(ConfigError):
        gen_synthetic(2, 2, 2, defects=DefectSpec(size=(10, 80)))
    with pytest.raises(ConfigError):
        gen_synthetic(0, 2, 2)
    with pytest.raises(ConfigError):
        gen_synthetic(2, 2, 2, image_size=48)
    with pytest.raises(ConfigError):
        gen_synthetic(2, 2, 2, defects=DefectSpec(kinds=("dent",)))


def test_desk_corpus_is_fast():
    t0 = time.perf_counter()
    train, test = gen_synthetic(200, 50, 50, seed=0, image_size=64)
    assert time.perf_counter() - t0 < 10
    assert (len(train), len(test), int(test.is_defect.sum())) == (200, 100, 50)


def test_pretext_balanced_and_deterministic():
    p = gen_pretext(4, 100, seed=5)
    assert len(p) == 400
    assert np.array_equal(np.bincount(p.targets), [100] * 4)
    assert p.images.tobytes() == gen_pretext(4, 100, seed=5).images.tobytes()
    with pytest.raises(ConfigError):
        gen_pretext(1, 3)


def test_pretext_nearest_centroid_above_chance():
    k = 8
    fit = gen_pretext(k, 30, seed=1, image_size=32)
    held = gen_pretext(k, 20, seed=2, image_size=32)
    x, xh = fit.images.reshape(len(fit), -1), held.images.reshape(len(held), -1)
    cent = np.stack([x[fit.targets == c].mean(0) for c in range(k)])
    pred = np.argmin(((xh[:, None] - cent[None]) ** 2).sum(-1), axis=1)
    assert (pred == held.targets).mean() > 1 / k + 0.1


def test_batch_iter_contract():
    train, _ = gen_synthetic(10, 1, 1, seed=0)
    batches = list(batch_iter(train, 4, seed=3))
    assert [len(i) for i, _ in batches] == [4, 4, 2]
    idx = np.concatenate([i for i, _ in batches])
    assert sorted(idx) == list(range(10))
    for i, x in batches:
        assert np.array_equal(x.numpy(), train.images[i])
    again = np.concatenate([i for i, _ in batch_iter(train, 4, seed=3)])
    other = np.concatenate([i for i, _ in batch_iter(train, 4, seed=3, epoch=1)])
    assert np.array_equal(idx, again) and not np.array_equal(idx, other)
    with pytest.raises(InputError):
        next(batch_iter(train, 0, seed=0))
    empty = LabeledCorpus(np.zeros((0, 3, 4, 4), np.float32), [], np.zeros((0, 4, 4), np.uint8))
    with pytest.raises(InputError):
        next(batch_iter(empty, 4, seed=0))


def test_normal_only_assertion():
    _, test = gen_synthetic(1, 1, 1)
    with pytest.raises(InputError):
        assert_normal_only(test)


def test_mvtec_roundtrip(tmp_path):
    train, test = gen_synthetic(10, 3, 4, seed=9, category="fabric")
    export_mvtec_layout(tmp_path, train, test)
    tr, te = load_mvtec_layout(tmp_path, "fabric", image_size=64)
    assert len(tr) == 10 and tr.labels == [NORMAL] * 10 and not tr.masks.any()
    # images stored as 8-bit PNG, and generated values are already on the 1/255 grid
    assert np.array_equal(tr.images, train.images)
    assert sorted(te.labels) == sorted(test.labels)
    for label in set(test.labels):
        a = test.masks[[i for i, l in enumerate(test.labels) if l == label]]
        b = te.masks[[i for i, l in enumerate(te.labels) if l == label]]
        assert np.array_equal(a, b)
    assert "scratch-line" in te.labels and te.masks[te.labels.index("scratch-line")].any()


def test_mvtec_resize_keeps_masks_binary(tmp_path):
    train, test = gen_synthetic(2, 1, 2, seed=9)
    export_mvtec_layout(tmp_path, train, test)
    tr, te = load_mvtec_layout(tmp_path, "synthetic", image_size=32)
    assert te.images.shape[2:] == te.masks.shape[1:] == (32, 32)
    assert set(np.unique(te.masks)) <= {0, 1}
    assert te.images.min() >= 0 and te.images.max() <= 1


def test_mvtec_errors(tmp_path):
    train, test = gen_synthetic(2, 1, 2, seed=9)
    base = export_mvtec_layout(tmp_path / "a", train, test)
    victim = next((base / "ground_truth").rglob("*_mask.png"))
    victim.unlink()
    with pytest.raises(IngestionError, match=victim.name.replace("_mask.png", "")):
        load_mvtec_layout(tmp_path / "a", "synthetic", 64)
    base = export_mvtec_layout(tmp_path / "b", train, test)
    shutil.rmtree(base / "train" / NORMAL)
    (base / "train" / NORMAL).mkdir()
    with pytest.raises(IngestionError):
        load_mvtec_layout(tmp_path / "b", "synthetic", 64)
    base = export_mvtec_layout(tmp_path / "c", train, test)
    (base / "test" / "good" / "000.png").write_bytes(b"not a png")
    with pytest.raises(IngestionError):
        load_mvtec_layout(tmp_path / "c", "synthetic", 64)


def test_defective_train_folder_is_rejected(tmp_path):
    train, test = gen_synthetic(2, 1, 1, seed=9)
    base = export_mvtec_layout(tmp_path, train, test)
    (base / "train" / "crack").mkdir()
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(base / "train" / "crack" / "x.png")
    tr, _ = load_mvtec_layout(tmp_path, "synthetic", 64)
    with pytest.raises(InputError):
        assert_normal_only(tr)
