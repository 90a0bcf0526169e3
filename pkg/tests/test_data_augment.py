import numpy as np
import pytest
import torch

from dualkan.augment import (AugmentationPolicy, IngestError, augment_batch, make_view_batch,
                             make_views)
from dualkan.data import (ClassSpec, DataConfigError, DatasetSpec, baseline_features,
                          dataset_hash, gen_synthetic_dataset, read_manifest, write_dataset)
from dualkan.evaluation import compute_metrics, fit_logistic


def test_same_seed_same_hash():
    spec = DatasetSpec.default(per_class=5, size=32)
    assert dataset_hash(gen_synthetic_dataset(spec, 3)) == dataset_hash(gen_synthetic_dataset(spec, 3))
    assert dataset_hash(gen_synthetic_dataset(spec, 3)) != dataset_hash(gen_synthetic_dataset(spec, 4))
    assert dataset_hash(gen_synthetic_dataset(spec, 3, split=1)) != dataset_hash(gen_synthetic_dataset(spec, 3))


def test_zero_jitter_stripes_differ_only_in_phase():
    size = 32
    spec = DatasetSpec((ClassSpec("stripes", {"angle": 30.0, "frequency": 6.0}),
                        ClassSpec("checker")), per_class=6, size=size, jitter=0.0)
    ds = gen_synthetic_dataset(spec, 0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    a = np.deg2rad(30.0)
    arg = 2 * np.pi * 6.0 / size * (xx * np.cos(a) + yy * np.sin(a))
    # a phase shift keeps every channel inside span{1, cos, sin} of the fixed carrier
    basis = np.stack([np.ones(size * size), np.cos(arg).ravel(), np.sin(arg).ravel()], axis=1)
    stripes = ds.images[ds.labels == 0]
    for img in stripes:
        for ch in img:
            coef, *_ = np.linalg.lstsq(basis, ch.ravel(), rcond=None)
            assert np.abs(basis @ coef - ch.ravel()).max() <= 1 / 255
    assert not np.array_equal(stripes[0], stripes[1])


def test_spec_validation():
    with pytest.raises(DataConfigError):
        ClassSpec("waves")
    with pytest.raises(DataConfigError):
        DatasetSpec.default(num_classes=9)


def test_baseline_classifier_separates_classes():
    train = gen_synthetic_dataset(DatasetSpec.default(per_class=100), 0, split=0)
    test = gen_synthetic_dataset(DatasetSpec.default(per_class=50), 0, split=1)
    probe = fit_logistic(baseline_features(train.images), train.labels, 4)
    m = compute_metrics(probe.scores(baseline_features(test.images)), test.labels, 4)
    assert m.top1 > 0.9


def test_manifest_round_trip(tmp_path):
    ds = gen_synthetic_dataset(DatasetSpec.default(2, per_class=3, size=16), 0)
    manifest = write_dataset(ds, str(tmp_path), "tiny")
    back = read_manifest(manifest)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_manifest_rejects_malformed_lines(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("no-tab-here\n")
    with pytest.raises(DataConfigError):
        read_manifest(str(bad))


def test_identity_policy_is_noop():
    img = torch.rand(3, 16, 16)
    ident = AugmentationPolicy.identity()
    for v in make_views(img, ident, ident, (1, 2, 3)):
        assert torch.equal(v, img)


def test_views_are_deterministic():
    imgs = torch.rand(4, 3, 16, 16)
    a = make_view_batch(imgs, AugmentationPolicy.weak(), AugmentationPolicy.strong(), 7, 2, [0, 5, 9, 3])
    b = make_view_batch(imgs, AugmentationPolicy.weak(), AugmentationPolicy.strong(), 7, 2, [0, 5, 9, 3])
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_weak_views_differ():
    img = torch.rand(3, 16, 16)
    weak = AugmentationPolicy.weak()
    differ = sum(not torch.equal(*make_views(img, weak, weak, (2 * s, 1, 2 * s + 1))[::2])
                 for s in range(100))
    assert differ > 50


def test_view_range_and_shape():
    imgs = torch.rand(5, 3, 16, 16)
    out = augment_batch(imgs, AugmentationPolicy.strong(), [np.random.default_rng(i) for i in range(5)])
    assert out.shape == imgs.shape and out.min() >= 0 and out.max() <= 1


def test_augment_input_checks():
    with pytest.raises(IngestError):
        augment_batch(torch.rand(3, 16, 16), AugmentationPolicy.weak(), [np.random.default_rng(0)])
    with pytest.raises(IngestError):
        augment_batch(torch.rand(2, 3, 16, 16), AugmentationPolicy.weak(), [np.random.default_rng(0)])
