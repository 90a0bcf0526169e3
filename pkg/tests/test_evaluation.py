import numpy as np
import pytest
import torch

from dualkan.evaluation import (ProbeDataError, compute_metrics, extract_features, fit_logistic,
                                linear_probe)
from dualkan.ssl import ToyEncoder
from dualkan.trainer import tensor_hash


def _scores_for(pred, C):
    s = np.zeros((len(pred), C))
    s[np.arange(len(pred)), pred] = 1.0
    return s


def test_metrics_from_hand_confusion():
    labels = np.array([0, 0, 1, 1])
    m = compute_metrics(_scores_for([0, 0, 0, 1], 2), labels, 2)
    assert m.confusion == [[2, 0], [1, 1]]
    assert m.top1 == 0.75
    assert m.precision == pytest.approx(5 / 6)
    assert m.recall == pytest.approx(3 / 4)
    f0, f1 = 2 * (2 / 3) / (2 / 3 + 1), 2 * 0.5 / 1.5
    assert m.f1 == pytest.approx((f0 + f1) / 2)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    m = compute_metrics(_scores_for(labels, 3), labels, 3)
    assert (m.top1, m.top5, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert m.confusion == np.diag([1, 2, 2]).tolist()


def test_never_predicted_class_has_zero_precision():
    m = compute_metrics(_scores_for([0, 0, 0], 2), np.array([0, 1, 0]), 2)
    assert m.per_class[1]["precision"] == 0.0


def test_top5_with_many_classes():
    scores = np.tile(np.arange(8.0), (2, 1))
    m = compute_metrics(scores, np.array([3, 2]), 8)
    assert m.top5 == 0.5 and not m.top5_covers_all_classes


def test_ties_break_to_lowest_index():
    assert compute_metrics(np.zeros((1, 3)), np.array([0]), 3).top1 == 1.0


def test_separable_features_give_perfect_probe(np_rng):
    centers = np.eye(4) * 10
    labels = np.repeat(np.arange(4), 30)
    x = centers[labels] + np_rng.normal(0, 0.5, (120, 4))
    probe = fit_logistic(x, labels, 4)
    assert compute_metrics(probe.scores(x), labels, 4).top1 == 1.0


def test_random_labels_stay_near_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, xt = rng.normal(size=(400, 8)), rng.normal(size=(400, 8))
        y, yt = rng.integers(0, 4, 400), rng.integers(0, 4, 400)
        probe = fit_logistic(x, y, 4)
        accs.append(compute_metrics(probe.scores(xt), yt, 4).top1)
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_missing_class_raises():
    with pytest.raises(ProbeDataError):
        fit_logistic(np.zeros((4, 2)), np.array([0, 0, 1, 1]), 3)


def test_probe_leaves_backbone_unchanged():
    enc = ToyEncoder(((4, 2), (6, 2)), generator=torch.Generator().manual_seed(0))
    before = tensor_hash(enc.state_dict().items())
    x = torch.rand(12, 3, 16, 16)
    y = np.arange(12) % 3
    linear_probe(enc, x, y, x, y, 3)
    assert tensor_hash(enc.state_dict().items()) == before


def test_features_are_pooled_encoder_output():
    enc = ToyEncoder(((4, 2), (6, 2)), generator=torch.Generator().manual_seed(0))
    x = torch.rand(3, 3, 16, 16)
    with torch.no_grad():
        ref = enc(x).mean(dim=(2, 3)).double().numpy()
    assert np.allclose(extract_features(enc, x), ref)
