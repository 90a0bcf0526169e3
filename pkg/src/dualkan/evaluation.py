"""Classification metrics and the frozen-backbone linear probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import logsumexp

__all__ = [
    "ProbeDataError",
    "MetricsReport",
    "LinearProbe",
    "compute_metrics",
    "fit_logistic",
    "extract_features",
    "linear_probe",
]


class ProbeDataError(ValueError):
    pass


@dataclass
class MetricsReport:
    confusion: List[List[int]]
    top1: float
    top5: float
    precision: float
    recall: float
    f1: float
    per_class: List[Dict[str, float]] = field(default_factory=list)
    top5_covers_all_classes: bool = False

    def to_dict(self) -> Dict:
        return {
            "top1": self.top1,
            "top5": self.top5,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "top5_covers_all_classes": self.top5_covers_all_classes,
            "confusion": self.confusion,
            "per_class": self.per_class,
        }


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def compute_metrics(scores, labels, num_classes: int) -> MetricsReport:
    """Top-1/top-5 accuracy, macro precision/recall/F1 and the confusion matrix.

    Ties in the argmax go to the lowest class index; per-class 0/0 ratios
    count as 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] != num_classes:
        raise ProbeDataError(f"expected N×{num_classes} scores, got {scores.shape}")
    if len(labels) != len(scores):
        raise ProbeDataError("scores and labels differ in length")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ProbeDataError(f"labels must lie in [0, {num_classes})")
    pred = scores.argmax(axis=1)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    n = len(labels)
    top1 = _ratio(np.trace(conf), n)
    k = min(5, num_classes)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top5 = _ratio((order == labels[:, None]).any(axis=1).sum(), n)

    per_class = []
    for c in range(num_classes):
        tp = conf[c, c]
        p = _ratio(tp, conf[:, c].sum())
        r = _ratio(tp, conf[c, :].sum())
        f = _ratio(2 * p * r, p + r)
        per_class.append({"class": c, "precision": p, "recall": r, "f1": f,
                          "support": int(conf[c, :].sum())})
    return MetricsReport(
        confusion=conf.tolist(),
        top1=float(top1),
        top5=float(top5),
        precision=float(np.mean([pc["precision"] for pc in per_class])),
        recall=float(np.mean([pc["recall"] for pc in per_class])),
        f1=float(np.mean([pc["f1"] for pc in per_class])),
        per_class=per_class,
        top5_covers_all_classes=num_classes <= 5,
    )


@dataclass
class LinearProbe:
    weight: np.ndarray  # C × D
    bias: np.ndarray  # C
    mean: np.ndarray  # D
    scale: np.ndarray  # D

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return x @ self.weight.T + self.bias


def fit_logistic(features: np.ndarray, labels: np.ndarray, num_classes: int,
                 l2: float = 1e-4, gtol: float = 1e-6, max_iter: int = 5000) -> LinearProbe:
    """Multinomial logistic regression on standardized features.

    Full-batch L-BFGS with line search; a small L2 term keeps the optimum
    finite on separable data.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    missing = sorted(set(range(num_classes)) - set(y.tolist()))
    if missing:
        raise ProbeDataError(f"classes {missing} absent from the probe training split")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = (x - mean) / scale
    n, d = x.shape
    onehot = np.eye(num_classes)[y]

    def objective(theta):
        W = theta[: num_classes * d].reshape(num_classes, d)
        b = theta[num_classes * d:]
        logits = x @ W.T + b
        lse = logsumexp(logits, axis=1, keepdims=True)
        loss = (lse[:, 0] - (logits * onehot).sum(axis=1)).mean() + 0.5 * l2 * (W ** 2).sum()
        g = (np.exp(logits - lse) - onehot) / n
        gW = g.T @ x + l2 * W
        gb = g.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    theta0 = np.zeros(num_classes * (d + 1))
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"gtol": gtol, "maxiter": max_iter, "maxcor": 20})
    W = res.x[: num_classes * d].reshape(num_classes, d)
    return LinearProbe(W, res.x[num_classes * d:], mean, scale)


@torch.no_grad()
def extract_features(encoder, images, batch_size: int = 128) -> np.ndarray:
    """Spatially averaged encoder output for every image."""
    was_training = encoder.training
    encoder.eval()
    out = []
    images = torch.as_tensor(images)
    dtype = next(encoder.parameters()).dtype
    for i in range(0, len(images), batch_size):
        h = encoder(images[i: i + batch_size].to(dtype))
        out.append(h.mean(dim=(2, 3)).double().numpy())
    encoder.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def linear_probe(encoder, train_images, train_labels, test_images, test_labels,
                 num_classes: int, l2: float = 1e-4, probe_out: Optional[list] = None) -> MetricsReport:
    """Fit an affine classifier on frozen encoder features and score the test split."""
    probe = fit_logistic(extract_features(encoder, train_images), train_labels, num_classes, l2=l2)
    if probe_out is not None:
        probe_out.append(probe)
    return compute_metrics(probe.scores(extract_features(encoder, test_images)), test_labels, num_classes)
