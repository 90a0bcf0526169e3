"""Weak and strong view augmentation with per-sample derived seeds."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "IngestError",
    "AugmentationPolicy",
    "sample_seed",
    "augment_batch",
    "make_views",
    "make_view_batch",
]

WEAK, STRONG, WEAK_ALT = 0, 1, 2


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationPolicy:
    """Crop/flip, then optional color jitter, grayscale and blur.

    Every transform can be switched off by zeroing its range or probability.
    """

    crop_scale: Tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    grayscale_prob: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    crop_size: int = 0  # 0 keeps the input size

    @classmethod
    def weak(cls, **kw) -> "AugmentationPolicy":
        return cls(**kw)

    @classmethod
    def strong(cls, **kw) -> "AugmentationPolicy":
        base = dict(crop_scale=(0.3, 1.0), brightness=0.4, contrast=0.4, saturation=0.4,
                    grayscale_prob=0.2, blur_prob=0.5)
        base.update(kw)
        return cls(**base)

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0)

    def but(self, **kw) -> "AugmentationPolicy":
        return replace(self, **kw)


def sample_seed(run_seed: int, epoch: int, index: int, view: int) -> np.random.Generator:
    return np.random.default_rng([run_seed, epoch, index, view])


def _draw(rng: np.random.Generator, policy: AugmentationPolicy):
    # fixed draw order keeps a sample's parameters independent of which transforms are on
    scale = rng.uniform(*policy.crop_scale)
    cx, cy = rng.uniform(0, 1, 2)
    flip = rng.uniform() < policy.flip_prob
    bright = 1 + rng.uniform(-policy.brightness, policy.brightness)
    contr = 1 + rng.uniform(-policy.contrast, policy.contrast)
    sat = 1 + rng.uniform(-policy.saturation, policy.saturation)
    gray = rng.uniform() < policy.grayscale_prob
    blur = rng.uniform() < policy.blur_prob
    sigma = rng.uniform(*policy.blur_sigma)
    return scale, cx, cy, flip, bright, contr, sat, gray, blur, sigma


def _gray(x: Tensor) -> Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def _blur(x: Tensor, sigma: Tensor) -> Tensor:
    radius = 4
    offs = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (offs[None, :] / sigma[:, None]) ** 2)
    k = k / k.sum(dim=1, keepdim=True)  # b × taps
    b, c, h, w = x.shape
    kc = k.repeat_interleave(c, dim=0)
    y = x.reshape(1, b * c, h, w)
    y = F.conv2d(F.pad(y, (radius, radius, 0, 0), mode="reflect"), kc.view(b * c, 1, 1, -1), groups=b * c)
    y = F.conv2d(F.pad(y, (0, 0, radius, radius), mode="reflect"), kc.view(b * c, 1, -1, 1), groups=b * c)
    return y.reshape(b, c, h, w)


def augment_batch(images: Tensor, policy: AugmentationPolicy,
                  rngs: Sequence[np.random.Generator]) -> Tensor:
    """Augment a ``b × 3 × H × W`` batch; sample ``i`` draws from ``rngs[i]``."""
    x = torch.as_tensor(images)
    if x.dim() != 4:
        raise IngestError(f"expected b×3×H×W images, got {tuple(x.shape)}")
    b, c, H, W = x.shape
    out_size = policy.crop_size or H
    if H < out_size or W < out_size:
        raise IngestError(f"image {H}×{W} smaller than crop size {out_size}")
    params = [_draw(r, policy) for r in rngs]
    if len(params) != b:
        raise IngestError("need one generator per sample")

    geometric = policy.crop_scale != (1.0, 1.0) or policy.flip_prob > 0 or out_size != H or H != W
    if geometric:
        theta = torch.zeros(b, 2, 3, dtype=torch.float64)
        for i, (scale, cx, cy, flip, *_) in enumerate(params):
            side = np.sqrt(scale) * min(H, W)
            sx, sy = side / W, side / H
            theta[i, 0, 0] = -sx if flip else sx
            theta[i, 1, 1] = sy
            theta[i, 0, 2] = (2 * cx - 1) * (1 - sx)
            theta[i, 1, 2] = (2 * cy - 1) * (1 - sy)
        grid = F.affine_grid(theta.to(x.dtype), (b, c, out_size, out_size), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    if policy.brightness or policy.contrast or policy.saturation:
        bright = torch.tensor([p[4] for p in params], dtype=x.dtype).view(b, 1, 1, 1)
        contr = torch.tensor([p[5] for p in params], dtype=x.dtype).view(b, 1, 1, 1)
        sat = torch.tensor([p[6] for p in params], dtype=x.dtype).view(b, 1, 1, 1)
        x = (x * bright).clamp(0, 1)
        m = _gray(x).mean(dim=(2, 3), keepdim=True)
        x = ((x - m) * contr + m).clamp(0, 1)
        g = _gray(x)
        x = ((x - g) * sat + g).clamp(0, 1)
    if policy.grayscale_prob > 0:
        sel = torch.tensor([p[7] for p in params]).view(b, 1, 1, 1)
        x = torch.where(sel, _gray(x).expand_as(x), x)
    if policy.blur_prob > 0:
        sel = torch.tensor([p[8] for p in params]).view(b, 1, 1, 1)
        sigma = torch.tensor([p[9] for p in params], dtype=x.dtype)
        x = torch.where(sel, _blur(x, sigma), x)
    return x.contiguous()


def make_view_batch(images: Tensor, weak: AugmentationPolicy, strong: AugmentationPolicy,
                    run_seed: int, epoch: int, indices: Sequence[int]) -> Tuple[Tensor, Tensor, Tensor]:
    """Three views per image: weak (momentum teacher), strong (student), weak (style teacher)."""
    views = []
    for view, policy in ((WEAK, weak), (STRONG, strong), (WEAK_ALT, weak)):
        rngs = [sample_seed(run_seed, epoch, int(i), view) for i in indices]
        views.append(augment_batch(images, policy, rngs))
    return tuple(views)


def make_views(image: Tensor, weak: AugmentationPolicy, strong: AugmentationPolicy,
               seeds: Tuple[int, int, int]) -> Tuple[Tensor, Tensor, Tensor]:
    """Views ``(x1, x2, x3)`` of one ``3 × H × W`` image from three explicit seeds."""
    x = torch.as_tensor(image).unsqueeze(0)
    out = []
    for seed, policy in zip(seeds, (weak, strong, weak)):
        out.append(augment_batch(x, policy, [np.random.default_rng(seed)])[0])
    return tuple(out)
