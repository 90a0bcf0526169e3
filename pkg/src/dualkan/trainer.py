"""Optimization loop: warmup + cosine schedule, SGD on the student, EMA teachers."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .augment import AugmentationPolicy, make_view_batch
from .kan import KanHead, renormalize_phi
from .numerics import ContractError, NumericDomainError
from .ssl import BRANCHES, DistillState, LossBreakdown, bank_enqueue, ema_update, total_loss

__all__ = [
    "TrainConfigError",
    "DivergenceError",
    "TrainConfig",
    "Trainer",
    "lr_at_step",
    "train_step",
    "train",
    "EpochSummary",
    "tensor_hash",
]

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, terms: Dict[str, float]):
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step
        self.terms = terms


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    base_lr: float = 0.0075
    warmup_epochs: float = 2.0
    min_lr_factor: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    grid_adapt: bool = False
    grid_gamma: float = 0.5
    guard_teachers: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.base_lr > 0:
            raise TrainConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_epochs < 0 or not 0 < self.min_lr_factor <= 1:
            raise TrainConfigError("warmup_epochs must be >= 0 and min_lr_factor in (0, 1]")
        if self.sgd_momentum < 0 or self.weight_decay < 0:
            raise TrainConfigError("momentum and weight decay must be nonnegative")


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr_factor * base_lr``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    base = cfg.base_lr
    min_lr = cfg.min_lr_factor * base
    warmup = 0
    if cfg.epochs:
        warmup = min(total_steps, int(round(total_steps * cfg.warmup_epochs / cfg.epochs)))
    if step < warmup:
        return base * step / warmup
    if total_steps == warmup:
        return base
    progress = (step - warmup) / (total_steps - warmup)
    return min_lr + 0.5 * (base - min_lr) * (1 + math.cos(math.pi * progress))


def tensor_hash(tensors) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the student optimizer and the step bookkeeping for one run."""

    def __init__(self, state: DistillState, cfg: TrainConfig, total_steps: int):
        self.state = state
        self.cfg = cfg
        self.total_steps = total_steps
        self.optimizer = torch.optim.SGD(
            state.student_parameters(), lr=0.0, momentum=cfg.sgd_momentum,
            weight_decay=cfg.weight_decay,
        )
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.scale_checked = False

    def train_step(self, views, step: int) -> LossBreakdown:
        return train_step(self, views, step)


def _teacher_hash(state: DistillState) -> str:
    return tensor_hash(
        (f"{i}.{n}", p) for i, t in enumerate(state.teachers()) for n, p in t.named_parameters()
    )


def train_step(trainer: Trainer, views, step: int) -> LossBreakdown:
    """Forward all branches, backprop the total loss into the student, then
    renormalize, EMA-update both teachers and enqueue teacher embeddings."""
    state, cfg = trainer.state, trainer.cfg
    if views[0].shape[0] == 0:
        raise ContractError("empty batch")
    outputs: list = []
    try:
        loss = total_loss(state, views, rng=trainer.rng, outputs=outputs)
    except NumericDomainError as e:
        nan = float("nan")
        raise DivergenceError(step, {"relation": nan, "style": nan, "kan_reg": nan, "total": nan}) from e
    if not all(math.isfinite(v) for v in loss.as_dict().values()):
        raise DivergenceError(step, loss.as_dict())
    if not trainer.scale_checked and loss.relation != 0.0:
        trainer.scale_checked = True
        if loss.kan_reg > loss.relation:
            log.warning("step %d: KAN regularizer %.4g exceeds the relation loss %.4g; "
                        "consider smaller lambda_l1 / lambda_smooth", step, loss.kan_reg, loss.relation)

    guard = _teacher_hash(state) if cfg.guard_teachers else None
    lr = lr_at_step(cfg, min(step + 1, trainer.total_steps), trainer.total_steps)
    for group in trainer.optimizer.param_groups:
        group["lr"] = lr
    trainer.optimizer.zero_grad(set_to_none=False)
    loss.graph.backward()
    trainer.optimizer.step()
    for head in state.student.heads.values():
        if isinstance(head, KanHead):
            renormalize_phi(head)
    if guard is not None and _teacher_hash(state) != guard:
        raise ContractError("teacher parameters changed outside the EMA update")
    ema_update(state)

    (_, z1), _, (_, z3) = outputs
    src = {"z1": z1, "z3": z3, "both": torch.cat([z1, z3]) if len(z1) else z1}[state.bank_source]
    bank_enqueue(state.bank, src)
    state.step += 1
    loss.graph = None
    return loss


@dataclass
class EpochSummary:
    epoch: int
    steps: int
    relation: float
    style: float
    kan_reg: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def _mean(losses: List[LossBreakdown], key: str) -> float:
    return float(np.mean([getattr(l, key) for l in losses])) if losses else 0.0


@torch.no_grad()
def _adapt_grids(state: DistillState, images: torch.Tensor, gamma: float) -> None:
    feats = state.student.encoder(images).mean(dim=(2, 3))
    for branch in state.branches().values():
        for head in branch.heads.values():
            if isinstance(head, KanHead):
                head.adapt_grid(feats, gamma)


def train(state: DistillState, cfg: TrainConfig, images, weak: Optional[AugmentationPolicy] = None,
          strong: Optional[AugmentationPolicy] = None,
          on_epoch_end: Optional[Callable[[int, DistillState, EpochSummary], None]] = None,
          step_log: Optional[List[LossBreakdown]] = None) -> List[EpochSummary]:
    """Self-supervised training over ``images`` (N × 3 × H × W, labels unused)."""
    weak = weak or AugmentationPolicy.weak()
    strong = strong or AugmentationPolicy.strong()
    images = torch.as_tensor(images)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total = steps_per_epoch * cfg.epochs
    trainer = Trainer(state, cfg, total)
    for branch in state.branches().values():
        branch.train(branch is state.student)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            views = make_view_batch(images[idx], weak, strong, cfg.seed, epoch, idx)
            losses.append(train_step(trainer, views, step))
            step += 1
        if step_log is not None:
            step_log.extend(losses)
        summary = EpochSummary(epoch + 1, len(losses), *(_mean(losses, k) for k in
                                                        ("relation", "style", "kan_reg", "total")))
        history.append(summary)
        if cfg.grid_adapt and epoch + 1 < cfg.epochs:
            sample = torch.as_tensor(images[order[: min(n, 512)]])
            _adapt_grids(state, sample, cfg.grid_gamma)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, state, summary)
    return history
