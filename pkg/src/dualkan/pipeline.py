"""End-to-end runs driven by a ``RunConfig``: data, training, probing, comparisons."""

from __future__ import annotations

import json
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .checkpoint import (Checkpoint, checkpoint_hash, load_checkpoint, restore_state,
                         save_checkpoint, state_checkpoint)
from .config import RunConfig, config_from_dict, dump_config, to_dict
from .data import Dataset, DatasetSpec, gen_synthetic_dataset, read_manifest
from .evaluation import LinearProbe, MetricsReport, compute_metrics, extract_features, fit_logistic
from .kan import KanRegConfig
from .ssl import BRANCHES, DistillState, build_state
from .trainer import EpochSummary, TrainConfig, train

__all__ = [
    "REPORT_SCHEMA",
    "PLACEMENT_VARIANTS",
    "deterministic_mode",
    "load_datasets",
    "state_from_config",
    "train_config",
    "run_training",
    "run_probe",
    "run_eval",
    "compare_heads",
    "write_report",
]

log = logging.getLogger(__name__)

REPORT_SCHEMA = "dualkan.report/1"

PLACEMENT_VARIANTS: Dict[str, Dict[str, str]] = {
    "base": {"student": "mlp", "momentum_teacher": "mlp", "style_teacher": "mlp"},
    "student_only": {"student": "kan", "momentum_teacher": "mlp", "style_teacher": "mlp"},
    "style_teacher_only": {"student": "mlp", "momentum_teacher": "mlp", "style_teacher": "kan"},
    "momentum_teacher_only": {"student": "mlp", "momentum_teacher": "kan", "style_teacher": "mlp"},
    "all": {"student": "kan", "momentum_teacher": "kan", "style_teacher": "kan"},
}


def deterministic_mode() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _stratified_split(ds: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 0x5EED])
    test_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        test_idx.extend(idx[: int(round(len(idx) * fraction))].tolist())
    mask = np.zeros(len(ds), dtype=bool)
    mask[test_idx] = True
    pick = lambda m: Dataset(ds.images[m], ds.labels[m], ds.num_classes)
    return pick(~mask), pick(mask)


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        train = gen_synthetic_dataset(
            DatasetSpec.default(d.classes, per_class=d.train_per_class, size=d.size, jitter=d.jitter),
            cfg.seed, split=0)
        test = gen_synthetic_dataset(
            DatasetSpec.default(d.classes, per_class=d.test_per_class, size=d.size, jitter=d.jitter),
            cfg.seed, split=1)
        return train, test
    train = read_manifest(d.path, d.classes)
    if d.test_path:
        test = read_manifest(d.test_path, train.num_classes)
        n = max(train.num_classes, test.num_classes)
        train.num_classes = test.num_classes = n
        return train, test
    return _stratified_split(train, cfg.eval.test_fraction, cfg.seed)


def state_from_config(cfg: RunConfig) -> DistillState:
    k = cfg.model.kan
    stages = cfg.encoder_stages()
    in_dim = stages[-1][0]
    tau_s, tau_t = cfg.taus()
    kan_kwargs = dict(
        intervals=k.grid, order=k.order, domain=(k.domain_lo, k.domain_hi),
        reg=KanRegConfig(k.lambda_l1, k.lambda_smooth, k.p_deact),
        base_term=k.base_term, outer=k.outer,
    )
    return build_state(
        encoder_stages=stages,
        placement={b: getattr(cfg.model.placement, b) for b in BRANCHES},
        embed_dim=cfg.model.embed_dim,
        hidden=cfg.head_hidden(in_dim),
        kan_kwargs=kan_kwargs,
        bank_capacity=cfg.model.bank.capacity,
        seed=cfg.seed,
        tau_student=tau_s,
        tau_teacher=tau_t,
        m=cfg.model.ema_momentum,
        style_weight=cfg.model.style_weight,
        warmup_entries=cfg.model.bank.warmup_entries,
        bank_source=cfg.model.bank.source,
        include_current=cfg.model.bank.include_current,
        shared_head=cfg.model.shared_head,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs, batch_size=t.batch_size, base_lr=t.base_lr,
        warmup_epochs=t.warmup_epochs, min_lr_factor=t.min_lr_factor,
        sgd_momentum=t.sgd_momentum, weight_decay=t.weight_decay, seed=cfg.seed,
        grid_adapt=t.grid_adapt, grid_gamma=t.grid_gamma, guard_teachers=t.guard_teachers,
    )


def write_report(report: Dict, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def _report(command: str, cfg: RunConfig, **body) -> Dict:
    return {"schema": REPORT_SCHEMA, "command": command, "config": to_dict(cfg), **body}


def run_training(cfg: RunConfig, out_dir: str, datasets=None, step_log: Optional[list] = None) -> Dict:
    """Self-supervised training with one checkpoint per epoch plus ``final.kand``."""
    train_ds, _ = datasets or load_datasets(cfg)
    state = state_from_config(cfg)
    ckpt_dir = os.path.join(out_dir, cfg.io.checkpoint_dir)
    snapshot = dump_config(cfg)
    hashes: Dict[str, str] = {}

    def on_epoch_end(epoch: int, st: DistillState, summary: EpochSummary) -> None:
        name = f"epoch_{epoch:03d}.kand"
        hashes[name] = save_checkpoint(state_checkpoint(st, snapshot), os.path.join(ckpt_dir, name))
        log.info("epoch %d: %s", epoch, summary.as_dict())

    history = train(state, train_config(cfg), train_ds.images, on_epoch_end=on_epoch_end,
                    step_log=step_log)
    final = os.path.join(ckpt_dir, "final.kand")
    hashes["final.kand"] = save_checkpoint(state_checkpoint(state, snapshot), final)
    return _report("train", cfg, trace=[h.as_dict() for h in history],
                   steps=state.step, checkpoints=hashes)


def load_trained_state(path: str) -> Tuple[RunConfig, DistillState]:
    ckpt = load_checkpoint(path)
    cfg = config_from_dict(json.loads(ckpt.config))
    state = state_from_config(cfg)
    restore_state(ckpt, state)
    return cfg, state


def _probe_checkpoint(probe: LinearProbe, cfg: RunConfig, num_classes: int) -> Checkpoint:
    sections = {"probe.weight": probe.weight, "probe.bias": probe.bias,
                "probe.mean": probe.mean, "probe.scale": probe.scale}
    meta = json.dumps({"kind": "linear_probe", "num_classes": num_classes,
                       "config": to_dict(cfg)}, sort_keys=True, separators=(",", ":"))
    return Checkpoint(meta, {k: np.asarray(v, dtype="<f4") for k, v in sections.items()})


def _probe_from_checkpoint(ckpt: Checkpoint) -> LinearProbe:
    s = {k: v.astype(np.float64) for k, v in ckpt.sections.items()}
    return LinearProbe(s["probe.weight"], s["probe.bias"], s["probe.mean"], s["probe.scale"])


def probe_state(state: DistillState, cfg: RunConfig, datasets) -> Tuple[MetricsReport, LinearProbe]:
    train_ds, test_ds = datasets
    n_cls = max(train_ds.num_classes, test_ds.num_classes)
    encoder = state.student.encoder
    fitted = fit_logistic(extract_features(encoder, train_ds.images), train_ds.labels, n_cls,
                          l2=cfg.eval.probe_l2)
    # score with the single-precision probe that gets persisted so `eval` reproduces it exactly
    stored = _probe_from_checkpoint(_probe_checkpoint(fitted, cfg, n_cls))
    metrics = compute_metrics(stored.scores(extract_features(encoder, test_ds.images)),
                              test_ds.labels, n_cls)
    return metrics, stored


def run_probe(checkpoint: str, out_dir: str, cfg: Optional[RunConfig] = None, datasets=None) -> Dict:
    ckpt_cfg, state = load_trained_state(checkpoint)
    cfg = cfg or ckpt_cfg
    datasets = datasets or load_datasets(cfg)
    metrics, probe = probe_state(state, cfg, datasets)
    n_cls = probe.weight.shape[0]
    probe_path = os.path.join(out_dir, "probe.kand")
    save_checkpoint(_probe_checkpoint(probe, cfg, n_cls), probe_path)
    return _report("probe", cfg, checkpoint=checkpoint_hash(checkpoint),
                   probe=checkpoint_hash(probe_path), metrics=metrics.to_dict())


def run_eval(checkpoint: str, probe_path: str, cfg: Optional[RunConfig] = None) -> Dict:
    ckpt_cfg, state = load_trained_state(checkpoint)
    cfg = cfg or ckpt_cfg
    probe_ckpt = load_checkpoint(probe_path)
    meta = json.loads(probe_ckpt.config)
    probe = _probe_from_checkpoint(probe_ckpt)
    _, test_ds = load_datasets(cfg)
    n_cls = int(meta["num_classes"])
    metrics = compute_metrics(probe.scores(extract_features(state.student.encoder, test_ds.images)),
                              test_ds.labels, n_cls)
    return _report("eval", cfg, checkpoint=checkpoint_hash(checkpoint),
                   probe=checkpoint_hash(probe_path), metrics=metrics.to_dict())


def compare_heads(cfg: RunConfig, variants: Optional[List[str]] = None, out_dir: Optional[str] = None) -> Dict:
    """Matched trainings from one seed differing only in head placement.

    Each row carries the five table metrics of its linear probe.
    """
    variants = variants or ["base", "all"]
    datasets = load_datasets(cfg)
    rows = []
    for name in variants:
        if name not in PLACEMENT_VARIANTS:
            raise KeyError(f"unknown placement variant {name!r}; choose from {sorted(PLACEMENT_VARIANTS)}")
        vcfg = config_from_dict(to_dict(cfg))
        for branch, kind in PLACEMENT_VARIANTS[name].items():
            setattr(vcfg.model.placement, branch, kind)
        state = state_from_config(vcfg)
        history = train(state, train_config(vcfg), datasets[0].images)
        metrics, _ = probe_state(state, vcfg, datasets)
        if out_dir:
            save_checkpoint(state_checkpoint(state, dump_config(vcfg)),
                            os.path.join(out_dir, cfg.io.checkpoint_dir, f"{name}.kand"))
        rows.append({
            "variant": name,
            "placement": PLACEMENT_VARIANTS[name],
            "top1": metrics.top1, "top5": metrics.top5, "precision": metrics.precision,
            "recall": metrics.recall, "f1": metrics.f1,
            "top5_covers_all_classes": metrics.top5_covers_all_classes,
            "trace": [h.as_dict() for h in history],
            "confusion": metrics.confusion,
        })
    return _report("compare-heads", cfg, rows=rows)


def format_table(rows: List[Dict]) -> str:
    head = f"{'variant':<24}{'Top-1':>8}{'Top-5':>8}{'Prec.':>8}{'Rec.':>8}{'F1':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['variant']:<24}" + "".join(
            f"{100 * r[k]:>8.2f}" for k in ("top1", "top5", "precision", "recall", "f1")))
    return "\n".join(lines)
