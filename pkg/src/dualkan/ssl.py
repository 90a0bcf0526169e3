"""Dual-teacher distillation: encoders, Gram style loss, feature bank,
relation loss over similarity distributions, and EMA teachers."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .kan import KanHead, KanRegConfig, MlpHead, kan_reg_loss
from .numerics import DimensionError, cosine_sim_matrix, softmax_rows

__all__ = [
    "EmptyBankError",
    "StateCorruptionError",
    "SslConfigError",
    "ToyEncoder",
    "Branch",
    "FeatureBank",
    "DistillState",
    "LossBreakdown",
    "encode",
    "gram_matrix",
    "style_loss",
    "sim_distribution",
    "kl_divergence",
    "relation_loss",
    "relation_terms",
    "total_loss",
    "forward_branches",
    "ema_update",
    "bank_enqueue",
    "build_state",
    "BRANCHES",
]

BRANCHES = ("student", "momentum_teacher", "style_teacher")


class EmptyBankError(RuntimeError):
    pass


class StateCorruptionError(RuntimeError):
    pass


class SslConfigError(ValueError):
    pass


class ToyEncoder(nn.Module):
    """Stack of 3×3 strided convolutions with SiLU between stages."""

    def __init__(self, stages: Sequence[Tuple[int, int]] = ((16, 2), (32, 2), (32, 2)),
                 in_channels: int = 3, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.stages = [tuple(s) for s in stages]
        layers = []
        c_in = in_channels
        for c_out, stride in self.stages:
            conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(layers)

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]

    @property
    def total_stride(self) -> int:
        s = 1
        for _, stride in self.stages:
            s *= stride
        return s

    def forward(self, x: Tensor) -> Tensor:
        return encode(self, x)


def encode(encoder: ToyEncoder, x: Tensor) -> Tensor:
    if x.dim() != 4:
        raise DimensionError(f"expected b×c×H×W input, got {tuple(x.shape)}")
    s = encoder.total_stride
    if x.shape[2] % s or x.shape[3] % s:
        raise DimensionError(
            f"spatial dims {tuple(x.shape[2:])} not divisible by total stride {s}"
        )
    for i, conv in enumerate(encoder.convs):
        x = conv(x)
        if i < len(encoder.convs) - 1:
            x = nn.functional.silu(x)
    return x


def make_head(kind: str, in_dim: int, out_dim: int, hidden: Optional[int],
              kan_kwargs: Dict, generator: Optional[torch.Generator]) -> nn.Module:
    if kind == "kan":
        return KanHead(in_dim, out_dim, hidden=hidden, generator=generator, **kan_kwargs)
    if kind == "mlp":
        return MlpHead(in_dim, out_dim, hidden=hidden, generator=generator)
    raise SslConfigError(f"unknown head kind {kind!r}")


class Branch(nn.Module):
    """Encoder plus projection heads keyed by kind (``"kan"`` / ``"mlp"``).

    ``active`` names the head that produces this branch's embedding.  The
    student carries an idle head of every other kind a teacher uses so that
    teacher heads always have a student counterpart to average from.
    """

    def __init__(self, encoder: ToyEncoder, heads: Dict[str, nn.Module], active: str):
        super().__init__()
        self.encoder = encoder
        self.heads = nn.ModuleDict(heads)
        self.active = active

    @property
    def head(self) -> nn.Module:
        return self.heads[self.active]

    def forward(self, x: Tensor, rng: Optional[torch.Generator] = None) -> Tuple[Tensor, Tensor]:
        h = encode(self.encoder, x)
        pooled = h.mean(dim=(2, 3))
        head = self.head
        if isinstance(head, KanHead):
            z = head(pooled, training=self.training, rng=rng)
        else:
            z = head(pooled)
        return h, z


class FeatureBank:
    """Fixed-capacity FIFO ring of unit-norm embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise SslConfigError("bank capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.filled = 0

    def entries(self) -> Tensor:
        return self.storage[: self.filled]

    def enqueue(self, z: Tensor) -> "FeatureBank":
        return bank_enqueue(self, z)

    def __len__(self) -> int:
        return self.filled


def bank_enqueue(bank: FeatureBank, z: Tensor) -> FeatureBank:
    z = z.detach()
    if z.dim() != 2 or z.shape[1] != bank.dim:
        raise DimensionError(f"bank holds {bank.dim}-d rows, got {tuple(z.shape)}")
    n = z.shape[0]
    if n == 0:
        return bank
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise DimensionError("cannot enqueue a zero-norm embedding")
    z = (z / norms).to(bank.storage.dtype)
    start = bank.cursor
    if n > bank.capacity:
        start = (start + n - bank.capacity) % bank.capacity
        z = z[-bank.capacity:]
    idx = (start + torch.arange(z.shape[0])) % bank.capacity
    bank.storage[idx] = z
    bank.cursor = (bank.cursor + n) % bank.capacity
    bank.filled = min(bank.capacity, bank.filled + n)
    return bank


def gram_matrix(h: Tensor) -> Tensor:
    """Per-sample channel Gram matrix ``(1/S) M Mᵀ`` with ``M`` of shape C×S."""
    b, c = h.shape[:2]
    m = h.reshape(b, c, -1)
    return torch.bmm(m, m.transpose(1, 2)) / m.shape[2]


def _frob_cos(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    denom = (a.norm(dim=1) * b.norm(dim=1)).clamp_min(eps)
    return (a * b).sum(dim=1) / denom


def style_loss(g1: Tensor, g2: Tensor, g3: Tensor) -> Tensor:
    """Batch mean of ``(1 - cos_F(G1, G2)) + (1 - cos_F(G3, G2))``.

    Only the student Gram ``g2`` carries gradient.
    """
    if g2.dim() == 2:
        g1, g2, g3 = g1.unsqueeze(0), g2.unsqueeze(0), g3.unsqueeze(0)
    g1, g3 = g1.detach(), g3.detach()
    per_sample = (1 - _frob_cos(g1, g2)) + (1 - _frob_cos(g3, g2))
    return per_sample.mean()


def sim_distribution(z: Tensor, bank, tau: float,
                     extra: Optional[Tensor] = None) -> Tensor:
    """Softmax over temperature-scaled cosine similarities to the bank entries."""
    if tau <= 0:
        raise SslConfigError(f"temperature must be positive, got {tau}")
    ref = bank.entries() if isinstance(bank, FeatureBank) else bank
    if extra is not None:
        ref = torch.cat([ref, extra.detach().to(ref.dtype)])
    if ref.shape[0] == 0:
        raise EmptyBankError("feature bank is empty; warm it before computing distributions")
    return softmax_rows(cosine_sim_matrix(z, ref.to(z.dtype)) / tau)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Row-mean of ``sum_k p_k ln(p_k / q_k)`` with ``0 ln 0 = 0``."""
    if p.shape != q.shape:
        raise DimensionError(f"KL needs matching shapes, got {tuple(p.shape)} and {tuple(q.shape)}")
    logp = torch.log(p.clamp_min(1e-30))
    logq = torch.log(q.clamp_min(1e-12))
    terms = torch.where(p > 0, p * (logp - logq), torch.zeros_like(p))
    return terms.sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    relation: float
    style: float
    kan_reg: float
    total: float
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> Dict[str, float]:
        return {"relation": self.relation, "style": self.style,
                "kan_reg": self.kan_reg, "total": self.total}


class DistillState:
    """Student, two EMA teachers, the feature bank and loss settings."""

    def __init__(self, student: Branch, momentum_teacher: Branch, style_teacher: Branch,
                 bank: FeatureBank, tau_student: float = 0.1, tau_teacher: float = 0.07,
                 m: float = 0.99, style_weight: float = 0.5, warmup_entries: int = 64,
                 bank_source: str = "z1", include_current: bool = False,
                 shared_head: bool = False):
        if bank_source not in ("z1", "z3", "both"):
            raise SslConfigError(f"unknown bank source {bank_source!r}")
        if not 0 <= m <= 1:
            raise SslConfigError(f"EMA momentum must lie in [0, 1], got {m}")
        self.student = student
        self.momentum_teacher = momentum_teacher
        self.style_teacher = style_teacher
        self.bank = bank
        self.tau_student = tau_student
        self.tau_teacher = tau_teacher
        self.m = m
        self.style_weight = style_weight
        self.warmup_entries = warmup_entries
        self.bank_source = bank_source
        self.include_current = include_current
        self.shared_head = shared_head
        self.step = 0
        for t in self.teachers():
            t.requires_grad_(False)
            t.eval()
        if shared_head:
            for p in self.student.head.parameters():
                p.requires_grad_(True)

    def teachers(self) -> Tuple[Branch, Branch]:
        return self.momentum_teacher, self.style_teacher

    def branches(self) -> Dict[str, Branch]:
        return dict(zip(BRANCHES, (self.student, self.momentum_teacher, self.style_teacher)))

    def student_parameters(self) -> List[Tensor]:
        return [p for p in self.student.parameters() if p.requires_grad]

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        """Every parameter and buffer of every branch, in a fixed order."""
        seen = set()
        for bname, branch in self.branches().items():
            for name, t in branch.state_dict(keep_vars=True).items():
                key = f"{bname}.{name}"
                if id(t) in seen and self.shared_head:
                    continue
                seen.add(id(t))
                yield key, t


def build_state(
    encoder_stages: Sequence[Tuple[int, int]] = ((16, 2), (32, 2), (32, 2)),
    placement: Optional[Dict[str, str]] = None,
    embed_dim: int = 32,
    hidden: Optional[int] = None,
    kan_kwargs: Optional[Dict] = None,
    bank_capacity: int = 1024,
    seed: int = 0,
    **state_kwargs,
) -> DistillState:
    """Fresh state with teachers initialized as exact student copies."""
    placement = dict(placement or {b: "kan" for b in BRANCHES})
    if set(placement) != set(BRANCHES):
        raise SslConfigError(f"placement must cover {BRANCHES}, got {sorted(placement)}")
    kan_kwargs = dict(kan_kwargs or {})
    if isinstance(kan_kwargs.get("reg"), dict):
        kan_kwargs["reg"] = KanRegConfig(**kan_kwargs["reg"])
    gen = torch.Generator().manual_seed(seed)
    encoder = ToyEncoder(encoder_stages, generator=gen)
    n = encoder.out_channels
    kinds = [placement["student"]] + sorted(set(placement.values()) - {placement["student"]})
    heads = {k: make_head(k, n, embed_dim, hidden, kan_kwargs, gen) for k in kinds}
    student = Branch(encoder, heads, placement["student"])
    momentum = copy.deepcopy(student)
    momentum.active = placement["momentum_teacher"]
    style = copy.deepcopy(student)
    style.active = placement["style_teacher"]
    if state_kwargs.get("shared_head"):
        if len(set(placement.values())) != 1:
            raise SslConfigError("a shared head requires the same head kind on every branch")
        momentum.heads = student.heads
        style.heads = student.heads
    state = DistillState(student, momentum, style, FeatureBank(bank_capacity, embed_dim), **state_kwargs)
    return state


def relation_terms(state: DistillState, z1: Tensor, z2: Tensor, z3: Tensor) -> Tuple[Tensor, Tensor]:
    """``(KL(P1||P3), KL(P2||P3))``; teacher embeddings are detached."""
    z1, z3 = z1.detach(), z3.detach()
    extra = torch.cat([z1, z3]) if state.include_current else None
    p1 = sim_distribution(z1, state.bank, state.tau_teacher, extra)
    p2 = sim_distribution(z2, state.bank, state.tau_student, extra)
    p3 = sim_distribution(z3, state.bank, state.tau_teacher, extra)
    return kl_divergence(p1, p3), kl_divergence(p2, p3)


def relation_loss(state: DistillState, z1: Tensor, z2: Tensor, z3: Tensor) -> Tensor:
    a, b = relation_terms(state, z1, z2, z3)
    return a + b


def _student_reg(state: DistillState) -> Tensor:
    head = state.student.head
    if isinstance(head, KanHead):
        return kan_reg_loss(head)[2]
    return torch.zeros(())


def forward_branches(state: DistillState, x1: Tensor, x2: Tensor, x3: Tensor,
                     rng: Optional[torch.Generator] = None):
    with torch.no_grad():
        h1, z1 = state.momentum_teacher(x1)
        h3, z3 = state.style_teacher(x3)
    h2, z2 = state.student(x2, rng=rng)
    return (h1, z1), (h2, z2), (h3, z3)


def total_loss(state: DistillState, views: Tuple[Tensor, Tensor, Tensor],
               rng: Optional[torch.Generator] = None, outputs=None) -> LossBreakdown:
    """Relation + style_weight * style + KAN regularization for one batch.

    The relation term is skipped (reported 0) until the bank holds
    ``warmup_entries`` rows.  ``outputs`` receives the branch outputs when a
    list is passed.
    """
    (h1, z1), (h2, z2), (h3, z3) = forward_branches(state, *views, rng=rng)
    if outputs is not None:
        outputs[:] = [(h1, z1), (h2, z2), (h3, z3)]
    if state.bank.filled >= max(1, state.warmup_entries):
        rel = relation_loss(state, z1, z2, z3)
    else:
        rel = z2.sum() * 0.0
    sty = style_loss(gram_matrix(h1), gram_matrix(h2), gram_matrix(h3))
    reg = _student_reg(state).to(sty.dtype)
    total = rel + state.style_weight * sty + reg
    return LossBreakdown(rel.item(), sty.item(), reg.item(), total.item(), graph=total)


@torch.no_grad()
def ema_update(state: DistillState) -> DistillState:
    """``theta_t <- m theta_t + (1 - m) theta_s`` for both teachers."""
    s_params = dict(state.student.named_parameters())
    for teacher in state.teachers():
        t_params = dict(teacher.named_parameters())
        if t_params.keys() != s_params.keys():
            raise StateCorruptionError("teacher and student parameter sets differ")
        for name, pt in t_params.items():
            ps = s_params[name]
            if pt.shape != ps.shape:
                raise StateCorruptionError(
                    f"{name}: teacher shape {tuple(pt.shape)} != student {tuple(ps.shape)}"
                )
            if pt is ps:
                continue
            pt.lerp_(ps, 1.0 - state.m)
    return state
