"""Finite-difference checks of every differentiable loss term on random small
configurations, in double precision."""

from __future__ import annotations

from types import SimpleNamespace
from typing import Callable, Dict, Optional

import torch
from torch import nn
from torch.func import functional_call

from .kan import KanHead, KanRegConfig, MlpHead, kan_reg_loss
from .numerics import fd_check
from .ssl import (FeatureBank, ToyEncoder, bank_enqueue, build_state, gram_matrix,
                  relation_loss, style_loss, total_loss)

__all__ = ["TERMS", "run_gradcheck", "check_kan_forward", "check_relation", "check_style",
           "check_kan_reg", "check_mlp", "check_encoder", "check_total"]


def _ints(g: torch.Generator, lo: int, hi: int) -> int:
    return int(torch.randint(lo, hi + 1, (1,), generator=g))


def _away_from_knots(x: torch.Tensor, knots: torch.Tensor, gap: float = 1e-3) -> torch.Tensor:
    d = (x.unsqueeze(-1) - knots.reshape(-1)).abs().min(dim=-1).values
    return torch.where(d < gap, x + 2 * gap, x)


def _module_params(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def _random_head(g: torch.Generator, outer: str = "weights", **kw) -> KanHead:
    n, Q, d = _ints(g, 1, 3), _ints(g, 1, 5), _ints(g, 1, 3)
    G, k = _ints(g, 3, 6), _ints(g, 2, 3)
    reg = kw.pop("reg", KanRegConfig(0.0, 0.0, 0.0))
    head = KanHead(n, d, hidden=Q, intervals=G, order=k, reg=reg, outer=outer,
                   outer_domain=(-6.0, 6.0), coeff_std=0.5, generator=g, **kw).double()
    with torch.no_grad():
        head.base_weight.add_(torch.randn(head.base_weight.shape, generator=g, dtype=torch.float64) * 0.3)
    return head


def check_kan_forward(g: torch.Generator, h: float = 1e-4) -> float:
    outer = "spline" if _ints(g, 0, 2) == 0 else "weights"
    head = _random_head(g, outer)
    b = _ints(g, 1, 4)
    x = torch.rand(b, head.in_dim, generator=g, dtype=torch.float64) * 1.8 - 0.9
    x = _away_from_knots(x, head.knots)
    w = torch.randn(b, head.out_dim, generator=g, dtype=torch.float64)
    params = _module_params(head)
    params["input"] = x

    def f(P):
        inner = {k: v for k, v in P.items() if k != "input"}
        z = functional_call(head, inner, (P["input"],), {"training": False})
        return (z * w).sum()

    return fd_check(f, params, h)


def check_relation(g: torch.Generator, h: float = 1e-4) -> float:
    b, d, K = _ints(g, 1, 4), _ints(g, 2, 6), _ints(g, 2, 12)
    bank = FeatureBank(K, d, dtype=torch.float64)
    bank_enqueue(bank, torch.randn(K, d, generator=g, dtype=torch.float64))
    tau_s = 0.05 + 0.3 * float(torch.rand(1, generator=g))
    tau_t = 0.05 + 0.3 * float(torch.rand(1, generator=g))
    state = SimpleNamespace(bank=bank, tau_student=tau_s, tau_teacher=tau_t,
                            include_current=bool(_ints(g, 0, 1)))
    z1, z2, z3 = (torch.randn(b, d, generator=g, dtype=torch.float64) for _ in range(3))
    return fd_check(lambda P: relation_loss(state, z1, P["z2"], z3), {"z2": z2}, h)


def check_style(g: torch.Generator, h: float = 1e-4) -> float:
    b, C, H, W = _ints(g, 1, 3), _ints(g, 1, 4), _ints(g, 1, 3), _ints(g, 1, 3)
    h1, h2, h3 = (torch.randn(b, C, H, W, generator=g, dtype=torch.float64) for _ in range(3))
    return fd_check(lambda P: style_loss(gram_matrix(h1), gram_matrix(P["h2"]), gram_matrix(h3)),
                    {"h2": h2}, h)


def check_kan_reg(g: torch.Generator, h: float = 1e-4) -> float:
    lam1 = float(torch.rand(1, generator=g)) + 0.1
    lam2 = float(torch.rand(1, generator=g)) * 0.1 + 0.01
    outer = "spline" if _ints(g, 0, 2) == 0 else "weights"
    head = _random_head(g, outer, reg=KanRegConfig(lam1, lam2, 0.0))
    with torch.no_grad():
        for c in head.spline_parameters():
            # keep |c| well away from the kink of |.|
            c.copy_(torch.where(c.abs() < 100 * h, torch.where(c < 0, -100 * h, 100 * h), c))
    params = {k: v for k, v in _module_params(head).items() if k in ("coeffs", "outer_coeffs")}

    class _Reg(nn.Module):
        def __init__(self):
            super().__init__()
            self.head = head

        def forward(self):
            return kan_reg_loss(self.head)[2]

    wrapper = _Reg()
    return fd_check(lambda P: functional_call(wrapper, {f"head.{k}": v for k, v in P.items()}, ()),
                    params, h)


def check_mlp(g: torch.Generator, h: float = 1e-4) -> float:
    n, Q, d, b = _ints(g, 1, 4), _ints(g, 1, 6), _ints(g, 1, 4), _ints(g, 1, 4)
    head = MlpHead(n, d, hidden=Q, generator=g).double()
    x = torch.randn(b, n, generator=g, dtype=torch.float64)
    w = torch.randn(b, d, generator=g, dtype=torch.float64)
    params = _module_params(head)
    params["input"] = x

    def f(P):
        inner = {k: v for k, v in P.items() if k != "input"}
        return (functional_call(head, inner, (P["input"],)) * w).sum()

    return fd_check(f, params, h)


def check_encoder(g: torch.Generator, h: float = 1e-4) -> float:
    enc = ToyEncoder(((3, 2), (4, 2)), generator=g).double()
    with torch.no_grad():
        for conv in enc.convs:
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=g, dtype=torch.float64) * 0.1)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    w = torch.randn(2, 4, 2, 2, generator=g, dtype=torch.float64)
    return fd_check(lambda P: (functional_call(enc, P, (x,)) * w).sum(), _module_params(enc), h)


def check_total(g: torch.Generator, h: float = 1e-4) -> float:
    """Full relation + style + regularizer loss w.r.t. every student parameter."""
    seed = _ints(g, 0, 2 ** 30)
    torch.set_default_dtype(torch.float64)
    try:
        state = build_state(encoder_stages=((3, 2), (4, 2)), embed_dim=3, hidden=4,
                            kan_kwargs={"reg": {"lambda_l1": 1e-2, "lambda_smooth": 1e-3, "p_deact": 0.0},
                                        "coeff_std": 0.5},
                            bank_capacity=8, seed=seed, warmup_entries=1)
    finally:
        torch.set_default_dtype(torch.float32)
    for branch in state.branches().values():
        branch.double()
    state.bank = FeatureBank(8, 3, dtype=torch.float64)
    bank_enqueue(state.bank, torch.randn(8, 3, generator=g, dtype=torch.float64))
    with torch.no_grad():
        for p in state.student.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.05)
    views = tuple(torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))

    class _Loss(nn.Module):
        def __init__(self):
            super().__init__()
            self.student = state.student

        def forward(self):
            return total_loss(state, views).graph

    wrapper = _Loss()
    params = {k: v for k, v in _module_params(state.student).items() if "heads.mlp" not in k}
    return fd_check(lambda P: functional_call(wrapper, {f"student.{k}": v for k, v in P.items()}, ()),
                    params, h)


TERMS: Dict[str, Callable[[torch.Generator, float], float]] = {
    "kan_forward": check_kan_forward,
    "relation": check_relation,
    "style": check_style,
    "kan_l1_smooth": check_kan_reg,
    "mlp_forward": check_mlp,
    "encoder": check_encoder,
    "total": check_total,
}

# the composite check touches every student parameter; a few configurations suffice
_DEFAULT_COUNTS = {"encoder": 5, "total": 3}


def run_gradcheck(configs: int = 20, seed: int = 0, h: float = 1e-4,
                  terms: Optional[Dict[str, int]] = None) -> Dict[str, Dict[str, float]]:
    """Max relative error per term over random configurations."""
    counts = terms or {name: _DEFAULT_COUNTS.get(name, configs) for name in TERMS}
    results = {}
    for name, count in counts.items():
        g = torch.Generator().manual_seed(seed)
        worst = max(TERMS[name](g, h) for _ in range(count))
        results[name] = {"max_rel_error": worst, "configs": count}
    return results
