"""Kolmogorov-Arnold projection head, its regularizers, and an MLP baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import Tensor, nn

from .numerics import DimensionError
from .spline import KnotGrid, adapt_knots, bspline_basis, clamped_knots, refit_on_grid, smoothness_gram

__all__ = [
    "KanConfigError",
    "KanRegConfig",
    "KanHead",
    "MlpHead",
    "kan_forward",
    "segment_mask",
    "kan_reg_loss",
    "renormalize_phi",
    "mlp_forward",
]


class KanConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KanRegConfig:
    lambda_l1: float = 1e-4
    lambda_smooth: float = 1e-5
    p_deact: float = 0.05

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_smooth", "p_deact"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise KanConfigError(f"{name} must be finite and nonnegative, got {v}")
        if self.p_deact >= 1:
            raise KanConfigError(f"p_deact must be < 1, got {self.p_deact}")


def _gaussian(shape, std: float, generator: Optional[torch.Generator]) -> Tensor:
    return torch.randn(*shape, generator=generator) * std


class KanHead(nn.Module):
    """Spline-edge layer followed by composition weights.

    ``u_q = sum_p phi_{q,p}(h_p)`` over ``Q`` hidden units, then ``z = Phi u``
    with a ``d × Q`` row-normalized ``Phi``.  With ``outer="spline"`` the
    composition is itself a layer of spline edges (``z_r = sum_q Phi_{r,q}(u_q)``).
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: Optional[int] = None,
        intervals: int = 5,
        order: int = 3,
        domain: Tuple[float, float] = (-1.0, 1.0),
        reg: Optional[KanRegConfig] = None,
        base_term: bool = True,
        outer: str = "weights",
        outer_domain: Optional[Tuple[float, float]] = None,
        coeff_std: float = 0.1,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if outer not in ("weights", "spline"):
            raise KanConfigError(f"unknown outer composition {outer!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden if hidden is not None else 2 * in_dim + 1
        self.intervals = intervals
        self.order = order
        self.domain = (float(domain[0]), float(domain[1]))
        self.reg = reg if reg is not None else KanRegConfig()
        self.base_term = base_term
        self.outer = outer
        self.outer_domain = tuple(outer_domain) if outer_domain is not None else self.domain
        self._gen = generator

        Q, n, nb = self.hidden, in_dim, intervals + order
        knots = clamped_knots(*self.domain, intervals, order)
        self.register_buffer("knots", knots.expand(n, -1).to(torch.get_default_dtype()).clone())
        self.coeffs = nn.Parameter(_gaussian((Q, n, nb), coeff_std, generator))
        self.base_weight = nn.Parameter(torch.full((Q, n), 1.0 / n if base_term else 0.0))
        if outer == "weights":
            self.phi = nn.Parameter(_gaussian((out_dim, Q), 1.0 / math.sqrt(Q), generator))
            with torch.no_grad():
                _renormalize_rows(self.phi, generator)
        else:
            oknots = clamped_knots(*self.outer_domain, intervals, order)
            self.register_buffer("outer_knots", oknots.expand(Q, -1).to(torch.get_default_dtype()).clone())
            self.outer_coeffs = nn.Parameter(_gaussian((out_dim, Q, nb), coeff_std, generator))
            self.outer_base = nn.Parameter(torch.full((out_dim, Q), 1.0 / Q if base_term else 0.0))
        self._omega_cache = None

    def grid(self, p: int) -> KnotGrid:
        return KnotGrid(*self.domain, self.intervals, self.order, self.knots[p].clone())

    def spline_parameters(self):
        yield self.coeffs
        if self.outer == "spline":
            yield self.outer_coeffs

    def forward(self, h: Tensor, training: Optional[bool] = None,
                rng: Optional[torch.Generator] = None,
                mask: Optional[Tensor] = None) -> Tensor:
        return kan_forward(self, h, self.training if training is None else training, rng, mask)

    def smoothness_matrices(self) -> Tensor:
        """Per-input ``Omega`` stack, ``(n, G+k, G+k)``, cached until knots change."""
        key = self.knots.clone()
        if self._omega_cache is None or not torch.equal(self._omega_cache[0], key):
            omega = torch.stack([smoothness_gram(self.grid(p)) for p in range(self.in_dim)])
            self._omega_cache = (key, omega)
        return self._omega_cache[1]

    def _outer_smoothness(self) -> Tensor:
        key = self.outer_knots[0].clone()
        cache = getattr(self, "_outer_omega_cache", None)
        if cache is None or not torch.equal(cache[0], key):
            grid = KnotGrid(*self.outer_domain, self.intervals, self.order, key)
            self._outer_omega_cache = (key, smoothness_gram(grid))
        return self._outer_omega_cache[1]

    @torch.no_grad()
    def adapt_grid(self, samples: Tensor, gamma: float = 0.5) -> None:
        """Move each input's knots toward its sample quantiles and refit its edges."""
        samples = samples.detach().to(torch.float64)
        if samples.dim() != 2 or samples.shape[1] != self.in_dim:
            raise DimensionError(f"expected m×{self.in_dim} samples, got {tuple(samples.shape)}")
        for p in range(self.in_dim):
            old = self.grid(p)
            new = adapt_knots(old, samples[:, p], gamma)
            if new is old:
                continue
            c = self.coeffs[:, p, :].T.to(torch.float64)  # nb × Q
            fitted = refit_on_grid(old, new, c, samples[:, p])
            self.coeffs[:, p, :] = fitted.T.to(self.coeffs.dtype)
            self.knots[p] = new.knots.to(self.knots.dtype)


def segment_mask(head: KanHead, rng: Optional[torch.Generator] = None) -> Tensor:
    """Keep-mask of shape ``(Q, n, G)`` over the knot spans of every edge."""
    p = head.reg.p_deact
    if p >= 1:
        raise KanConfigError(f"p_deact must be < 1, got {p}")
    shape = (head.hidden, head.in_dim, head.intervals)
    if p == 0:
        return torch.ones(shape, dtype=torch.bool)
    return torch.rand(shape, generator=rng) >= p


def kan_forward(head: KanHead, h: Tensor, training: bool = False,
                rng: Optional[torch.Generator] = None,
                mask: Optional[Tensor] = None) -> Tensor:
    if h.dim() != 2 or h.shape[1] != head.in_dim:
        raise DimensionError(f"KAN head expects b×{head.in_dim} input, got {tuple(h.shape)}")
    a, b = head.domain
    B, span = bspline_basis(h.clamp(a, b), head.knots, head.order)
    B = B.to(head.coeffs.dtype)
    if mask is None and training and head.reg.p_deact > 0:
        mask = segment_mask(head, rng)
    if mask is None:
        u = torch.einsum("bpj,qpj->bq", B, head.coeffs)
    else:
        # an edge's spline output is dropped where its input falls in a dropped span
        keep = mask.permute(1, 2, 0)[torch.arange(head.in_dim), span]  # b × n × Q
        per_edge = torch.einsum("bpj,qpj->bpq", B, head.coeffs)
        scale = 1.0 / (1.0 - head.reg.p_deact)
        u = (per_edge * keep.to(per_edge.dtype)).sum(1) * scale
    if head.base_term:
        u = u + h @ head.base_weight.T
    if head.outer == "weights":
        return u @ head.phi.T
    oa, ob = head.outer_domain
    Bo, _ = bspline_basis(u.clamp(oa, ob), head.outer_knots, head.order)
    z = torch.einsum("bqj,rqj->br", Bo.to(u.dtype), head.outer_coeffs)
    if head.base_term:
        z = z + u @ head.outer_base.T
    return z


def kan_reg_loss(head: KanHead) -> Tuple[Tensor, Tensor, Tensor]:
    """``(l1, smooth, total)`` for the head's spline coefficients.

    Segment deactivation acts inside the forward pass and adds nothing here.
    """
    c = head.coeffs
    l1 = c.abs().sum()
    omega = head.smoothness_matrices().to(c.dtype)
    smooth = torch.einsum("qpi,pij,qpj->", c, omega, c)
    if head.outer == "spline":
        oc = head.outer_coeffs
        l1 = l1 + oc.abs().sum()
        smooth = smooth + torch.einsum("rqi,ij,rqj->", oc, head._outer_smoothness().to(oc.dtype), oc)
    total = head.reg.lambda_l1 * l1 + head.reg.lambda_smooth * smooth
    return l1, smooth, total


def _renormalize_rows(w: Tensor, generator: Optional[torch.Generator] = None) -> None:
    norms = w.norm(dim=1)
    for r in (norms < 1e-12).nonzero().flatten().tolist():
        w[r] = _gaussian((w.shape[1],), 1.0 / math.sqrt(w.shape[1]), generator).to(w.dtype)
        while w[r].norm() < 1e-12:
            w[r] = _gaussian((w.shape[1],), 1.0, generator).to(w.dtype)
    w.div_(w.norm(dim=1, keepdim=True))


@torch.no_grad()
def renormalize_phi(head: KanHead, generator: Optional[torch.Generator] = None) -> KanHead:
    if head.outer == "weights":
        _renormalize_rows(head.phi.data, generator if generator is not None else head._gen)
    return head


class MlpHead(nn.Module):
    """Affine, SiLU, affine."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Optional[int] = None,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden if hidden is not None else 2 * in_dim + 1
        self.fc1 = nn.Linear(in_dim, self.hidden)
        self.fc2 = nn.Linear(self.hidden, out_dim)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=generator) * 2 * bound - bound)
                layer.bias.copy_(torch.rand(layer.bias.shape, generator=generator) * 2 * bound - bound)

    def forward(self, h: Tensor) -> Tensor:
        return mlp_forward(self, h)


def mlp_forward(head: MlpHead, h: Tensor) -> Tensor:
    if h.dim() != 2 or h.shape[1] != head.in_dim:
        raise DimensionError(f"MLP head expects b×{head.in_dim} input, got {tuple(h.shape)}")
    return head.fc2(nn.functional.silu(head.fc1(h)))
