"""Clamped B-spline bases on bounded intervals and univariate spline edges."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch
from torch import Tensor

__all__ = [
    "SplineError",
    "KnotGrid",
    "SplineEdge",
    "clamped_knots",
    "bspline_basis",
    "basis_matrix",
    "basis_derivative_matrix",
    "greville_abscissae",
    "edge_eval",
    "fit_coeffs",
    "smoothness_gram",
    "adapt_knots",
    "grid_adapt",
]


class SplineError(ValueError):
    pass


def clamped_knots(a: float, b: float, intervals: int, order: int,
                  interior: Optional[Tensor] = None) -> Tensor:
    """Knot vector of length ``intervals + 2*order + 1`` with clamped ends."""
    if interior is None:
        interior = torch.linspace(a, b, intervals + 1, dtype=torch.float64)[1:-1]
    return torch.cat([
        torch.full((order + 1,), float(a), dtype=torch.float64),
        interior.to(torch.float64),
        torch.full((order + 1,), float(b), dtype=torch.float64),
    ])


@dataclass
class KnotGrid:
    a: float = -1.0
    b: float = 1.0
    intervals: int = 5
    order: int = 3
    knots: Optional[Tensor] = None

    def __post_init__(self):
        if not self.a < self.b:
            raise SplineError(f"empty domain [{self.a}, {self.b}]")
        if self.intervals < 1 or self.order < 0:
            raise SplineError("intervals must be >= 1 and order >= 0")
        if self.knots is None:
            self.knots = clamped_knots(self.a, self.b, self.intervals, self.order)
        knots = self.knots.to(torch.float64)
        k = self.order
        if knots.numel() != self.intervals + 2 * k + 1:
            raise SplineError(
                f"expected {self.intervals + 2 * k + 1} knots, got {knots.numel()}"
            )
        if (knots[1:] < knots[:-1]).any():
            raise SplineError("knots must be nondecreasing")
        if not ((knots[: k + 1] == self.a).all() and (knots[-k - 1:] == self.b).all()):
            raise SplineError("knot vector is not clamped to the domain")
        if (knots[k + 1: -k - 1] <= self.a).any() or (knots[k + 1: -k - 1] >= self.b).any():
            raise SplineError("interior knots must lie strictly inside the domain")
        self.knots = knots

    @property
    def num_basis(self) -> int:
        return self.intervals + self.order

    @property
    def interior(self) -> Tensor:
        k = self.order
        return self.knots[k + 1: -k - 1]

    def with_interior(self, interior: Tensor) -> "KnotGrid":
        return KnotGrid(self.a, self.b, self.intervals, self.order,
                        clamped_knots(self.a, self.b, self.intervals, self.order, interior))


def _safe_recip(d: Tensor) -> Tensor:
    return torch.where(d > 0, 1.0 / torch.where(d > 0, d, torch.ones_like(d)),
                       torch.zeros_like(d))


def bspline_basis(x: Tensor, knots: Tensor, order: int,
                  basis_order: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """Cox-de Boor evaluation for a batch of inputs against per-column knots.

    ``x`` is ``(m, n)`` and already inside the domain; ``knots`` is
    ``(n, L)``.  Returns the basis of degree ``basis_order`` (default
    ``order``) with shape ``(m, n, L - basis_order - 1)`` and the index of the
    knot span holding each input, counted from the left domain end.
    """
    p = order if basis_order is None else basis_order
    L = knots.shape[-1]
    knots = knots.to(x.dtype)
    # spans order..L-order-2 are the nondegenerate domain spans
    idx = torch.searchsorted(knots.contiguous(), x.T.contiguous(), right=True).T - 1
    idx = idx.clamp(order, L - order - 2)
    B = torch.nn.functional.one_hot(idx, L - 1).to(x.dtype)
    xe = x.unsqueeze(-1)
    for d in range(1, p + 1):
        t_lo = knots[:, : L - d - 1]
        t_hi = knots[:, d: L - 1]
        t_lo1 = knots[:, 1: L - d]
        t_hi1 = knots[:, d + 1:]
        left = (xe - t_lo) * _safe_recip(t_hi - t_lo) * B[..., :-1]
        right = (t_hi1 - xe) * _safe_recip(t_hi1 - t_lo1) * B[..., 1:]
        B = left + right
    return B, idx - order


def _clamp_to(x: Tensor, grid: KnotGrid) -> Tensor:
    return x.clamp(grid.a, grid.b)


def basis_matrix(grid: KnotGrid, x: Tensor) -> Tensor:
    """All basis values at ``x``; row ``i`` holds ``B_j(x_i)`` for every ``j``."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    x = x.reshape(-1)
    if x.numel() == 0:
        return torch.zeros(0, grid.num_basis, dtype=x.dtype)
    B, _ = bspline_basis(_clamp_to(x, grid).unsqueeze(1), grid.knots.unsqueeze(0), grid.order)
    return B[:, 0, :]


def basis_derivative_matrix(grid: KnotGrid, x: Tensor, nu: int) -> Tensor:
    """Matrix of ``d^nu B_j / dx^nu`` at ``x`` (shape ``m × (G+k)``)."""
    k, t = grid.order, grid.knots
    x = torch.as_tensor(x, dtype=torch.float64).reshape(-1)
    if nu > k:
        return torch.zeros(x.numel(), grid.num_basis, dtype=torch.float64)
    B, _ = bspline_basis(_clamp_to(x, grid).unsqueeze(1), t.unsqueeze(0), k, k - nu)
    B = B[:, 0, :]
    # B'_{i,d} = d/(t_{i+d}-t_i) B_{i,d-1} - d/(t_{i+d+1}-t_{i+1}) B_{i+1,d-1}
    for d in range(k - nu + 1, k + 1):
        n_out = t.numel() - d - 1
        a = d * _safe_recip(t[d: d + n_out + 1] - t[: n_out + 1])
        B = B[:, :-1] * a[:-1] - B[:, 1:] * a[1:]
    return B


def greville_abscissae(grid: KnotGrid) -> Tensor:
    """Coefficient positions that make the spline reproduce ``f(x) = x``."""
    k, t = grid.order, grid.knots
    if k == 0:
        return 0.5 * (t[:-1] + t[1:])
    return torch.stack([t[j + 1: j + k + 1].mean() for j in range(grid.num_basis)])


@dataclass
class SplineEdge:
    """One learnable univariate function ``sum_j c_j B_j(x) + w x``."""

    grid: KnotGrid = field(default_factory=KnotGrid)
    coeffs: Optional[Tensor] = None
    base_weight: Optional[Tensor] = None

    def __post_init__(self):
        if self.coeffs is None:
            self.coeffs = torch.zeros(self.grid.num_basis, dtype=torch.float64)
        if self.base_weight is None:
            self.base_weight = torch.zeros((), dtype=self.coeffs.dtype)
        if self.coeffs.shape != (self.grid.num_basis,):
            raise SplineError(
                f"expected {self.grid.num_basis} coefficients, got {tuple(self.coeffs.shape)}"
            )

    def __call__(self, x: Tensor) -> Tensor:
        return edge_eval(self, x)


def edge_eval(edge: SplineEdge, x: Tensor) -> Tensor:
    x = torch.as_tensor(x, dtype=edge.coeffs.dtype).reshape(-1)
    B = basis_matrix(edge.grid, x).to(edge.coeffs.dtype)
    # the linear base term sees the raw input so gradients survive outside [a, b]
    return B @ edge.coeffs + edge.base_weight * x


def fit_coeffs(grid: KnotGrid, x: Tensor, y: Tensor,
               weights: Optional[Tensor] = None) -> Tensor:
    """Least-squares spline coefficients for samples ``(x, y)``.

    ``y`` may carry trailing columns to fit several functions at once.
    """
    A = basis_matrix(grid, torch.as_tensor(x, dtype=torch.float64))
    Y = torch.as_tensor(y, dtype=torch.float64)
    squeeze = Y.dim() == 1
    if squeeze:
        Y = Y.unsqueeze(1)
    if weights is not None:
        w = torch.as_tensor(weights, dtype=torch.float64).unsqueeze(1)
        A, Y = A * w, Y * w
    sol = torch.linalg.lstsq(A, Y, driver="gelsd").solution
    return sol[:, 0] if squeeze else sol


def smoothness_gram(grid: KnotGrid) -> Tensor:
    """``Omega_ij = integral of B_i'' B_j'' over the domain``.

    Gauss-Legendre with ``k - 1`` nodes per span integrates the piecewise
    degree ``2k - 4`` integrand exactly.
    """
    k = grid.order
    if k < 2:
        raise SplineError(f"smoothness penalty needs order >= 2, got {k}")
    nodes, wts = np.polynomial.legendre.leggauss(max(k - 1, 1))
    breaks = torch.unique(grid.knots)
    lo, hi = breaks[:-1], breaks[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    xs = (mid.unsqueeze(1) + half.unsqueeze(1) * torch.from_numpy(nodes)).reshape(-1)
    ws = (half.unsqueeze(1) * torch.from_numpy(wts)).reshape(-1)
    D2 = basis_derivative_matrix(grid, xs, 2)
    omega = D2.T @ (D2 * ws.unsqueeze(1))
    return 0.5 * (omega + omega.T)


def adapt_knots(grid: KnotGrid, samples: Tensor, gamma: float = 0.5) -> KnotGrid:
    """Blend interior knots toward the empirical quantiles of ``samples``."""
    s = _clamp_to(torch.as_tensor(samples, dtype=torch.float64).reshape(-1), grid)
    if s.numel() < grid.intervals + 1:
        raise SplineError(
            f"need at least {grid.intervals + 1} samples, got {s.numel()}"
        )
    if gamma == 0 or grid.intervals == 1 or (s == s[0]).all():
        return grid
    probs = torch.linspace(0, 1, grid.intervals + 1, dtype=torch.float64)[1:-1]
    q = torch.quantile(s, probs)
    uniform = torch.linspace(grid.a, grid.b, grid.intervals + 1, dtype=torch.float64)[1:-1]
    interior = gamma * q + (1 - gamma) * uniform
    # keep interior knots strictly increasing and off the endpoints
    gap = 1e-3 * (grid.b - grid.a) / grid.intervals
    lo = grid.a + gap
    out = []
    for v in interior.tolist():
        v = max(v, lo)
        out.append(v)
        lo = v + gap
    hi = grid.b - gap
    for i in range(len(out) - 1, -1, -1):
        out[i] = min(out[i], hi)
        hi = out[i] - gap
    return grid.with_interior(torch.tensor(out, dtype=torch.float64))


def refit_on_grid(old: KnotGrid, new: KnotGrid, coeffs: Tensor,
                  samples: Tensor) -> Tensor:
    """Coefficients on ``new`` reproducing the spline ``(old, coeffs)``.

    Samples carry unit weight; a light uniform design keeps bases without
    sample support determined.
    """
    s = _clamp_to(torch.as_tensor(samples, dtype=torch.float64).reshape(-1), old)
    u = torch.linspace(old.a, old.b, 4 * new.num_basis, dtype=torch.float64)
    x = torch.cat([s, u])
    w = torch.cat([torch.ones_like(s), torch.full_like(u, 1e-3)])
    c = coeffs.detach().to(torch.float64)
    y = basis_matrix(old, x) @ (c if c.dim() == 2 else c.unsqueeze(1))
    sol = fit_coeffs(new, x, y, w)
    return sol if c.dim() == 2 else sol[:, 0]


def grid_adapt(edge: SplineEdge, samples: Tensor, gamma: float = 0.5) -> SplineEdge:
    new_grid = adapt_knots(edge.grid, samples, gamma)
    if new_grid is edge.grid:
        return edge
    coeffs = refit_on_grid(edge.grid, new_grid, edge.coeffs, samples)
    return SplineEdge(new_grid, coeffs.to(edge.coeffs.dtype), edge.base_weight)
