"""Fit a small KAN head to an analytic function by full-batch L-BFGS."""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import torch
from torch import Tensor

from .kan import KanHead, KanRegConfig

__all__ = ["FUNCTIONS", "fit_function"]

# name -> (input dimension, target, outer composition able to represent it)
FUNCTIONS: Dict[str, Tuple[int, Callable[[Tensor], Tensor], str]] = {
    "sin_pi_x": (1, lambda x: torch.sin(torch.pi * x[:, 0]), "weights"),
    "x_squared": (1, lambda x: x[:, 0] ** 2, "weights"),
    "exp_x": (1, lambda x: torch.exp(x[:, 0]), "weights"),
    # products are not additive, so they need a nonlinear outer layer
    "xy": (2, lambda x: x[:, 0] * x[:, 1], "spline"),
}


def fit_function(name: str, seed: int = 0, intervals: int = 5, order: int = 3,
                 samples: int = 2000, test_samples: int = 5000, max_iter: int = 400,
                 outer: str = "") -> Dict:
    """Train a one-output KAN head on ``[-1, 1]^n`` and report held-out RMSE."""
    if name not in FUNCTIONS:
        raise KeyError(f"unknown function {name!r}; choose from {sorted(FUNCTIONS)}")
    n, fn, default_outer = FUNCTIONS[name]
    outer = outer or default_outer
    g = torch.Generator().manual_seed(seed)
    head = KanHead(n, 1, intervals=intervals, order=order, reg=KanRegConfig(0.0, 0.0, 0.0),
                   outer=outer, generator=g).double()
    x = torch.rand(samples, n, generator=g, dtype=torch.float64) * 2 - 1
    y = fn(x)
    opt = torch.optim.LBFGS(head.parameters(), lr=1.0, max_iter=max_iter, history_size=50,
                            line_search_fn="strong_wolfe", tolerance_grad=1e-12,
                            tolerance_change=1e-15)

    def closure():
        opt.zero_grad()
        loss = ((head(x, training=False)[:, 0] - y) ** 2).mean()
        loss.backward()
        return loss

    opt.step(closure)
    if outer == "weights":
        # unit-norm composition row with the scale moved into the (linear) inner edges
        with torch.no_grad():
            norm = head.phi.norm()
            head.phi.div_(norm)
            head.coeffs.mul_(norm)
            head.base_weight.mul_(norm)
    xt = torch.rand(test_samples, n, generator=g, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        rmse = ((head(xt, training=False)[:, 0] - fn(xt)) ** 2).mean().sqrt().item()
        train_rmse = ((head(x, training=False)[:, 0] - y) ** 2).mean().sqrt().item()
    return {"function": name, "inputs": n, "hidden": head.hidden, "intervals": intervals,
            "order": order, "outer": outer, "rmse": rmse, "train_rmse": train_rmse, "head": head}
