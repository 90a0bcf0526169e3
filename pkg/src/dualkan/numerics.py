"""Dense tensor helpers, a parameter tape over torch autograd, and a
central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional

import torch
from torch import Tensor

__all__ = [
    "NumericsError",
    "DimensionError",
    "NumericDomainError",
    "DegenerateVectorError",
    "ContractError",
    "GradTape",
    "matmul",
    "softmax_rows",
    "cosine_sim_matrix",
    "backward",
    "fd_check",
]


class NumericsError(Exception):
    """Base class for errors raised by tensor operations."""


class DimensionError(NumericsError, ValueError):
    pass


class NumericDomainError(NumericsError, ArithmeticError):
    pass


class DegenerateVectorError(NumericsError, ValueError):
    def __init__(self, operand: str, row: int):
        super().__init__(f"zero-norm row {row} in {operand}")
        self.operand = operand
        self.row = row


class ContractError(NumericsError, RuntimeError):
    pass


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return a @ b


def softmax_rows(logits: Tensor) -> Tensor:
    if logits.dim() != 2:
        raise DimensionError(f"expected a 2-d tensor, got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericDomainError("softmax_rows received non-finite logits")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def _row_norms(x: Tensor, operand: str) -> Tensor:
    norms = x.norm(dim=1)
    zero = (norms == 0).nonzero()
    if len(zero):
        raise DegenerateVectorError(operand, int(zero[0, 0]))
    return norms


def cosine_sim_matrix(z: Tensor, bank: Tensor) -> Tensor:
    """Pairwise cosine similarities between the rows of ``z`` and ``bank``."""
    if z.dim() != 2 or bank.dim() != 2 or z.shape[1] != bank.shape[1]:
        raise DimensionError(
            f"cosine similarity needs b×d and K×d, got {tuple(z.shape)} and {tuple(bank.shape)}"
        )
    zn = z / _row_norms(z, "z").unsqueeze(1)
    bn = bank / _row_norms(bank, "bank").unsqueeze(1)
    return (zn @ bn.T).clamp(-1.0, 1.0)


class GradTape:
    """Registry of named leaf parameters whose gradients a backward pass fills.

    The operations themselves are recorded by torch autograd; the tape only
    owns the parameter registry and the gradient buffers.
    """

    def __init__(self, params: Optional[Mapping[str, Tensor]] = None):
        self.params: Dict[str, Tensor] = {}
        self.grads: Dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.register(name, value)

    def register(self, name: str, value: Tensor) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered")
        if not value.is_leaf:
            raise ContractError(f"parameter {name!r} is not a leaf tensor")
        value.requires_grad_(True)
        self.params[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def backward(self, output: Tensor) -> Dict[str, Tensor]:
        if output.numel() != 1 or output.dim() > 1:
            raise ContractError(
                f"backward needs a scalar output, got shape {tuple(output.shape)}"
            )
        names = list(self.params)
        values = [self.params[n] for n in names]
        if output.requires_grad:
            grads = torch.autograd.grad(
                output.reshape(()), values, allow_unused=True
            )
        else:
            grads = [None] * len(values)
        self.grads = {
            n: torch.zeros_like(v) if g is None else g.detach()
            for n, v, g in zip(names, values, grads)
        }
        return self.grads


def backward(tape: GradTape, scalar_output: Tensor) -> Dict[str, Tensor]:
    return tape.backward(scalar_output)


def fd_check(
    f: Callable[[Dict[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    names: Optional[Iterable[str]] = None,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` maps a dict of parameter tensors to a scalar.  Parameters are
    copied to double precision; the error per coordinate is
    ``|g_analytic - g_fd| / max(1, |g_fd|)``.
    """
    base = {k: v.detach().to(torch.float64).clone() for k, v in params.items()}
    check = list(names) if names is not None else list(base)

    tape = GradTape({k: v.clone() for k, v in base.items()})
    out = f(tape.params)
    if not torch.isfinite(out).all():
        raise NumericDomainError("function is not finite at the base point")
    analytic = tape.backward(out)

    worst = 0.0
    with torch.no_grad():
        for name in check:
            flat = base[name].view(-1)
            g = analytic[name].reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f(base).item()
                flat[i] = orig - h
                fm = f(base).item()
                flat[i] = orig
                if not (_finite(fp) and _finite(fm)):
                    raise NumericDomainError(
                        f"non-finite value probing {name}[{i}]"
                    )
                g_fd = (fp - fm) / (2 * h)
                err = abs(g[i].item() - g_fd) / max(1.0, abs(g_fd))
                worst = max(worst, err)
    return worst


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")
