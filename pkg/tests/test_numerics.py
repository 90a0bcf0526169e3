import math

import pytest
import torch

from dualkan.numerics import (ContractError, DegenerateVectorError, DimensionError, GradTape,
                              NumericDomainError, backward, cosine_sim_matrix, fd_check, matmul,
                              softmax_rows)


def test_matmul_examples():
    eye = torch.eye(2)
    assert torch.equal(matmul(eye, eye), eye)
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(matmul(a, torch.tensor([[0.0], [1.0]])), torch.tensor([[2.0], [4.0]]))
    assert torch.equal(matmul(a, torch.zeros(2, 3)), torch.zeros(2, 3))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(torch.ones(2, 3), torch.ones(2, 3))


def test_softmax_examples():
    assert torch.allclose(softmax_rows(torch.full((1, 4), 7.0)), torch.full((1, 4), 0.25))
    p = softmax_rows(torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64))
    assert torch.allclose(p, torch.tensor([[0.25, 0.75]], dtype=torch.float64), atol=1e-15)
    assert softmax_rows(torch.tensor([[-123.0]])).item() == 1.0


def test_softmax_is_stable_for_large_logits():
    p = softmax_rows(torch.tensor([[1000.0, 1000.0 + math.log(3.0)]], dtype=torch.float64))
    assert torch.allclose(p, torch.tensor([[0.25, 0.75]], dtype=torch.float64))


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        softmax_rows(torch.tensor([[0.0, float("nan")]]))


def test_cosine_examples():
    bank = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert cosine_sim_matrix(bank[:1], bank)[0, 0].item() == pytest.approx(1.0)
    assert cosine_sim_matrix(bank[:1], bank)[0, 1].item() == 0.0
    s = cosine_sim_matrix(torch.tensor([[1.0, 1.0]], dtype=torch.float64), bank.double())
    assert s[0, 0].item() == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_zero_row_names_operand_and_row():
    with pytest.raises(DegenerateVectorError) as e:
        cosine_sim_matrix(torch.ones(2, 3), torch.tensor([[1.0, 0, 0], [0, 0, 0]]))
    assert e.value.operand == "bank" and e.value.row == 1


def test_tape_examples():
    x = torch.tensor(3.0, dtype=torch.float64)
    tape = GradTape({"x": x})
    assert backward(tape, tape["x"] ** 2)["x"].item() == 6.0
    tape = GradTape({"x": torch.tensor(3.0)})
    assert backward(tape, torch.tensor(5.0))["x"].item() == 0.0


def test_tape_requires_scalar():
    tape = GradTape({"x": torch.ones(3)})
    with pytest.raises(ContractError):
        tape.backward(tape["x"] * 2)


def test_fd_check_quadratic_is_exact():
    a = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=torch.float64)
    err = fd_check(lambda P: P["x"] @ a @ P["x"] + P["x"].sum(), {"x": torch.tensor([0.3, -1.2])})
    assert err < 1e-10


def test_fd_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 3

        @staticmethod
        def backward(ctx, g):
            return g * 0.0

    err = fd_check(lambda P: Wrong.apply(P["x"]).sum(), {"x": torch.tensor([1.0, 2.0])})
    # analytic 0 against true gradients 3 and 12
    assert err == pytest.approx(1.0)
