import math

import pytest
import torch

from pfml.network.optim import (
    AdamHyper,
    Optimizer,
    PlateauSchedule,
    WarmupPlateauSchedule,
    adam_step,
    init_state,
    radam_rectification,
    radam_step,
)


def radam_reference(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Published RAdam algorithm on a scalar, in plain floats."""
    m = v = 0.0
    rho_inf = 2 / (1 - b2) - 1
    branches = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        rho = rho_inf - 2 * t * b2**t / (1 - b2**t)
        if rho > 4:
            v_hat = math.sqrt(v / (1 - b2**t))
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            theta -= lr * r * m_hat / (v_hat + eps)
            branches.append("adaptive")
        else:
            theta -= lr * m_hat
            branches.append("sgd")
    return theta, branches


def test_adam_single_step_hand_value():
    p = torch.tensor([2.0], dtype=torch.float64)
    adam_step(p, torch.tensor([1.0], dtype=torch.float64), init_state(p), AdamHyper(lr=0.1))
    assert math.isclose(p.item(), 2.0 - 0.1 * 1 / (1 + 1e-8), rel_tol=1e-15)


@pytest.mark.parametrize("step", [adam_step, radam_step])
def test_zero_gradient_leaves_parameters(step):
    p = torch.tensor([1.5, -2.0], dtype=torch.float64)
    st = init_state(p)
    step(p, torch.zeros_like(p), st, AdamHyper(lr=0.1))
    assert p.tolist() == [1.5, -2.0]


def test_radam_first_four_steps_are_momentum_sgd():
    assert [radam_rectification(t, 0.999) is None for t in range(1, 7)] == [True] * 4 + [False] * 2
    _, branches = radam_reference(0.0, lambda x: 2 * (x - 3), 6)
    assert branches == ["sgd"] * 4 + ["adaptive"] * 2


def test_radam_matches_reference_on_scalar():
    grad_fn = lambda x: 2 * (x - 3) + math.sin(5 * x)
    p = torch.tensor([0.5], dtype=torch.float64)
    st = init_state(p)
    hyper = AdamHyper(lr=0.05)
    for steps in range(1, 41):
        radam_step(p, torch.tensor([grad_fn(p.item())], dtype=torch.float64), st, hyper)
        want, _ = radam_reference(0.5, grad_fn, steps, lr=0.05)
        assert math.isclose(p.item(), want, rel_tol=1e-12, abs_tol=1e-14), steps


def test_adam_matches_torch_adam():
    torch.manual_seed(0)
    a = torch.randn(5, dtype=torch.float64, requires_grad=True)
    b = a.detach().clone().requires_grad_(True)
    ours = Optimizer([a], "adam", lr=0.01)
    ref = torch.optim.Adam([b], lr=0.01)
    for _ in range(25):
        for p, opt in ((a, ours), (b, ref)):
            opt.zero_grad()
            ((p - 1) ** 4).sum().backward()
            opt.step()
    torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)


def test_optimizer_rejects_nonfinite_grad():
    p = torch.zeros(3, requires_grad=True)
    opt = Optimizer([p], "radam")
    p.grad = torch.tensor([0.0, float("inf"), 1.0])
    with pytest.raises(FloatingPointError):
        opt.step()
    with pytest.raises(ValueError):
        Optimizer([p], "sgd")


def test_plateau_constant_while_improving():
    s = PlateauSchedule(1e-3, patience=3)
    assert all(s.step(10 - e) == 1e-3 for e in range(30))


def test_plateau_stagnation_two_patience_quarters_lr():
    s = PlateauSchedule(1e-3, patience=5)
    s.step(1.0)
    lrs = [s.step(1.0) for _ in range(10)]
    assert lrs[4] == 5e-4 and lrs[-1] == 2.5e-4
    floor = PlateauSchedule(1.0, patience=1, min_lr=0.3)
    for _ in range(6):
        floor.step(5.0)
    assert floor.lr == 0.3


def test_warmup_values():
    w = WarmupPlateauSchedule(1e-4)
    assert w.lr_at(0) == 1e-4 * 0.001
    assert math.isclose(w.lr_at(10), 1e-4 * (0.001 + 0.999 * 10 / 20), rel_tol=1e-15)
    assert w.lr_at(20) == 1e-4
    lrs = [w.lr_at(e) for e in range(21)]
    assert all(a < b for a, b in zip(lrs, lrs[1:]))


def test_warmup_then_plateau():
    w = WarmupPlateauSchedule(1.0, warmup_epochs=4, plateau=PlateauSchedule(1.0, patience=2))
    nxt = [w.step(e, 1.0) for e in range(10)]
    # bad epochs only count from epoch 4 on; the first loss there sets the best
    assert nxt[:4] == [w.lr_at(1), w.lr_at(2), w.lr_at(3), 1.0]
    assert nxt[4:] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]
