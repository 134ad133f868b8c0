import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contistream import losses
from contistream.autodiff import Tensor, backward, make_rng, numerical_gradient, op_softmax, parameter
from contistream.errors import ContractError, DimensionError
from contistream.losses import (
    LossConfig,
    compose_md_loss,
    cross_entropy,
    current_task_ce,
    kl_regularizer,
    margin_value,
    md_loss,
)

# -ln(e^2 / (e + e^2)), mpmath at 30 digits
CE_LOGITS_1_2 = 0.313261687518222834
# KL([.5, .5] || [.25, .75])
KL_HALF_QUARTER = 0.143841036225890464


def hinge_oracle(p, y, past, m):
    return sum(max(0.0, max(row[:past]) - row[label] + m) for row, label in zip(p, y)) / len(y)


def test_margin_schedule():
    assert margin_value(2) == 1.0
    assert margin_value(10) == 1 / 9
    assert margin_value(100) == 1 / 99
    with pytest.raises(ContractError):
        margin_value(1)


class TestMd:
    def test_inactive_row(self):
        p = Tensor([[0.1, 0.1, 0.8]])
        assert md_loss(p, [2], 2, 0.5).item() == 0.0

    def test_active_row(self):
        p = Tensor([[0.4, 0.1, 0.5]])
        assert md_loss(p, [2], 2, 0.5).item() == pytest.approx(0.4, abs=1e-15)

    def test_four_class_row(self):
        p = Tensor([[0.5, 0.1, 0.3, 0.1]])
        assert md_loss(p, [2], 2, 1 / 3).item() == pytest.approx(0.5 - 0.3 + 1 / 3, abs=1e-15)
        assert md_loss(Tensor([[0.05, 0.05, 0.85, 0.05]]), [2], 2, 1 / 3).item() == 0.0

    def test_batch_mean(self):
        p = Tensor([[0.1, 0.2, 0.7], [0.4, 0.1, 0.5]])
        assert md_loss(p, [2, 2], 2, 0.5).item() == pytest.approx(0.2, abs=1e-15)

    def test_past_label_rejected(self):
        with pytest.raises(ContractError):
            md_loss(Tensor([[0.3, 0.3, 0.4]]), [1], 2, 0.5)

    def test_label_count_mismatch(self):
        with pytest.raises(DimensionError):
            md_loss(Tensor([[0.3, 0.3, 0.4]]), [2, 2], 2, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), past=st.integers(1, 5), current=st.integers(1, 4))
    def test_matches_hand_formula(self, seed, past, current):
        rng = make_rng(seed)
        k = past + current
        p = rng.dirichlet(np.ones(k), size=6)
        y = rng.integers(past, k, size=6)
        m = margin_value(k)
        assert md_loss(Tensor(p), y, past, m).item() == pytest.approx(
            hinge_oracle(p.tolist(), y.tolist(), past, m), abs=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_golden(self):
        assert cross_entropy(Tensor([[1.0, 2.0]]), [1]).item() == pytest.approx(CE_LOGITS_1_2, abs=1e-15)

    def test_current_task_slice_ignores_other_logits(self):
        base = np.array([[0.3, -1.0, 1.0, 2.0]])
        shifted = base.copy()
        shifted[0, :2] = [50.0, -30.0]
        a = current_task_ce(Tensor(base), [3], (2, 4)).item()
        b = current_task_ce(Tensor(shifted), [3], (2, 4)).item()
        assert a == b == pytest.approx(CE_LOGITS_1_2, abs=1e-15)

    def test_current_task_range(self):
        with pytest.raises(ContractError):
            current_task_ce(Tensor([[0.0, 1.0, 2.0, 3.0]]), [1], (2, 4))


class TestKl:
    def test_identical_is_zero(self):
        p = make_rng(0).dirichlet(np.ones(5), size=4)
        assert kl_regularizer(Tensor(p), p).item() == 0.0

    def test_golden(self):
        assert kl_regularizer(Tensor([[0.5, 0.5]]), [[0.25, 0.75]]).item() == pytest.approx(
            KL_HALF_QUARTER, abs=1e-15)

    def test_floor_counts_clamps(self):
        before = losses.clamp_events
        value = kl_regularizer(Tensor([[0.5, 0.5]]), [[1.0, 0.0]]).item()
        assert losses.clamp_events == before + 1
        assert math.isfinite(value)
        assert value == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-12), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            kl_regularizer(Tensor([[0.5, 0.5]]), [[0.2, 0.3, 0.5]])


class TestCompose:
    def test_first_task_is_plain_ce(self):
        logits = Tensor(make_rng(1).normal(size=(4, 2)))
        parts = compose_md_loss(logits, [0, 1, 1, 0], 1, [0], 2, LossConfig())
        assert parts.total.item() == cross_entropy(logits, [0, 1, 1, 0]).item()
        assert parts.md.item() == parts.kl.item() == 0.0

    def test_later_tasks_need_memory(self):
        with pytest.raises(ContractError):
            compose_md_loss(Tensor(np.zeros((1, 4))), [2], 2, [0, 2], 4, LossConfig())

    def test_weighted_sum(self):
        rng = make_rng(4)
        cur = Tensor(rng.normal(size=(3, 4)))
        mem = Tensor(rng.normal(size=(3, 4)))
        teacher = rng.dirichlet(np.ones(4), size=3)
        y = [2, 3, 3]
        cfg = LossConfig(lam=0.3)
        parts = compose_md_loss(cur, y, 2, [0, 2], 4, cfg, mem, teacher)
        md = md_loss(op_softmax(cur), y, 2, margin_value(4)).item()
        ce = current_task_ce(cur, y, (2, 4)).item()
        kl = kl_regularizer(op_softmax(mem), teacher).item()
        assert parts.total.item() == pytest.approx(0.3 * md + ce + kl, abs=1e-14)

    def test_hand_composition(self):
        # lam * md + ce + kl with md = 0.5333..., ce = ln 2, kl as above
        total = 0.1 * (8 / 15) + math.log(2) + KL_HALF_QUARTER
        assert total == pytest.approx(0.890321550119169106, abs=1e-15)

    def test_margin_override(self):
        cur = Tensor([[0.0, 0.0, 0.0, 0.0]])
        mem = Tensor([[0.0, 0.0, 0.0, 0.0]])
        teacher = np.full((1, 4), 0.25)
        parts = compose_md_loss(cur, [2], 2, [0, 2], 4, LossConfig(margin_override=0.0), mem, teacher)
        assert parts.md.item() == 0.0 and parts.hinge_active == 0


def _grad_check(build, x):
    backward(build())
    numeric = numerical_gradient(lambda: build().item(), x)
    assert np.all(np.abs(x.grad - numeric) <= np.maximum(1e-4 * np.abs(numeric), 1e-6))


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    rng = make_rng(seed)
    z = parameter(rng.normal(size=(5, 6)))
    y = rng.integers(3, 6, size=5)
    _grad_check(lambda: md_loss(op_softmax(z), y, 3, 0.4), z)
    z.grad = None
    _grad_check(lambda: current_task_ce(z, y, (3, 6)), z)
    z.grad = None
    teacher = rng.dirichlet(np.ones(6), size=5)
    _grad_check(lambda: kl_regularizer(op_softmax(z), teacher), z)
    z.grad = None
    mem = parameter(rng.normal(size=(5, 6)))
    build = lambda: compose_md_loss(z, y, 2, [0, 3], 6, LossConfig(0.5), mem, teacher).total  # noqa: E731
    _grad_check(build, z)
    mem.grad = None
    _grad_check(build, mem)
