import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dotrain.losses import DistillConfig, KLOrder, combined_loss, cross_entropy, kd_divergence
from dotrain.models import NetworkSpec, forward, init_network
from dotrain.tensor import Node, Tape, backward

NO_T2 = dict(t_square_scaling=False)


def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros((3, 4)), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    assert cross_entropy(np.array([[100.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-10)


def test_cross_entropy_hand_value():
    # -log(e / (e + 1)) = log(1 + e^-1)
    expected = math.log1p(math.exp(-1.0))
    assert expected == pytest.approx(0.313262, abs=1e-6)
    assert cross_entropy(np.array([[1.0, 0.0]]), [0]).item() == pytest.approx(expected, abs=1e-15)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 2)), [2])


def test_kd_identical_logits_is_zero():
    z = np.random.default_rng(0).standard_normal((5, 4))
    for order in KLOrder:
        for t in (1.0, 4.0):
            assert abs(kd_divergence(z, z, DistillConfig(temperature=t, kl_order=order)).item()) < 1e-12


def test_kd_row_constant_logits_is_zero():
    s = np.array([[1.0, 1.0, 1.0], [-2.0, -2.0, -2.0]])
    t = np.array([[5.0, 5.0, 5.0], [0.0, 0.0, 0.0]])
    assert abs(kd_divergence(s, t).item()) < 1e-12


def test_kd_hand_value_teacher_first():
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert expected == pytest.approx(0.130812, abs=1e-6)
    cfg = DistillConfig(temperature=1.0, **NO_T2)
    value = kd_divergence(np.zeros((1, 2)), np.array([[math.log(3.0), 0.0]]), cfg).item()
    assert value == pytest.approx(expected, abs=1e-14)


def test_kd_hand_value_student_first():
    # KL(student=[.5,.5] || teacher=[.75,.25])
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    cfg = DistillConfig(temperature=1.0, kl_order="student_first", **NO_T2)
    value = kd_divergence(np.zeros((1, 2)), np.array([[math.log(3.0), 0.0]]), cfg).item()
    assert value == pytest.approx(expected, abs=1e-14)


def test_kd_t_square_scaling():
    s, t = np.array([[0.3, -1.0, 2.0]]), np.array([[1.0, 0.0, -1.0]])
    plain = kd_divergence(s, t, DistillConfig(temperature=3.0, **NO_T2)).item()
    scaled = kd_divergence(s, t, DistillConfig(temperature=3.0)).item()
    assert scaled == pytest.approx(9.0 * plain, rel=1e-14)


def test_kd_shape_mismatch():
    with pytest.raises(ValueError):
        kd_divergence(np.zeros((2, 3)), np.zeros((2, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    assert DistillConfig().alpha == 0.1 and DistillConfig().temperature == 4.0


def test_combined_boundary_weights():
    rng = np.random.default_rng(1)
    s, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    y = [0, 1, 2, 1]
    one = combined_loss(s, y, t, DistillConfig(alpha=1.0))
    assert one.total.item() == pytest.approx(one.task.item(), abs=1e-15)
    assert one.distill.item() > 0
    zero = combined_loss(s, y, t, DistillConfig(alpha=0.0))
    assert zero.total.item() == pytest.approx(zero.distill.item(), abs=1e-15)


def test_combined_arithmetic():
    # alpha=0.1 with CE=1 and KD=2 -> 0.1 + 1.8
    cfg = DistillConfig(alpha=0.1)
    assert cfg.alpha * 1.0 + (1 - cfg.alpha) * 2.0 == pytest.approx(1.9, abs=1e-15)
    rng = np.random.default_rng(2)
    s, t = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    terms = combined_loss(s, [0, 1, 2], t, cfg)
    assert terms.total.item() == pytest.approx(0.1 * terms.task.item() + 0.9 * terms.distill.item(), abs=1e-14)


logit_pairs = st.integers(1, 4).flatmap(lambda b: st.integers(2, 5).flatmap(lambda c: st.tuples(
    arrays(np.float64, (b, c), elements=st.floats(-30, 30)),
    arrays(np.float64, (b, c), elements=st.floats(-30, 30)),
)))


@given(logit_pairs, st.floats(0.5, 8.0), st.sampled_from(list(KLOrder)))
@settings(max_examples=150, deadline=None)
def test_kd_nonnegative(pair, temperature, order):
    s, t = pair
    value = kd_divergence(s, t, DistillConfig(temperature=temperature, kl_order=order)).item()
    assert value >= -1e-12


@given(logit_pairs, st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_cross_entropy_nonnegative_and_shift_invariant(pair, shift):
    s, _ = pair
    y = np.arange(s.shape[0]) % s.shape[1]
    a = cross_entropy(s, y).item()
    assert a >= 0.0
    assert cross_entropy(s + shift, y).item() == pytest.approx(a, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_total_gradient_is_weighted_sum_of_streams(seed):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(3, (5,), 4)
    params = init_network(spec, seed)
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 4, size=6)
    teacher = rng.standard_normal((6, 4)) * 3
    cfg = DistillConfig(alpha=float(rng.uniform(0, 1)))
    tape = Tape()
    terms = combined_loss(forward(params, spec, x, tape), y, teacher, cfg)
    g_total = backward(tape, terms.total)
    g_task = backward(tape, terms.task)
    g_kd = backward(tape, terms.distill)
    for name in params:
        np.testing.assert_allclose(
            g_total[name], cfg.alpha * g_task[name] + (1 - cfg.alpha) * g_kd[name], rtol=0, atol=1e-12
        )


def test_no_gradient_reaches_teacher():
    spec = NetworkSpec(2, (3,), 3)
    x = np.random.default_rng(0).standard_normal((4, 2))
    teacher_tape = Tape()
    teacher_logits = forward(init_network(spec, 1), spec, x, teacher_tape)
    student_tape = Tape()
    student_logits = forward(init_network(spec, 2), spec, x, student_tape)
    loss = kd_divergence(student_logits, teacher_logits)
    assert loss.tape is student_tape
    assert len(teacher_tape.entries) == 3
    backward(student_tape, loss)
