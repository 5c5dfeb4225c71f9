import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmccnet import losses as L
from mmccnet import tensor as T
from mmccnet.tensor import Tensor


def finite_difference(f, p, step=1e-6):
    grad = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        up, down = p.copy(), p.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2 * step)
    return grad


def dice_plain(p, t):
    s = (p**2).sum() + (t**2).sum()
    return 1.0 if s == 0 else 2 * (p * t).sum() / s


def test_dice_worked_example():
    d = L.dice_coefficient_img(np.array([1.0, 0.5]), np.array([1.0, 0.0]))
    assert float(d) == pytest.approx(2 / 2.25)


def test_dice_empty_pair_is_one_and_loss_zero():
    z = np.zeros((1, 1, 4, 4))
    assert float(L.dice_coefficient_img(z, z)) == 1.0
    assert float(L.l2_dice_loss(z, z)) == 0.0
    np.testing.assert_array_equal(L.l2_dice_grad(z, z), 0.0)


def test_dice_coefficient_img_rejects_batches():
    with pytest.raises(T.ShapeError):
        L.dice_coefficient_img(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 4)))


def test_l2_dice_loss_needs_nonempty_batch():
    with pytest.raises(ValueError):
        L.l2_dice_loss(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_l2_dice_grad_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=(1, 1, 4, 5))
    t = (rng.random((1, 1, 4, 5)) > 0.5).astype(float)
    numeric = finite_difference(lambda q: (1 - dice_plain(q, t)) ** 2, p)
    analytic = L.l2_dice_grad(p, t)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-10)


def test_l2_dice_grad_agrees_with_autodiff_on_batches():
    rng = np.random.default_rng(9)
    p = Tensor(rng.uniform(0.1, 0.9, size=(3, 1, 4, 4)), requires_grad=True)
    t = (rng.random((3, 1, 4, 4)) > 0.4).astype(float)
    T.backward(L.l2_dice_loss(p, t, reduction="sum"))
    np.testing.assert_allclose(p.grad, L.l2_dice_grad(p.data, t), rtol=1e-12)


def test_printed_partial_is_half_the_derivative():
    # one pixel, p = 0.5, t = 1: dD/dp = 2 (1 * 1.25 - 2 * 0.5 * 0.5) / 1.25^2 = 0.96
    p, t = np.array([0.5]), np.array([1.0])
    true = finite_difference(lambda q: dice_plain(q, t), p)[0]
    assert true == pytest.approx(0.96, abs=1e-9)
    assert L.dice_partial_unscaled(p, t)[0] == pytest.approx(0.48, abs=1e-12)
    assert 2 * L.dice_partial_unscaled(p, t)[0] == pytest.approx(true, rel=1e-9)


def test_dice_loss_is_jaccard_form():
    p = np.array([[0.8, 0.2, 0.6]])
    y = np.array([[1.0, 0.0, 1.0]])
    inter = (p * y).sum()
    expected = 1 - inter / ((y**2).sum() + (p**2).sum() - inter)
    assert float(L.dice_loss(p, y)) == pytest.approx(expected)


def test_bce_matches_sklearn_log_loss():
    from sklearn.metrics import log_loss

    rng = np.random.default_rng(2)
    p = rng.uniform(0.01, 0.99, size=(1, 1, 6, 6))
    y = (rng.random((1, 1, 6, 6)) > 0.5).astype(float)
    expected = log_loss(y.ravel(), p.ravel(), labels=[0, 1]) * y.size
    assert float(L.bce_loss(p, y)) == pytest.approx(expected, rel=1e-10)


def test_bce_clamps_saturated_predictions():
    y = np.array([[1.0, 0.0]])
    value = float(L.bce_loss(np.array([[0.0, 1.0]]), y, clamp=1e-7))
    assert math.isfinite(value)
    assert value == pytest.approx(-2 * math.log(1e-7), rel=1e-6)


def test_focal_joint_reduces_to_weighted_dice_plus_bce():
    # gamma = 0 drops both focal factors; a_f = 0.5 halves the cross-entropy
    rng = np.random.default_rng(4)
    p = rng.uniform(0.05, 0.95, size=(2, 1, 5, 5))
    y = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
    cfg = L.LossConfig(kind="focal_joint", gamma=0.0, focal_alpha=0.5)
    got = float(L.focal_joint_loss(p, y, cfg))
    expected = float(cfg.alpha * L.dice_loss(p, y) + 0.5 * L.bce_loss(p, y))
    assert got == pytest.approx(expected, rel=1e-10)


def test_focal_joint_default_constants():
    cfg = L.LossConfig(kind="focal_joint")
    assert (cfg.alpha, cfg.gamma) == (0.22, 1.9)


@pytest.mark.parametrize("kind", L.LOSS_KINDS)
def test_every_loss_kind_has_correct_gradient(kind):
    rng = np.random.default_rng(11)
    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 3, 4)), requires_grad=True)
    y = (rng.random((2, 1, 3, 4)) > 0.5).astype(float)
    cfg = L.LossConfig(kind=kind)
    report = T.grad_check(lambda: L.joint_loss(p, y, cfg), {"p": p}, step=1e-7)
    assert report.worst < 1e-5, report.max_rel_error


def test_joint_is_sum_of_parts():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
    joint = float(L.joint_loss(p, y, L.LossConfig("joint")))
    assert joint == pytest.approx(float(L.dice_loss(p, y)) + float(L.bce_loss(p, y)))
    joint_l2 = float(L.joint_loss(p, y, L.LossConfig("joint_l2")))
    assert joint_l2 == pytest.approx(joint + float(L.l2_dice_loss(p, y, reduction="mean")))


def test_shape_mismatch_and_bad_config():
    with pytest.raises(T.ShapeError):
        L.dice_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ValueError):
        L.LossConfig(kind="hinge")
    with pytest.raises(ValueError):
        L.dice_loss(np.zeros((1, 4)), np.zeros((1, 4)), reduction="max")


probabilities = arrays(np.float64, (1, 1, 4, 4), elements=st.floats(0.0, 1.0))
masks = arrays(np.float64, (1, 1, 4, 4), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=60, deadline=None)
@given(p=probabilities, y=masks)
def test_loss_ranges(p, y):
    d = float(L.dice_coefficient_img(p, y))
    assert -1e-12 <= d <= 1 + 1e-12
    assert 0 <= float(L.l2_dice_loss(p, y)) <= 1 + 1e-12
    assert -1e-12 <= float(L.dice_loss(p, y)) <= 1 + 1e-12
    assert float(L.bce_loss(p, y)) >= 0


@settings(max_examples=40, deadline=None)
@given(y=masks)
def test_perfect_prediction_minimises_dice_losses(y):
    assert float(L.l2_dice_loss(y, y)) == pytest.approx(0.0, abs=1e-12)
    assert float(L.dice_loss(y, y)) == pytest.approx(0.0, abs=1e-12)
