"""Confusion counting, hard metrics, and the soft dice loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amseg.errors import ShapeError, ValidationError
from amseg.gradcheck import grad_check
from amseg.metrics import (ConfusionCounts, accuracy, all_metrics, confusion,
                           dice_loss, dice_score, iou, recall,
                           sensitivity_paper)
from amseg.tensor import Tensor, active_record

from oracles import confusion_loops

counts_strategy = st.builds(
    ConfusionCounts,
    tp=st.integers(0, 10 ** 6), fp=st.integers(0, 10 ** 6),
    tn=st.integers(0, 10 ** 6), fn=st.integers(0, 10 ** 6))


# -- confusion counting --------------------------------------------------------------


def test_confusion_worked_example():
    pred = np.array([[0.9, 0.8, 0.7, 0.6, 0.51, 0.9, 0.8, 0.6,
                      0.2, 0.1] + [0.0] * 90])
    mask = np.zeros((1, 100))
    mask[0, :5] = 1   # five true positives
    mask[0, 8:10] = 1  # two missed positives
    c = confusion(pred, mask)
    assert (c.tp, c.fp, c.tn, c.fn) == (5, 3, 90, 2)
    assert dice_score(c) == pytest.approx(10 / 15)
    assert iou(c) == pytest.approx(5 / 10)
    assert sensitivity_paper(c) == pytest.approx(5 / 8)
    assert recall(c) == pytest.approx(5 / 7)
    assert accuracy(c) == pytest.approx(95 / 100)


def test_confusion_threshold_tie_counts_positive():
    c = confusion(np.array([0.5]), np.array([1.0]))
    assert c.tp == 1 and c.fn == 0


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(0)
    pred = rng.random((13, 7))
    mask = (rng.random((13, 7)) > 0.6).astype(np.float64)
    c = confusion(pred, mask, threshold=0.4)
    assert (c.tp, c.fp, c.tn, c.fn) == confusion_loops(pred, mask, 0.4)


def test_confusion_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_confusion_rejects_non_binary_mask():
    with pytest.raises(ValidationError):
        confusion(np.zeros(4), np.array([0.0, 0.5, 1.0, 1.0]))


def test_confusion_accepts_tensor_inputs():
    c = confusion(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))
    assert c.tp == 4 and c.total == 4


# -- metric identities ---------------------------------------------------------------


def test_empty_prediction_empty_mask_is_perfect():
    c = ConfusionCounts(tp=0, fp=0, tn=25, fn=0)
    assert dice_score(c) == 1.0
    assert iou(c) == 1.0
    assert sensitivity_paper(c) == 1.0
    assert recall(c) == 1.0
    assert accuracy(c) == 1.0


def test_identity_prediction_scores_one():
    mask = (np.random.default_rng(1).random((9, 9)) > 0.5).astype(np.float64)
    c = confusion(mask, mask)
    assert all(v == 1.0 for v in all_metrics(c).values())


def test_accuracy_of_zero_pixels_rejected():
    with pytest.raises(ValidationError):
        accuracy(ConfusionCounts(0, 0, 0, 0))


@given(counts_strategy)
@settings(max_examples=200, deadline=None)
def test_dice_iou_identity(c):
    d, j = dice_score(c), iou(c)
    assert abs(d - 2 * j / (1 + j)) <= 1e-12
    assert 0.0 <= j <= d <= 1.0


@given(counts_strategy)
@settings(max_examples=100, deadline=None)
def test_accuracy_swap_invariance(c):
    if c.total == 0:
        return
    swapped = ConfusionCounts(tp=c.tn, fp=c.fn, tn=c.tp, fn=c.fp)
    assert accuracy(c) == pytest.approx(accuracy(swapped), abs=1e-15)


def test_counts_add():
    total = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40)
    assert (total.tp, total.fp, total.tn, total.fn) == (11, 22, 33, 44)


# -- dice loss -----------------------------------------------------------------------


@pytest.fixture(autouse=True)
def fresh_record():
    active_record().reset()
    yield
    active_record().reset()


def test_dice_loss_perfect_prediction():
    mask = np.ones((1, 1, 4, 4))
    loss = dice_loss(Tensor(mask), Tensor(mask))
    # (2*16 + 1) / (32 + 1) = 1 exactly; loss 0
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_worst_case_bounded_by_smooth():
    pred = np.ones((1, 1, 2, 2))
    mask = np.zeros((1, 1, 2, 2))
    loss = dice_loss(Tensor(pred), Tensor(mask))
    assert loss.item() == pytest.approx(1.0 - 1.0 / 5.0)


def test_dice_loss_empty_empty_is_zero():
    zeros = np.zeros((2, 1, 3, 3))
    loss = dice_loss(Tensor(zeros), Tensor(zeros))
    assert loss.item() == pytest.approx(0.0, abs=0)


def test_dice_loss_batch_is_mean_of_samples():
    rng = np.random.default_rng(2)
    preds = rng.random((3, 1, 4, 4))
    masks = (rng.random((3, 1, 4, 4)) > 0.5).astype(np.float64)
    whole = dice_loss(Tensor(preds), Tensor(masks)).item()
    singles = [dice_loss(Tensor(preds[i:i + 1]), Tensor(masks[i:i + 1])).item()
               for i in range(3)]
    assert whole == pytest.approx(np.mean(singles), abs=1e-12)


def test_dice_loss_spatial_permutation_invariance():
    rng = np.random.default_rng(3)
    pred = rng.random((1, 1, 4, 4))
    mask = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
    perm = rng.permutation(16)
    pred_p = pred.reshape(1, 1, -1)[:, :, perm].reshape(1, 1, 4, 4)
    mask_p = mask.reshape(1, 1, -1)[:, :, perm].reshape(1, 1, 4, 4)
    a = dice_loss(Tensor(pred), Tensor(mask)).item()
    b = dice_loss(Tensor(pred_p), Tensor(mask_p)).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_dice_loss_shape_checks():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
    with pytest.raises(ValidationError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))),
                  smooth=0.0)


def test_dice_loss_gradient_tight():
    rng = np.random.default_rng(4)
    pred = Tensor(rng.random((1, 1, 4, 4)), requires_grad=True)
    mask = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
    report = grad_check(lambda p: dice_loss(p, mask), [pred], tol=1e-6)
    assert report.passed, report.summary()


def test_dice_loss_decreases_toward_mask():
    mask = np.zeros((1, 1, 4, 4))
    mask[0, 0, 1:3, 1:3] = 1.0
    far = dice_loss(Tensor(np.full_like(mask, 0.5)), Tensor(mask)).item()
    active_record().reset()
    near = dice_loss(Tensor(np.clip(mask * 0.9 + 0.05, 0, 1)),
                     Tensor(mask)).item()
    assert near < far
