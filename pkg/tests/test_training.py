import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calico.errors import DimensionError, LossError, StepError, TrainingDataError, TrainingDiverged
from calico.fixtures import GRADCHECK_CONFIG, gradcheck_problem
from calico.model import CalicoModel
from calico.multimodal.sequence import ImageBatch
from calico.numerics import Tensor
from calico.numerics.layers import Parameter
from calico.training.losses import LossWeights, combined_loss, dice_loss, focal_loss, text_loss
from calico.training.loop import CURVE_COLUMNS, TrainSample, smoothed, train_toy
from calico.training.optim import OptimizerState, optimizer_step


def rng(seed=0):
    return np.random.default_rng(seed)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---- text loss ---------------------------------------------------------------------

def test_text_loss_uniform_is_log_vocab():
    assert abs(text_loss(Tensor(np.zeros((5, 265))), np.arange(5)).item() - math.log(265)) < 1e-12


def test_text_loss_confident_is_near_zero():
    t = np.array([3, 1, 4])
    logits = np.zeros((3, 6))
    logits[np.arange(3), t] = 60.0
    assert text_loss(Tensor(logits), t).item() < 1e-20


def test_text_loss_matches_log_softmax_oracle():
    r = rng(1)
    logits = r.normal(size=(7, 11)) * 3
    t = r.integers(0, 11, size=7)
    mask = np.array([0, 1, 1, 0, 1, 1, 1], dtype=bool)
    ref = 0.0
    for i in np.flatnonzero(mask):
        row = logits[i]
        ref -= row[t[i]] - (row.max() + math.log(sum(math.exp(v - row.max()) for v in row)))
    ref /= mask.sum()
    assert abs(text_loss(Tensor(logits), t, mask).item() - ref) < 1e-12


def test_text_loss_errors():
    with pytest.raises(LossError):
        text_loss(Tensor(np.zeros((3, 4))), [0, 1, 2], [False] * 3)
    with pytest.raises(DimensionError):
        text_loss(Tensor(np.zeros((3, 4))), [0, 1])


# ---- mask losses ---------------------------------------------------------------------

def bce(x, t):
    p = sigmoid(x)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_focal_gamma_zero_is_bce(seed):
    r = rng(seed)
    x = r.normal(size=(4, 5)) * 2
    t = (r.random((4, 5)) < 0.5).astype(float)
    assert abs(focal_loss(Tensor(x), t, gamma=0).item() - bce(x, t)) < 1e-12


def test_focal_hand_formula_3x3():
    r = rng(2)
    x = r.normal(size=(3, 3)) * 2
    t = (r.random((3, 3)) < 0.5).astype(float)
    total = 0.0
    for i in range(3):
        for j in range(3):
            p = sigmoid(x[i, j])
            pt = p if t[i, j] else 1 - p
            total += (1 - pt) ** 2 * -math.log(pt)
    assert abs(focal_loss(Tensor(x), t, gamma=2).item() - total / 9) < 1e-12


def test_focal_confident_and_errors():
    t = np.array([[1.0, 0.0]])
    assert focal_loss(Tensor(np.array([[40.0, -40.0]])), t).item() < 1e-30
    with pytest.raises(LossError):
        focal_loss(Tensor(np.zeros((1, 2))), np.array([[0.5, 1.0]]))
    with pytest.raises(DimensionError):
        focal_loss(Tensor(np.zeros((1, 2))), np.zeros((2, 1)))


def test_dice_cases():
    t = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert dice_loss(Tensor(t), t).item() == 0.0
    disjoint = np.zeros((8, 8))
    disjoint[0] = 1
    target = np.zeros((8, 8))
    target[-1] = 1
    assert dice_loss(Tensor(disjoint), target).item() == pytest.approx(1 - 1 / 17, abs=1e-15)
    p = rng(3).random((4, 4))
    g = (rng(4).random((4, 4)) < 0.5).astype(float)
    ref = 1 - (2 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0)
    assert abs(dice_loss(Tensor(p), g).item() - ref) < 1e-12
    with pytest.raises(LossError):
        dice_loss(Tensor(np.full((2, 2), 1.5)), np.ones((2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_losses_are_bounded(seed):
    r = rng(seed)
    x = r.normal(size=(3, 4)) * 4
    t = (r.random((3, 4)) < 0.5).astype(float)
    assert focal_loss(Tensor(x), t).item() >= 0
    d = dice_loss(Tensor(sigmoid(x)), t).item()
    assert 0 <= d <= 1


# ---- combined loss --------------------------------------------------------------------

def test_default_weights():
    w = LossWeights()
    assert (w.lambda_text, w.lambda_focal, w.lambda_dice, w.gamma, w.dice_eps) == (1.0, 2.0, 0.5, 2.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_dice=-1)


def test_combined_equals_weighted_components():
    r = rng(5)
    text = Tensor(np.array(1.7))
    preds = [r.normal(size=(4, 4)) for _ in range(3)]
    gts = [(r.random((4, 4)) < 0.5).astype(float) for _ in range(3)]
    out = combined_loss(text, [Tensor(p) for p in preds], gts)
    focal = np.mean([focal_loss(Tensor(p), g).item() for p, g in zip(preds, gts)])
    dice = np.mean([dice_loss(Tensor(sigmoid(p)), g).item() for p, g in zip(preds, gts)])
    assert abs(out.total.item() - (1.0 * 1.7 + 2.0 * focal + 0.5 * dice)) < 1e-12
    assert abs(out.focal - focal) < 1e-12 and abs(out.dice - dice) < 1e-12 and out.text == 1.7


def test_combined_without_masks_and_mismatch():
    out = combined_loss(Tensor(np.array(0.9)), [], [], LossWeights(lambda_text=3.0))
    assert out.total.item() == pytest.approx(2.7, abs=1e-15) and out.n_masks == 0
    with pytest.raises(TrainingDataError):
        combined_loss(Tensor(np.array(0.9)), [Tensor(np.zeros((2, 2)))], [])


# ---- optimizer ------------------------------------------------------------------------

def test_schedule():
    s = OptimizerState(total_steps=300)
    assert s.lr_at(50) == pytest.approx(2e-4, abs=1e-18)
    assert s.lr_at(100) == 4e-4 and s.lr_at(300) == 0.0
    assert s.lr_at(200) == pytest.approx(2e-4, abs=1e-18)
    assert (s.betas, s.grad_clip, s.base_lr, s.warmup_steps) == ((0.9, 0.95), 1.0, 4e-4, 100)


def test_zero_grads_leave_params():
    p = Parameter("w", rng(6).normal(size=(3, 2)))
    before = p.data.copy()
    p.tensor.grad = np.zeros((3, 2))
    optimizer_step([p], OptimizerState(warmup_steps=0))
    assert np.array_equal(p.data, before)


def test_adamw_matches_sequential_reference_on_bowl():
    # loss = 0.5 * |A w - b|^2 with a sizeable gradient so clipping engages early
    r = rng(7)
    A, b = r.normal(size=(4, 3)), r.normal(size=4) * 5
    w0 = r.normal(size=3)
    p, frozen = Parameter("w", w0.copy()), Parameter("f", np.ones(2), trainable=False)
    st_ = OptimizerState(base_lr=0.1, warmup_steps=2, total_steps=10, weight_decay=0.01)
    ref, m, v = w0.copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        p.tensor.grad = A.T @ (A @ p.data - b)
        frozen.tensor.grad = None
        optimizer_step([p, frozen], st_)

        g = A.T @ (A @ ref - b)
        n = math.sqrt(sum(x * x for x in g))
        if n > 1.0:
            g = g * (1.0 / n)
        lr = 0.1 * t / 2 if t <= 2 else 0.1 * (10 - t) / 8
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        ref = ref * (1 - lr * 0.01)
        ref = ref - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-12)
    assert np.array_equal(frozen.data, np.ones(2))


def test_nonfinite_grad_skips_step():
    p = Parameter("w", np.ones(2))
    p.tensor.grad = np.array([1.0, np.nan])
    s = OptimizerState()
    with pytest.raises(StepError):
        optimizer_step([p], s)
    assert s.step == 0 and np.array_equal(p.data, np.ones(2)) and not s.m


# ---- training loop --------------------------------------------------------------------

CFG = GRADCHECK_CONFIG


def tiny_samples(n=2):
    r = rng(9)
    out = []
    for i in range(n):
        out.append(TrainSample(ImageBatch(r.random((2, 3, CFG.H, CFG.W))), "<image> (IMAGE1) <image> (IMAGE2) x",
                               "<p> a </p> [SEG] (IMAGE2)", [r.random((CFG.H, CFG.W)) < 0.5], f"s{i}"))
    return out


def test_train_is_deterministic_and_freezes_encoders():
    runs = []
    for _ in range(2):
        m = CalicoModel(CFG, seed=1)
        frozen = {k: p.data.copy() for k, p in m.store.items() if not p.trainable}
        res = train_toy(m, tiny_samples(), steps=4, opt=OptimizerState(base_lr=1e-2, warmup_steps=1, total_steps=4))
        assert frozen and all(np.array_equal(m.store[k].data, v) for k, v in frozen.items())
        runs.append(res.curve)
    assert runs[0] == runs[1]
    assert [r["step"] for r in runs[0]] == [1, 2, 3, 4]


def test_curve_csv_columns():
    res = train_toy(CalicoModel(CFG, seed=2), tiny_samples(1), steps=2)
    lines = res.curve_csv().splitlines()
    assert lines[0].split(",") == list(CURVE_COLUMNS) and len(lines) == 3
    assert 0.0 <= res.token_accuracy <= 1.0 and 0.0 <= res.mean_iou <= 1.0


def test_cam_disabled_variant_trains():
    m = CalicoModel(CFG.replace(cam_enabled=False), seed=3)
    res = train_toy(m, tiny_samples(1), steps=3, opt=OptimizerState(base_lr=1e-2, warmup_steps=1, total_steps=3))
    assert res.curve[-1]["variant"] == m.cfg.variant_label != "full"
    assert all(np.isfinite(r["total"]) for r in res.curve)


def test_train_rejects_empty_and_bad_samples():
    m = CalicoModel(CFG, seed=0)
    with pytest.raises(TrainingDataError):
        train_toy(m, [], steps=1)
    bad = tiny_samples(1)[0]
    bad.masks = []
    with pytest.raises(TrainingDataError):
        train_toy(m, [bad], steps=1)


def test_divergence_reports_step():
    m = CalicoModel(CFG, seed=0)
    m.store["llm.head.weight"].data[0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train_toy(m, tiny_samples(1), steps=2)
    assert info.value.step == 1


def test_gradcheck_problem_has_gradient_everywhere():
    prob = gradcheck_problem(0)
    from calico.training.loop import sample_loss
    sample_loss(prob.model, prob.example).loss.total.backward()
    params = prob.model.store.trainable()
    assert all(p.grad is not None for p in params)


def test_smoothed_windows():
    assert smoothed(list(range(45)), 20) == [9.5, 29.5]
