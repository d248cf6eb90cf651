import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmt_adapter import autodiff as ad
from vmt_adapter.autodiff import ShapeError, Tensor
from vmt_adapter.config import ModelConfig
from vmt_adapter.data import TASKS, TaskSpec, collate, generate_sample, make_dataset
from vmt_adapter.decoder import Decoder, task_seed
from vmt_adapter.metrics import angular_errors, confusion_matrix, delta_up, miou
from vmt_adapter.training import (
    Adam,
    MultiTaskModel,
    cosine_loss,
    cross_entropy,
    evaluate,
    linear_lr,
    multitask_step,
    run_training,
    smoothed,
)

# data


def test_same_seed_same_sample():
    a, b = generate_sample(12), generate_sample(12)
    for field in ("image", "seg", "parts", "sal", "normals"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sample_invariants(seed):
    s = generate_sample(seed)
    assert s.image.shape == (3, 64, 64) and s.image.min() >= 0 and s.image.max() <= 1
    assert 1 <= s.num_shapes <= 4
    assert (s.seg > 0).any()
    assert s.seg.max() < TASKS["seg"].output_channels and s.parts.max() < TASKS["parts"].output_channels
    np.testing.assert_array_equal(s.sal, (s.seg != 0).astype(s.sal.dtype))
    np.testing.assert_array_equal(s.parts > 0, s.seg > 0)
    np.testing.assert_allclose(np.linalg.norm(s.normals, axis=0), 1.0, atol=1e-5)


def test_normals_point_outward_from_single_circle():
    # find a one-circle scene, then check the field far outside points away from its centre
    for seed in range(200):
        s = generate_sample(seed)
        if s.num_shapes == 1 and s.seg.max() == 1:
            break
    ys, xs = np.nonzero(s.sal)
    cy, cx = ys.mean(), xs.mean()
    yy, xx = np.mgrid[0:64, 0:64]
    away = np.stack([xx - cx, yy - cy])
    outside = (s.sal == 0) & (np.hypot(xx - cx, yy - cy) > 3)
    assert ((s.normals * away).sum(axis=0)[outside] > 0).mean() > 0.99


def test_collate_layout():
    images, targets = collate(make_dataset([1, 2, 3]), ["seg", "normals"])
    assert images.shape == (3, 3, 64, 64)
    assert targets["seg"].shape == (3, 64, 64)
    assert targets["normals"].shape == (3, 64, 64, 2)


def test_task_spec_direction_consistency():
    with pytest.raises(ValueError):
        TaskSpec("bad", 2, "miou", False)


# decoder

DEC_CFG = ModelConfig(stage_dims=(8, 16, 16, 32), heads=(1, 2, 2, 4), decoder_dim=8)


def features(cfg, batch=2, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    out = []
    for j, d in enumerate(cfg.stage_dims):
        side = cfg.stage_side(j)
        v = np.zeros((batch, side, side, d)) if zero else rng.standard_normal((batch, side, side, d))
        out.append(Tensor(v, dtype="f64"))
    return out


def test_decoder_shape():
    cfg = ModelConfig(decoder_dim=16)
    dec = Decoder(cfg, 4, seed=0)
    assert dec.predict(features(cfg)).shape == (2, 4, 64, 64)


def test_decoder_zero_features_zero_logits():
    dec = Decoder(DEC_CFG, 3, seed=0)
    assert not dec(features(DEC_CFG, zero=True)).data.any()


def test_decoder_needs_four_scales():
    with pytest.raises(ShapeError):
        Decoder(DEC_CFG, 3, seed=0)(features(DEC_CFG)[:3])


def test_decoder_gradients_reach_every_projection():
    dec = Decoder(DEC_CFG, 3, seed=0)
    grads = ad.backward(ad.mean(dec(features(DEC_CFG)) ** 2))
    for j in range(1, 5):
        assert np.abs(grads[f"decoder.proj{j}.w"]).sum() > 0


def test_decoder_passes_grad_check(f64):
    dec = Decoder(DEC_CFG, 2, seed=0)
    feats = features(DEC_CFG, batch=1)
    w = np.random.default_rng(1).standard_normal((1, 64, 64, 2))
    report = ad.grad_check(lambda: ad.mean(dec(feats) * Tensor(w)), dec.params, max_entries=6)
    assert report.passed, str(report)


def test_duplicated_tasks_share_decoder_init():
    assert task_seed(7, "sal") == task_seed(7, "sal") != task_seed(7, "seg")


# metrics


def test_perfect_prediction():
    t = np.random.default_rng(0).integers(0, 4, size=(5, 5))
    assert miou(confusion_matrix(t, t, 4)) == 1.0
    v = np.random.default_rng(0).standard_normal((5, 5, 2))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    assert angular_errors(v, v).max() < 1e-6


def test_complement_prediction_has_zero_iou():
    t = np.random.default_rng(1).integers(0, 2, size=(6, 6))
    assert miou(confusion_matrix(1 - t, t, 2)) == 0.0


def counting_oracle(pred, target, classes):
    ious = []
    for c in range(classes):
        inter = sum(1 for p, t in zip(pred.ravel(), target.ravel()) if p == c and t == c)
        union = sum(1 for p, t in zip(pred.ravel(), target.ravel()) if p == c or t == c)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def test_miou_matches_counting_oracle():
    rng = np.random.default_rng(2)
    for s in (3, 11, 19):
        target = generate_sample(s).seg
        pred = rng.integers(0, 4, size=target.shape)
        assert miou(confusion_matrix(pred, target, 4)) == pytest.approx(counting_oracle(pred, target, 4), abs=1e-12)


def test_angular_error_hand_values():
    pred = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 0.0]])
    target = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(angular_errors(pred, target), [0.0, 90.0, 180.0], atol=1e-6)


def test_delta_up_identity_and_zero_baseline():
    assert delta_up([0.5, 20.0], [0.5, 20.0], [True, False]) == 0.0
    with pytest.raises(ValueError):
        delta_up([1.0], [0.0], [True])


TABLE2_BASELINE = (67.21, 61.93, 62.35, 17.97)
TABLE2_DIRECTIONS = (True, True, True, False)


@pytest.mark.parametrize(
    "row,expected",
    [
        ((71.60, 60.67, 64.02, 16.41), 3.96),
        ((70.87, 59.54, 65.47, 17.47), 2.34),
        ((63.14, 52.37, 58.39, 20.89), -11.02),
    ],
    ids=["vmt", "polyhistor", "decoders-only"],
)
def test_delta_up_reproduces_printed_rows(row, expected):
    assert abs(delta_up(row, TABLE2_BASELINE, TABLE2_DIRECTIONS) - expected) <= 0.02


# losses and optimizer


def test_cross_entropy_matches_direct_formula(f64):
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 3, 3, 4))
    target = rng.integers(0, 4, size=(2, 3, 3))
    lse = np.log(np.exp(logits).sum(-1))
    picked = np.take_along_axis(logits, target[..., None], -1)[..., 0]
    assert cross_entropy(Tensor(logits), target).item() == pytest.approx((lse - picked).mean(), rel=1e-12)


def test_cosine_loss_zero_for_aligned_vectors(f64):
    v = np.random.default_rng(0).standard_normal((2, 4, 4, 2))
    unit = v / np.linalg.norm(v, axis=-1, keepdims=True)
    assert cosine_loss(Tensor(3 * unit), unit).item() == pytest.approx(0.0, abs=1e-6)
    assert cosine_loss(Tensor(-unit), unit).item() == pytest.approx(2.0, abs=1e-6)


def test_adam_zero_lr_leaves_parameters():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    Adam(p, lr=0.0).step({"w": np.ones(3)})
    np.testing.assert_array_equal(p["w"].data, 1.0)


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.zeros(3), requires_grad=True, dtype="f64")}
    Adam(p, lr=0.1).step({"w": np.array([2.0, -5.0, 1e-3])})
    np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_linear_lr_schedule():
    assert linear_lr(1.0, 0, 4) == 1.0 and linear_lr(1.0, 2, 4) == 0.5


def test_smoothed_window():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])


# training


def small_model(variant="vmt", tasks=("seg", "normals")):
    return MultiTaskModel(DEC_CFG.replace(variant=variant), tasks, seed=0)


def test_backbone_frozen_after_step():
    model = small_model()
    before = {k: v.copy() for k, v in model.encoder.state_dict().items()}
    images, targets = collate(make_dataset([0, 1]), model.tasks)
    multitask_step(model, images, targets, Adam(model.trainable(), lr=1e-2), 1e-2)
    after = model.encoder.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_decoders_only_step_leaves_bank_untouched():
    model = small_model()
    bank_before = {k: v.copy() for k, v in model.bank.state_dict().items()}
    dec_before = {k: p.data.copy() for k, p in model.decoder_params().items()}
    images, targets = collate(make_dataset([0, 1]), model.tasks)
    multitask_step(model, images, targets, Adam(model.decoder_params(), lr=1e-2), 1e-2)
    assert all(bank_before[k].tobytes() == v.tobytes() for k, v in model.bank.state_dict().items())
    assert any(not np.array_equal(dec_before[k], p.data) for k, p in model.decoder_params().items())


def test_zero_lr_step_reports_loss_and_changes_nothing():
    model = small_model()
    before = {k: p.data.copy() for k, p in model.trainable().items()}
    images, targets = collate(make_dataset([0, 1]), model.tasks)
    step = multitask_step(model, images, targets, Adam(model.trainable(), lr=0.0), 0.0)
    assert np.isfinite(step.total) and step.total == pytest.approx(sum(step.per_task))
    assert all(before[k].tobytes() == p.data.tobytes() for k, p in model.trainable().items())


def test_multiple_runs_encoder_once_per_task():
    model = small_model("multiple", ("seg", "sal", "normals"))
    model.forward(make_dataset([0])[0].image[None])
    assert model.encoder.body_calls == 3


def test_evaluate_bounds_and_empty_set():
    model = small_model(tasks=("seg", "normals"))
    seg, err = evaluate(model, make_dataset([5, 6]))
    assert 0 <= seg <= 1 and 0 <= err <= 180
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_training_is_deterministic(small_experiment):
    a, b = run_training(small_experiment), run_training(small_experiment)
    assert a.loss_history == b.loss_history and a.metrics == b.metrics
