import math

import numpy as np
import pytest

from mecasa import tensor as T
from mecasa.backbone import BackboneConfig, MecasaNet
from mecasa.data import EpochDataset, build_epoch_dataset, fold_arrays, stratified_holdout
from mecasa.synth import synth_hybrid_dataset
from mecasa.tensor import Tensor
from mecasa.train import (
    Adam,
    DivergenceError,
    MetricsReport,
    NonFiniteGradientError,
    OptimizerState,
    TrainConfig,
    TrainingAborted,
    adam_step,
    confidence_interval,
    confusion_matrix,
    cross_validate,
    train_model,
)


class Logistic:
    """Two-class linear model over flattened inputs."""

    def __init__(self, d, scale=0.0, seed=0):
        rng = np.random.default_rng(seed)
        self.w = Tensor(scale * rng.standard_normal((2, d)), requires_grad=True)
        self.b = Tensor(np.zeros(2), requires_grad=True)

    def named_parameters(self):
        return [("w", self.w), ("b", self.b)]

    def logits(self, x):
        x = np.asarray(x)
        return T.linear(Tensor(x.reshape(len(x), -1)), self.w, self.b)


def blobs(rng, n=200, d=5, shift=2.0):
    y = rng.permutation(np.tile([0, 1], n // 2))
    x = rng.standard_normal((n, d))
    x[:, 0] += np.where(y == 1, shift, -shift)
    return x, y


def scalar(v):
    return Tensor(np.array([v], dtype=float), requires_grad=True)


# -- Adam -----------------------------------------------------------------------


def test_first_step_is_minus_lr():
    p = scalar(0.3)
    state = OptimizerState(lr=1e-3)
    adam_step([("p", p)], [np.ones(1)], state)
    assert p.data[0] - 0.3 == pytest.approx(-1e-3, abs=1e-6)
    assert state.t == 1


def test_zero_gradient_leaves_parameters():
    p = scalar(0.3)
    state = OptimizerState()
    for _ in range(3):
        adam_step([("p", p)], [np.zeros(1)], state)
    assert p.data[0] == 0.3 and state.t == 3


def test_first_step_moves_against_gradient(rng):
    p = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    g = rng.standard_normal((4, 5))
    before = p.data.copy()
    adam_step([("p", p)], [g], OptimizerState())
    assert np.array_equal(np.sign(p.data - before), -np.sign(g))


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_gradient_aborts_untouched(bad):
    a, b = scalar(1.0), scalar(2.0)
    state = OptimizerState()
    with pytest.raises(NonFiniteGradientError, match="'stage.b'") as exc:
        adam_step([("stage.a", a), ("stage.b", b)], [np.ones(1), np.array([bad])], state)
    assert exc.value.name == "stage.b" and isinstance(exc.value, TrainingAborted)
    assert a.data[0] == 1.0 and state.t == 0 and not state.m


def test_gradient_shape_mismatch():
    with pytest.raises(T.ShapeError):
        adam_step([("p", scalar(1.0))], [np.ones(2)], OptimizerState())


def test_matches_reference_recurrence(rng):
    p = Tensor(rng.standard_normal(3), requires_grad=True)
    theta, m, v = p.data.copy(), np.zeros(3), np.zeros(3)
    state = OptimizerState(lr=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        adam_step([("p", p)], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, theta, rtol=1e-14)


def test_state_tracks_full_model_shapes(rng):
    net = MecasaNet(BackboneConfig(21, 128, (8, 16), (1, 1)), seed=0)
    opt = Adam(net.named_parameters())
    loss = T.cross_entropy_loss(net.logits(rng.standard_normal((2, 1, 21, 128))), np.array([0, 1]))
    T.backward(loss)
    opt.step()
    for name, p in net.named_parameters():
        assert opt.state.m[name].shape == p.shape and np.all(opt.state.v[name] >= 0)


# -- training loop --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    assert TrainConfig().to_dict() == {"epochs": 100, "batch_size": 16, "lr": 1e-4, "seed": 0, "shuffle": True, "log_every": 1}


def test_zero_learning_rate_freezes_everything(rng):
    x, y = blobs(rng)
    model = Logistic(5, scale=0.5)
    w0 = model.w.data.copy()
    res = train_model(model, (x, y), cfg=TrainConfig(epochs=4, lr=0.0))
    assert np.array_equal(model.w.data, w0)
    losses = [h["train_loss"] for h in res.history]
    assert max(losses) - min(losses) < 1e-12


def test_first_epoch_loss_near_chance(rng):
    x, y = blobs(rng)
    res = train_model(Logistic(5, scale=1e-3), (x, y), cfg=TrainConfig(epochs=1))
    assert res.history[0]["train_loss"] <= math.log(2) + 0.1


def test_divergence_reports_epoch(rng):
    x, y = blobs(rng, n=40)
    x[17, 2] = np.nan
    with pytest.raises(DivergenceError) as exc:
        train_model(Logistic(5), (x, y), cfg=TrainConfig(epochs=3, shuffle=False))
    assert exc.value.epoch == 1


def test_best_validation_parameters_are_restored(rng):
    x, y = blobs(rng, n=200, shift=3.0)
    model = Logistic(5)
    seen = []

    def snapshot(rec):
        seen.append((rec["val_acc"], model.w.data.copy()))

    res = train_model(model, (x[:100], y[:100]), (x[100:], y[100:]), TrainConfig(epochs=5, lr=0.05, seed=1), on_epoch=snapshot)
    best = max(range(len(seen)), key=lambda i: (seen[i][0], -i))
    assert res.best_epoch == best + 1 and res.best_val_acc == seen[best][0]
    np.testing.assert_array_equal(model.w.data, seen[best][1])


def test_training_is_reproducible(rng):
    x, y = blobs(rng)
    a, b = Logistic(5, 0.1, seed=3), Logistic(5, 0.1, seed=3)
    for m in (a, b):
        train_model(m, (x, y), cfg=TrainConfig(epochs=3, lr=0.01, seed=7))
    assert a.w.data.tobytes() == b.w.data.tobytes()


def test_empty_training_split():
    with pytest.raises(ValueError, match="empty"):
        train_model(Logistic(2), (np.zeros((0, 2)), np.zeros(0, dtype=int)))


@pytest.fixture(scope="module")
def eeg_small():
    return build_epoch_dataset(synth_hybrid_dataset(10, seed=0).eeg, "eeg")


def test_backbone_loss_decreases_over_seeds(eeg_small):
    arrays, _ = fold_arrays(eeg_small, stratified_holdout(eeg_small.labels, seed=0))
    improved = 0
    for seed in range(5):
        net = MecasaNet(BackboneConfig(21, 128, (16, 32)), seed=seed)
        hist = train_model(net, arrays["train"], cfg=TrainConfig(epochs=10, seed=seed, log_every=0)).history
        improved += hist[9]["train_loss"] < hist[0]["train_loss"]
    assert improved >= 4


def test_backbone_learns_synthetic_eeg():
    ds = build_epoch_dataset(synth_hybrid_dataset(40, seed=0).eeg, "eeg")
    arrays, _ = fold_arrays(ds, stratified_holdout(ds.labels, seed=0))
    net = MecasaNet(BackboneConfig(21, 128, (16, 32)), seed=0)
    res = train_model(net, arrays["train"], arrays["val"], TrainConfig(epochs=10, seed=0, log_every=0))
    assert res.best_val_acc >= 0.90


# -- reporting ------------------------------------------------------------------


def test_confidence_interval_examples():
    assert confidence_interval([0.5, 0.5]) == (0.5, 0.0)
    mean, hw = confidence_interval([0.0, 1.0])
    assert mean == 0.5 and hw == pytest.approx(1.96 * math.sqrt(0.5) / math.sqrt(2)) and round(hw, 3) == 0.980
    mean, hw = confidence_interval([0.7, 0.8, 0.9])
    assert mean == pytest.approx(0.8) and hw == pytest.approx(1.96 * 0.1 / math.sqrt(3))
    assert confidence_interval([0.8] * 5) == pytest.approx((0.8, 0.0))


def test_confidence_interval_scales_linearly(rng):
    a = rng.uniform(0, 1, 6)
    m1, h1 = confidence_interval(a)
    m2, h2 = confidence_interval(100 * a)
    assert m2 == pytest.approx(100 * m1) and h2 == pytest.approx(100 * h1)


def test_confidence_interval_needs_two():
    with pytest.raises(ValueError):
        confidence_interval([0.9])


def test_confusion_matrix():
    assert confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0]).tolist() == [[1, 1], [1, 2]]


def test_report_excludes_runtime_by_default():
    r = MetricsReport.from_folds([0.7, 0.8, 0.9], np.eye(2), runtime_s=3.2, extra={"modality": "eeg"})
    assert "runtime_s" not in r.to_dict() and r.to_dict(include_runtime=True)["runtime_s"] == 3.2
    assert r.to_dict()["modality"] == "eeg"
    assert r.summary() == f"80.00 ± {100 * 1.96 * 0.1 / math.sqrt(3):.2f}"


def test_cross_validation_covers_every_epoch(rng):
    x, y = blobs(rng, n=100, d=3)
    ds = EpochDataset(x.reshape(100, 1, 1, 3), y, np.zeros((100, 3)), "toy")
    tested = []
    report = cross_validate(
        lambda i: Logistic(3, seed=i), ds, k=5, cfg=TrainConfig(epochs=2, lr=0.05),
        on_fold=lambda i, m, parts, stats, acc: tested.append(parts["test"]),
    )
    assert len(report.fold_accuracies) == 5 and all(0 <= a <= 1 for a in report.fold_accuracies)
    assert np.array_equal(np.sort(np.concatenate(tested)), np.arange(100))
    assert int(np.sum(report.confusion)) == 100
    assert report.ci_half_width >= 0


def test_cross_validation_is_reproducible(rng):
    x, y = blobs(rng, n=60, d=3)
    ds = EpochDataset(x.reshape(60, 1, 1, 3), y, np.zeros((60, 3)), "toy")
    run = lambda: cross_validate(lambda i: Logistic(3, 0.1, seed=i), ds, k=3, cfg=TrainConfig(epochs=2, lr=0.05), seed=2)
    assert run().to_dict() == run().to_dict()
