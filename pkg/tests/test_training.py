import math
import threading
import time

import numpy as np
import pytest

from resmlp import tensor as T
from resmlp.errors import ConfigurationError, DataError, NonFiniteError
from resmlp.training import (SGD, AdamW, ArrayDataset, TrainConfig, augment_batch, cross_entropy, evaluate,
                             fit, hard_distill_loss, iterate_batches, lr_at, prefetch,
                             smoothed_entropy_floor)
from resmlp.vision import VisionModel

from gradcheck import numeric_grad
from helpers import tiny_config


# ---------------------------------------------------------------- losses

def test_cross_entropy_example():
    assert abs(cross_entropy(T.tensor([[1.0, 2.0, 3.0]], dtype=np.float64), [2]).item() - 0.40761) < 1e-5
    exact = math.log(1 + math.exp(-1) + math.exp(-2))
    assert abs(cross_entropy(T.tensor([[1.0, 2.0, 3.0]], dtype=np.float64), [2]).item() - exact) < 1e-15


def test_cross_entropy_uniform_logits_is_log_k(rng):
    k = 7
    logits = T.tensor(np.full((4, k), rng.normal()), dtype=np.float64)
    assert abs(cross_entropy(logits, [0, 3, 6, 1]).item() - math.log(k)) < 1e-14


def test_label_smoothing_oracle():
    z = np.array([[0.5, -1.0, 2.0, 0.0]])
    s, k = 0.1, 4
    lp = z - np.log(np.exp(z).sum())
    q = np.full(k, s / k)
    q[2] += 1 - s
    assert abs(cross_entropy(T.tensor(z, dtype=np.float64), [2], s).item() + (q * lp).sum()) < 1e-14


def test_smoothed_entropy_floor_is_attained():
    k, s = 10, 0.1
    q = np.full(k, s / k)
    q[0] += 1 - s
    logits = T.tensor(np.log(q)[None], dtype=np.float64)
    assert abs(cross_entropy(logits, [0], s).item() - smoothed_entropy_floor(k, s)) < 1e-12
    assert smoothed_entropy_floor(k, 0.0) == 0.0


def test_cross_entropy_mask_ignores_rows(rng):
    z = rng.normal(size=(2, 3, 5))
    y = np.array([[1, 2, 0], [4, 0, 0]])
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    got = cross_entropy(T.tensor(z, dtype=np.float64), y, mask=mask).item()
    rows = [(0, 0), (0, 1), (1, 0)]
    want = np.mean([-(z[i, j] - np.log(np.exp(z[i, j]).sum()))[y[i, j]] for i, j in rows])
    assert abs(got - want) < 1e-14


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        cross_entropy(T.tensor([[1.0, 2.0]]), [2])
    with pytest.raises(DataError):
        cross_entropy(T.tensor([[1.0, 2.0]]), [-1])


def test_cross_entropy_gradcheck(rng):
    z, y = rng.normal(size=(3, 4)), np.array([0, 3, 1])
    p = T.parameter(z)
    with T.GradientTape() as tape:
        loss = cross_entropy(p, y, 0.2)
    tape.backward(loss)
    num = numeric_grad(lambda a: cross_entropy(T.tensor(a[0], dtype=np.float64), y, 0.2).item(), [z], 0)
    np.testing.assert_allclose(p.grad, num, rtol=1e-6, atol=1e-9)


def test_hard_distill_loss(rng):
    z = T.tensor(rng.normal(size=(4, 5)), dtype=np.float64)
    y = np.array([0, 1, 2, 3])
    teacher = np.eye(5)[[4, 1, 0, 3]] * 3.0
    got = hard_distill_loss(z, y, teacher).item()
    want = 0.5 * cross_entropy(z, y).item() + 0.5 * cross_entropy(z, [4, 1, 0, 3]).item()
    assert abs(got - want) < 1e-14
    agree = np.eye(5)[y]
    assert abs(hard_distill_loss(z, y, agree).item() - cross_entropy(z, y).item()) < 1e-14


# ---------------------------------------------------------------- optimisers

def _step(opt, name, p, grad, lr=None):
    p.grad = np.asarray(grad, dtype=p.dtype)
    opt.step([(name, p)], lr)


def test_adamw_two_steps_closed_form():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.05
    w0 = np.array([[1.0, -2.0]])
    g1, g2 = np.array([[0.5, 0.1]]), np.array([[-0.2, 0.3]])
    p = T.parameter(w0)
    opt = AdamW(lr, b1, b2, eps, wd)
    _step(opt, "w", p, g1)
    _step(opt, "w", p, g2)
    # hand-unrolled reference
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    w1 = w0 * (1 - lr * wd) - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    w2 = w1 * (1 - lr * wd) - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(p.data, w2, rtol=0, atol=1e-15)
    # first AdamW step moves every coordinate by about lr
    np.testing.assert_allclose(np.abs(w1 - w0 * (1 - lr * wd)), lr, rtol=1e-6)


def test_adamw_skips_decay_on_vectors():
    p = T.parameter(np.array([1.0, 1.0]))
    _step(AdamW(0.1, weight_decay=0.5), "bias", p, [0.0, 0.0])
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


def test_sgd_momentum_closed_form():
    p = T.parameter(np.array([[1.0]]))
    opt = SGD(0.1, momentum=0.9, weight_decay=0.0)
    _step(opt, "w", p, [[1.0]])
    _step(opt, "w", p, [[1.0]])
    assert abs(p.item() - (1.0 - 0.1 * 1.0 - 0.1 * 1.9)) < 1e-15


def test_non_finite_gradient_names_layer():
    p = T.parameter(np.ones((2, 2)))
    with pytest.raises(NonFiniteError, match="blocks.3.fc1.weight"):
        _step(AdamW(0.1), "blocks.3.fc1.weight", p, [[np.nan, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(p.data, np.ones((2, 2)))


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, warmup_steps=4, schedule="cosine")
    assert [lr_at(s, 20, cfg, 5) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert lr_at(4, 20, cfg, 5) == 1.0
    assert abs(lr_at(12, 20, cfg, 5) - 0.5) < 1e-12
    assert lr_at(19, 20, cfg, 5) > 0
    step = TrainConfig(lr=1.0, warmup_epochs=0, schedule="step")
    assert [lr_at(s, 9, step, 3) for s in (0, 3, 6, 8)] == [1.0, 0.1, pytest.approx(0.01), pytest.approx(0.01)]
    assert lr_at(7, 10, TrainConfig(lr=0.3, warmup_epochs=0, schedule="constant"), 2) == 0.3


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="lamb")
    with pytest.raises(ConfigurationError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1})
    cfg = TrainConfig(lr=0.01, mode="hard_distill")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- data plumbing

def test_prefetch_preserves_order_and_bounds_queue():
    produced = []

    def gen():
        for i in range(20):
            produced.append(i)
            yield i

    it = prefetch(gen(), capacity=2)
    first = next(it)
    time.sleep(0.05)
    # one item handed out, at most two queued and one blocked in put()
    assert first == 0 and len(produced) <= 4
    assert [first, *it] == list(range(20))


def test_prefetch_reraises_worker_errors():
    def gen():
        yield 1
        raise DataError("bad record")

    with pytest.raises(DataError):
        list(prefetch(gen()))


def test_prefetch_worker_exits_on_early_stop():
    before = threading.active_count()
    it = prefetch(iter(range(1000)), capacity=2)
    next(it)
    it.close()
    time.sleep(0.1)
    assert threading.active_count() <= before


def test_batches_are_seeded(rng):
    data = ArrayDataset(rng.normal(size=(10, 3, 4, 4)).astype(np.float32), np.arange(10) % 3, 3)
    a = [y.tolist() for _, y in iterate_batches(data, 4, np.random.default_rng(1), augment=True)]
    b = [y.tolist() for _, y in iterate_batches(data, 4, np.random.default_rng(1), augment=True)]
    assert a == b and sorted(sum(a, [])) == sorted(data.labels.tolist())
    assert [len(y) for y in a] == [4, 4, 2]


def test_augment_flip_and_crop(rng):
    x = rng.normal(size=(6, 2, 5, 5))
    out = augment_batch(x, np.random.default_rng(0), pad=0)
    for i in range(6):
        assert np.array_equal(out[i], x[i]) or np.array_equal(out[i], x[i][..., ::-1])
    padded = augment_batch(x, np.random.default_rng(0), pad=2)
    assert padded.shape == x.shape


# ---------------------------------------------------------------- loops

def _blobs(n, cfg, seed):
    """Linearly separable synthetic images: class k has a bright k-th channel-quadrant."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size=n)
    x = 0.3 * rng.standard_normal((n, cfg.channels, cfg.image_size, cfg.image_size))
    x[np.arange(n), y] += 1.0
    return ArrayDataset(x.astype(cfg.np_dtype), y, 3)


FAST = dict(lr=3e-3, epochs=3, batch_size=16, warmup_epochs=0.5, label_smoothing=0.0, weight_decay=0.0,
            augment=False, prefetch=True)


def test_fit_learns_and_writes_artifacts(tmp_path):
    cfg = tiny_config(dim=8, depth=1, num_classes=3, dtype="float32")
    train, test = _blobs(96, cfg, 0), _blobs(48, cfg, 1)
    model = VisionModel.create(cfg)
    seen = []
    tcfg = TrainConfig(**{**FAST, "lr": 1e-2, "epochs": 8})
    report = fit(model, train, tcfg, test, out_dir=tmp_path, on_epoch=seen.append)
    assert len(seen) == 8 and report.losses[-1] < report.losses[0]
    assert evaluate(model, test) >= 0.9
    for name in ("best.rmlp", "final.rmlp", "report.csv", "train.log"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "report.csv").read_text().splitlines()[0] == "epoch,loss,acc,seconds"


def test_fit_is_deterministic(tmp_path):
    cfg = tiny_config(dim=8, depth=1, num_classes=3, dtype="float32")
    train = _blobs(64, cfg, 0)
    runs = []
    for i in range(2):
        model = VisionModel.create(cfg, seed=0)
        rep = fit(model, train, TrainConfig(**{**FAST, "epochs": 2, "augment": True}), out_dir=tmp_path / str(i))
        runs.append((rep.losses, (tmp_path / str(i) / "final.rmlp").read_bytes()))
    assert runs[0] == runs[1]


def test_fit_rejects_mismatched_data():
    cfg = tiny_config(dim=8, depth=1, num_classes=3)
    wrong = ArrayDataset(np.zeros((4, 3, 4, 4)), np.zeros(4, dtype=int), 3)
    with pytest.raises(ConfigurationError):
        fit(VisionModel.create(cfg), wrong, TrainConfig(**FAST))
    too_many = ArrayDataset(np.zeros((4, 3, 8, 8)), np.array([0, 1, 2, 7]), 8)
    with pytest.raises(ConfigurationError):
        fit(VisionModel.create(cfg), too_many, TrainConfig(**FAST))


def test_fit_aborts_on_nan_loss():
    cfg = tiny_config(dim=8, depth=1, num_classes=3)
    data = _blobs(16, cfg, 0)
    data.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        fit(VisionModel.create(cfg), data, TrainConfig(**FAST))


def test_distillation_needs_teacher_and_runs():
    cfg = tiny_config(dim=8, depth=1, num_classes=3, dtype="float32")
    train = _blobs(32, cfg, 0)
    tcfg = TrainConfig(**{**FAST, "epochs": 1, "mode": "hard_distill"})
    with pytest.raises(ConfigurationError):
        fit(VisionModel.create(cfg), train, tcfg)
    teacher = VisionModel.create(tiny_config(dim=8, depth=2, num_classes=3, dtype="float32"), seed=1)
    rep = fit(VisionModel.create(cfg), train, tcfg, teacher=teacher)
    assert math.isfinite(rep.losses[0])
