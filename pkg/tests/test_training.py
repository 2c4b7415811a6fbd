import math

import numpy as np
import pytest

from relconv.models import ModelSpec, RelConvBlockConfig, set_block
from relconv.tasks import Dataset, make_relgames_dataset, make_vocab
from relconv.tensor import Tensor
from relconv.training import (
    Adam,
    DataShapeError,
    NumericalError,
    OptimConfig,
    config_hash,
    cross_entropy,
    evaluate,
    predictions,
    total_loss,
    train,
)


def adam_oracle(grads, p0, lr, b1, b2, eps, wd=0.0):
    p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t, g in enumerate(grads, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * math.sqrt(1 - b2 ** t) / (1 - b1 ** t) * m / (np.sqrt(v) + eps)
    return p


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_adam_matches_reference_updates(rng, wd):
    p = Tensor(rng.normal(size=(3,)), requires_grad=True)
    p0 = p.data.copy()
    grads = [rng.normal(size=3) for _ in range(5)]
    opt = Adam([("p", p)], lr=0.01, weight_decay=wd)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(p.data, adam_oracle(grads, p0, 0.01, 0.9, 0.999, 1e-7, wd), atol=1e-14)


def test_first_adam_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_adam_reports_the_bad_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([("block.weight", p)])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError, match="block.weight"):
        opt.step()


def test_cross_entropy_values():
    assert cross_entropy(np.zeros((4, 2)), [0, 1, 1, 0]).item() == pytest.approx(math.log(2))
    logits = np.array([[2.0, 0.0, -1.0]])
    want = -(2.0 - math.log(math.exp(2) + 1 + math.exp(-1)))
    assert cross_entropy(logits, [0]).item() == pytest.approx(want)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2)), [0])


def test_total_loss_cases():
    logits, y = np.array([[0.3, -0.2]]), [1]
    ce = cross_entropy(logits, y).item()
    uniform = np.full((1, 8, 3, 9), 1 / 9)
    onehot = np.zeros((1, 8, 3, 9)); onehot[..., 4] = 1.0
    assert total_loss(logits, y, [uniform], 0.0).item() == ce
    assert total_loss(logits, y, [onehot], 5.0).item() == ce
    assert total_loss(logits, y, [uniform], 1.0).item() == pytest.approx(ce + math.log(9), abs=1e-12)


def test_prediction_ties_go_to_class_zero():
    assert predictions(np.array([[0.5, 0.5], [0.1, 0.2]])).tolist() == [0, 1]


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(schedule="step")
    with pytest.raises(ValueError):
        OptimConfig(batch_size=0)
    with pytest.raises(ValueError):
        OptimConfig(beta1=1.0)


def test_config_hash_is_stable():
    assert config_hash({"b": 1, "a": [1, 2]}) == config_hash({"a": [1, 2], "b": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def _tiny_data(n=200, task="same", seed=0):
    v = make_vocab("pentominoes", size=8, dim=6)
    return {part: make_relgames_dataset(task, v, n if part == "train" else 100, seed + k)
            for k, part in enumerate(("train", "val", "test"))}


def _tiny_spec():
    return ModelSpec("relconvnet", 9, 6, hidden=[16],
                     blocks=[RelConvBlockConfig(d_r=4, d_proj=4, s=2, n_f=4)])


def test_training_learns_same_task():
    _, report = train(_tiny_spec(), _tiny_data(600), OptimConfig(epochs=15, batch_size=32, lr=3e-3), seed=0)
    assert report.test_acc > 0.85
    assert report.epochs[-1]["train_loss"] < report.epochs[0]["train_loss"]


def test_training_is_deterministic():
    data = _tiny_data(100)
    cfg = OptimConfig(epochs=2, batch_size=32)
    _, a = train(_tiny_spec(), data, cfg, seed=3)
    _, b = train(_tiny_spec(), data, cfg, seed=3)
    _, c = train(_tiny_spec(), data, cfg, seed=4)
    assert a.to_dict(with_timing=False) == b.to_dict(with_timing=False)
    assert a.epochs != c.epochs


def test_best_epoch_parameters_are_restored():
    data = _tiny_data(100)
    model, report = train(_tiny_spec(), data, OptimConfig(epochs=4, batch_size=32), seed=1)
    best = max(report.epochs, key=lambda r: r["val_acc"])
    assert report.best_epoch == min(r["epoch"] for r in report.epochs if r["val_acc"] == best["val_acc"])
    assert evaluate(model, data["val"])[0] == best["val_acc"]


def test_patience_stops_early():
    data = _tiny_data(50)
    _, report = train(_tiny_spec(), data, OptimConfig(epochs=50, batch_size=50, lr=0.0, patience=2), seed=0)
    assert len(report.epochs) == 3 and report.best_epoch == 0


def test_entropy_is_logged_for_attention_models():
    spec = ModelSpec("relconvnet", 9, 6, hidden=[8],
                     blocks=[RelConvBlockConfig(d_r=2, d_proj=2, s=2, n_f=2, grouping="attention", n_g=2)])
    _, report = train(spec, _tiny_data(64), OptimConfig(epochs=2, batch_size=32, entropy_coef=1.0), seed=0)
    assert 0 < report.entropy_initial <= math.log(9) + 1e-12
    assert all(r["entropy"] is not None for r in report.epochs)
    _, plain = train(_tiny_spec(), _tiny_data(64), OptimConfig(epochs=1), seed=0)
    assert plain.entropy_initial is None and plain.epochs[0]["entropy"] is None


def test_cosine_schedule_decays_to_zero():
    _, report = train(_tiny_spec(), _tiny_data(64), OptimConfig(epochs=3, batch_size=32, schedule="cosine"), seed=0)
    lrs = [r["lr"] for r in report.epochs]
    assert lrs == sorted(lrs, reverse=True) and lrs[-1] < 1e-3 * 0.1


def test_shape_mismatch_is_rejected():
    data = _tiny_data(20)
    bad = ModelSpec("relconvnet", 5, 12, blocks=[set_block()])
    with pytest.raises(DataShapeError):
        train(bad, data, OptimConfig(epochs=1), seed=0)
    data["train"] = Dataset(data["train"].X, data["train"].y + 2)
    with pytest.raises(DataShapeError):
        train(_tiny_spec(), data, OptimConfig(epochs=1), seed=0)
    with pytest.raises(ValueError):
        train(_tiny_spec(), {"train": data["val"]}, OptimConfig(epochs=1), seed=0)


def test_non_finite_input_aborts():
    data = _tiny_data(20)
    data["train"].X[0, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="train data"):
        train(_tiny_spec(), data, OptimConfig(epochs=1, batch_size=32), seed=0)
