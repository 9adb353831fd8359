import math

import numpy as np
import pytest

from msq.partition import RowPartition, partition_layer
from msq.quantizers import SP2, ActQuant, FixedPoint, build_levels, project
from msq.tensor import Rng, ShapeError, make_synthetic
from msq.train import (
    AdmmState,
    Dense,
    MlpModel,
    TrainConfig,
    TrainingError,
    admm_step,
    backward_ste,
    forward,
    project_layers,
    softmax_xent,
    total_loss,
    train,
)


def small_model(seed=0, sizes=(3, 5, 2)):
    return MlpModel.init(list(sizes), Rng(seed))


def test_zero_weights_uniform_loss():
    model = small_model()
    for layer in model.layers:
        layer.W[:] = 0
    x = Rng(1).normal(size=(7, 3))
    assert total_loss(model, x, np.zeros(7, dtype=int)) == pytest.approx(math.log(2), abs=1e-15)
    m4 = MlpModel([Dense(np.zeros((4, 3)), np.zeros(4), relu=False)])
    assert total_loss(m4, x, np.arange(7) % 4) == pytest.approx(math.log(4), abs=1e-15)


def test_no_act_quant_is_plain_forward():
    model = small_model(2)
    x = Rng(3).normal(size=(4, 3))
    a, _ = forward(model, x, None)
    b, _ = forward(model, x, [None, None])
    h = np.maximum(x @ model.layers[0].W.T + model.layers[0].b, 0)
    ref = h @ model.layers[1].W.T + model.layers[1].b
    assert np.array_equal(a, ref) and np.array_equal(b, ref)


def test_hand_worked_forward():
    model = MlpModel([Dense(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -1.0]), relu=False)])
    logits, _ = forward(model, np.array([[1.0, -1.0], [0.5, 0.25]]))
    assert logits.tolist() == [[-0.5, -2.0], [1.5, 1.5]]


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(small_model(), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        MlpModel([Dense(np.ones((4, 3)), np.zeros(4)), Dense(np.ones((2, 5)), np.zeros(2))])


def numeric_grads(model, x, y, state=None, eps=1e-6):
    grads = []
    for layer in model.layers:
        gW = np.zeros_like(layer.W)
        for idx in np.ndindex(layer.W.shape):
            old = layer.W[idx]
            layer.W[idx] = old + eps
            up = total_loss(model, x, y, state=state)
            layer.W[idx] = old - eps
            down = total_loss(model, x, y, state=state)
            layer.W[idx] = old
            gW[idx] = (up - down) / (2 * eps)
        gb = np.zeros_like(layer.b)
        for i in range(layer.b.size):
            old = layer.b[i]
            layer.b[i] = old + eps
            up = total_loss(model, x, y, state=state)
            layer.b[i] = old - eps
            down = total_loss(model, x, y, state=state)
            layer.b[i] = old
            gb[i] = (up - down) / (2 * eps)
        grads.append((gW, gb))
    return grads


def max_rel_error(model, x, y, state=None):
    _, cache = forward(model, x)
    analytic = backward_ste(model, cache, y, state)
    worst = 0.0
    for g, (nW, nb) in zip(analytic, numeric_grads(model, x, y, state)):
        for a, n in ((g.W, nW), (g.b, nb)):
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)
            worst = max(worst, float(err.max()))
    return worst


def test_gradient_check():
    model = small_model(4, (4, 6, 3))
    x = Rng(5).normal(size=(10, 4))
    y = Rng(6).integers(0, 3, size=10)
    assert max_rel_error(model, x, y) < 1e-4


def test_gradient_check_with_penalty():
    model = small_model(7, (4, 6, 3))
    rng = Rng(8)
    state = AdmmState([rng.normal(size=l.W.shape) for l in model.layers],
                      [0.1 * rng.normal(size=l.W.shape) for l in model.layers])
    x = rng.normal(size=(10, 4))
    y = rng.integers(0, 3, size=10)
    assert max_rel_error(model, x, y, state) < 1e-4


def test_ste_mask():
    w2 = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]])
    model = MlpModel([Dense(np.eye(3), np.zeros(3), relu=True), Dense(w2, np.zeros(2), relu=False)])
    x = np.array([[0.5, 2.0, -1.0]])  # inside, above alpha, clamped to 0 by ReLU
    aq = [None, ActQuant(4, 1.0)]
    _, cache = forward(model, x, aq)
    assert cache[1]["mask"].tolist() == [[True, False, True]]
    assert ((cache[1]["x"] < 0) | (cache[1]["x"] > 1.0))[~cache[1]["mask"]].all()
    logits, _ = forward(model, x, aq)
    _, dlogits = softmax_xent(logits, np.array([0]))
    upstream = dlogits @ w2  # gradient w.r.t. the quantized activations
    grads = backward_ste(model, cache, np.array([0]))
    # identity inside the clip range, zero outside; ReLU then gates the first layer
    expected = upstream * np.array([[1.0, 0.0, 1.0]]) * np.array([[1.0, 1.0, 0.0]])
    np.testing.assert_allclose(grads[0].b, expected[0], rtol=1e-15, atol=0)
    assert upstream[0, 1] != 0.0


def levels_for(model, pr=0.5, alpha=1.0):
    parts = [partition_layer(W, pr) for W in model.weights]
    sets = [(build_levels(FixedPoint(4), alpha), build_levels(SP2(2, 1), alpha)) for _ in parts]
    return parts, sets


def test_admm_fixed_point():
    model = small_model(9)
    parts, sets = levels_for(model)
    for W, part, (fl, sl) in zip(model.weights, parts, sets):
        W[~part.is_sp2] = project(W[~part.is_sp2], fl)
        W[part.is_sp2] = project(W[part.is_sp2], sl)
    state = admm_step(model, AdmmState.init(model), parts, sets)
    for W, Z, U in zip(model.weights, state.Z, state.U):
        assert np.array_equal(Z, W) and not U.any()
    assert state.epoch == 1


def test_admm_first_step():
    model = small_model(10)
    parts, sets = levels_for(model)
    state = admm_step(model, AdmmState.init(model), parts, sets)
    for W, Z, U, part, (fl, sl) in zip(model.weights, state.Z, state.U, parts, sets):
        for r in range(W.shape[0]):
            assert np.array_equal(Z[r], project(W[r], sl if part.is_sp2[r] else fl))
        assert np.array_equal(U, W - Z)


def test_admm_dual_bounded_and_running_mean():
    # With W frozen, U acts like the error of a sigma-delta modulator: it stays within
    # half the widest level gap, and the running mean of Z converges to W.
    W = Rng(11).uniform(-0.8, 0.8, size=(4, 4))
    model = MlpModel([Dense(W, np.zeros(4), relu=False)])
    part = RowPartition(np.array([True, False, True, False]), math.nan, 0.5)
    sets = [(build_levels(FixedPoint(4), 1.0), build_levels(SP2(2, 1), 1.0))]
    state = AdmmState.init(model)
    z_sum = np.zeros_like(W)
    for t in range(1, 51):
        state = admm_step(model, state, [part], sets)
        z_sum += state.Z[0]
        assert np.abs(state.U[0]).max() <= 0.125 + 1e-12
        assert state.penalty(model) <= 0.5 * W.size * (3 * 0.125) ** 2
    np.testing.assert_allclose(z_sum / 50, W - state.U[0] / 50, atol=1e-12)
    assert np.abs(z_sum / 50 - W).max() <= 0.125 / 50 + 1e-12


def test_project_layers_uses_row_schemes():
    W = np.array([[0.3, -0.9], [0.3, -0.9]])
    part = RowPartition(np.array([False, True]), math.nan, 0.5)
    sets = [(build_levels(FixedPoint(4), 1.0), build_levels(SP2(2, 1), 1.0))]
    Z = project_layers([W], [part], sets)[0]
    assert Z[0].tolist() == pytest.approx([2 / 7, -6 / 7])
    assert Z[1].tolist() == [0.25, -1.0]  # -0.9 is nearer 1 than 3/4


def plain_sgd(model, data, cfg):
    """Independent minibatch SGD with hand-written backprop."""
    model = model.copy()
    rng = Rng(cfg.seed)
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            acts = [x]
            for l in model.layers:
                z = acts[-1] @ l.W.T + l.b
                acts.append(np.maximum(z, 0) if l.relu else z)
            p = np.exp(acts[-1] - acts[-1].max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1
            delta = p / len(y)
            for i in reversed(range(len(model.layers))):
                l = model.layers[i]
                if l.relu:
                    delta = delta * (acts[i + 1] > 0)
                gW, gb = delta.T @ acts[i], delta.sum(axis=0)
                delta = delta @ l.W
                l.W -= cfg.lr * gW
                l.b -= cfg.lr * gb
    return model


def test_unquantized_training_is_plain_sgd():
    data = make_synthetic(3, 100, Rng(12), n_features=4)
    model = small_model(13, (4, 6, 3))
    cfg = TrainConfig(epochs=3, batch_size=16, lr=0.1, quantize=False, seed=14)
    result = train(model, data, cfg, baseline=False)
    ref = plain_sgd(model, data, cfg)
    for a, b in zip(result.model.layers, ref.layers):
        np.testing.assert_allclose(a.W, b.W, rtol=0, atol=1e-13)
        np.testing.assert_allclose(a.b, b.b, rtol=0, atol=1e-13)


@pytest.fixture(scope="module")
def trained():
    train_set, test_set = make_synthetic(2, 600, Rng(15)).split(400)
    model = MlpModel.init([8, 16, 2], Rng(16))
    return train(model, train_set, TrainConfig(epochs=8, seed=17), eval_data=test_set)


def test_returned_weights_are_levels(trained):
    for layer, ql, part in zip(trained.model.layers, trained.layers, trained.partitions):
        fl, sl = ql.level_sets()
        for r in range(layer.W.shape[0]):
            allowed = set((sl if part.is_sp2[r] else fl).levels.tolist())
            assert set(layer.W[r].tolist()) <= allowed
        assert np.array_equal(ql.values(), layer.W)


def test_penalty_zero_after_projection(trained):
    assert trained.state.penalty(trained.model) == 0.0


def test_history_and_accuracy(trained):
    assert [m.epoch for m in trained.history] == list(range(8))
    assert trained.float_accuracy is not None
    assert trained.quant_accuracy >= trained.float_accuracy - 0.05
    assert trained.act_quants[0] is None and trained.act_quants[1].bits == 4


def test_partition_fraction(trained):
    for part in trained.partitions:
        assert abs(part.sp2_rows.size / len(part) - 2 / 3) <= 1 / len(part)


def test_training_deterministic():
    data = make_synthetic(2, 200, Rng(18))
    cfg = TrainConfig(epochs=3, seed=19)
    a = train(small_model(20, (8, 6, 2)), data, cfg, baseline=False)
    b = train(small_model(20, (8, 6, 2)), data, cfg, baseline=False)
    assert a.history == b.history
    assert all(np.array_equal(x.codes, y.codes) for x, y in zip(a.layers, b.layers))


def test_divergence_raises():
    data = make_synthetic(2, 100, Rng(21))
    with pytest.raises(TrainingError) as info:
        train(small_model(22, (8, 6, 2)), data, TrainConfig(epochs=3, lr=1e30), baseline=False)
    assert 0 <= info.value.epoch < 3


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"pr_sp2": 1.5}, {"lr": 0.0}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_roundtrip():
    cfg = TrainConfig(epochs=5, pr_sp2=0.6)
    assert TrainConfig.from_dict({**cfg.to_dict(), "unrelated": 1}) == cfg


def test_softmax_xent_gradient_rows_sum_to_zero():
    logits = Rng(23).normal(size=(5, 4))
    _, g = softmax_xent(logits, np.array([0, 1, 2, 3, 0]))
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)
