import json
import math
import os
import tempfile

import numpy as np
import pytest

from vesselprune import gat
from vesselprune.dual_graph import DualGraph
from vesselprune.gat import AdamState, GatParams

from .utils import test_utils

SMALL = GatParams(heads=2, hidden_dim=3, hidden_layers=1, lr=0.01, epochs=60)
FIVE_LAYERS = GatParams(heads=2, hidden_dim=2, hidden_layers=4)


def test_init_model_shapes():
    model = gat.init_model(4, GatParams(heads=3, hidden_dim=5, hidden_layers=2), rng_seed=1)
    assert [layer.W.shape for layer in model.layers] == [(3, 5, 4), (3, 5, 15), (3, 1, 15)]
    assert [layer.a.shape for layer in model.layers] == [(3, 10), (3, 10), (3, 2)]
    assert [layer.concat for layer in model.layers] == [True, True, False]
    assert model.seed == 1

    bound = math.sqrt(6.0 / (4 + 5))
    assert np.abs(model.layers[0].W).max() <= bound

    same = gat.init_model(4, GatParams(heads=3, hidden_dim=5, hidden_layers=2), rng_seed=1)
    for a, b in zip(model.parameters(), same.parameters()):
        assert np.array_equal(a, b)


def test_init_model_validation():
    with pytest.raises(ValueError, match="heads"):
        gat.init_model(4, GatParams(heads=0))
    with pytest.raises(ValueError, match="threshold"):
        gat.init_model(4, GatParams(threshold=1.5))
    with pytest.raises(ValueError, match="init"):
        gat.init_model(4, GatParams(init="he"))

    hidden = gat.init_model(4, SMALL).layers[0]
    with pytest.raises(ValueError, match="average heads"):
        gat.GatModel([hidden])


def test_attention_rows_sum_to_one(rng):
    for n in (1, 5, 12):
        graph = test_utils.random_dual_graph(rng, n)
        model = gat.init_model(4, SMALL, rng_seed=n)
        table, mask = graph.neighbor_table()
        alpha = gat.attention_coefficients(model.layers[0], graph.features, table, mask)

        assert alpha.shape == (2, n, table.shape[1])
        assert np.allclose(alpha.sum(axis=2), 1.0, atol=1e-9, rtol=0)
        assert np.all(alpha[:, ~mask] == 0)
        assert np.all(alpha[:, mask] > 0)


def test_zero_init_predicts_one_half(rng):
    graph = test_utils.random_dual_graph(rng, 7)
    model = gat.init_model(4, GatParams(init="zero", hidden_layers=2))
    assert np.allclose(gat.predict(model, graph), 0.5)


def test_forward_permutation_equivariant(rng):
    for _ in range(10):
        n = int(rng.integers(2, 10))
        graph = test_utils.random_dual_graph(rng, n)
        model = gat.init_model(4, SMALL, rng_seed=int(rng.integers(1000)))

        perm = rng.permutation(n)
        inverse = np.argsort(perm)
        edges = np.sort(inverse[graph.edges], axis=1) if len(graph.edges) else graph.edges
        permuted = DualGraph(
            n,
            edges,
            tuple(graph.segment_node_ids[i] for i in perm),
            graph.lengths[perm],
            features=graph.features[perm],
        )
        scores = gat.predict(model, graph)
        assert np.allclose(gat.predict(model, permuted), scores[perm], atol=1e-12, rtol=0)


def test_isolated_node_leaves_other_scores_unchanged(rng):
    graph = test_utils.random_dual_graph(rng, 8)
    model = gat.init_model(4, SMALL, rng_seed=3)
    extended = DualGraph(
        9,
        graph.edges,
        graph.segment_node_ids + ((17, 18),),
        np.append(graph.lengths, 2.0),
        features=np.vstack([graph.features, rng.uniform(0, 1, (1, 4))]),
    )

    scores = gat.predict(model, extended)
    assert np.allclose(scores[:8], gat.predict(model, graph), atol=1e-12, rtol=0)
    # a lone node attends only to itself
    alone = DualGraph(1, np.zeros((0, 2)), ((17, 18),), [2.0], features=extended.features[8:])
    assert scores[8] == pytest.approx(gat.predict(model, alone)[0], abs=1e-12)


def test_forward_outputs(rng):
    graph = test_utils.random_dual_graph(rng, 6)
    model = gat.init_model(4, SMALL)
    scores = gat.forward(model, graph)
    assert scores.shape == (6,)
    assert np.all((scores > 0) & (scores < 1))

    empty = DualGraph(0, np.zeros((0, 2)), (), np.zeros(0), features=np.zeros((0, 4)))
    assert gat.predict(model, empty).shape == (0,)

    with pytest.raises(ValueError, match="no features"):
        gat.forward(model, graph.replace(features=None))
    with pytest.raises(ValueError, match="expects 4 features"):
        gat.forward(model, graph, features=np.zeros((6, 3)))


def test_bce_loss_closed_form():
    loss, grad = gat.bce_loss([0.5, 0.9], [1.0, 0.0])
    assert loss == pytest.approx(-(math.log(0.5) + math.log(0.1)) / 2)
    assert np.allclose(grad, [-1.0, 5.0])

    # saturated scores are clamped
    loss, grad = gat.bce_loss([0.0, 1.0], [0.0, 1.0])
    assert np.isfinite(loss) and loss == pytest.approx(1e-7, rel=1e-3)
    assert np.all(np.isfinite(grad))

    with pytest.raises(ValueError, match="targets"):
        gat.bce_loss([0.5], [0.5, 0.5])


def _numeric_gradient(model, graph, step=1e-4):
    params = [p.copy() for p in model.parameters()]
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            values = []
            for sign in (1, -1):
                shifted = [q.copy() for q in params]
                shifted[i][idx] += sign * step
                model.set_parameters(shifted)
                values.append(gat.bce_loss(gat.forward(model, graph), graph.targets)[0])
            g[idx] = (values[0] - values[1]) / (2 * step)
        grads.append(g)
    model.set_parameters(params)
    return grads


def test_backward_matches_finite_differences(rng):
    for trial in range(20):
        n = int(rng.integers(1, 9))
        graph = test_utils.random_dual_graph(rng, n, n_features=3)
        model = gat.init_model(3, FIVE_LAYERS, rng_seed=trial)
        assert len(model.layers) == 5

        loss, grads = gat.backward(model, graph)
        assert loss == pytest.approx(gat.bce_loss(gat.predict(model, graph), graph.targets)[0])

        numeric = _numeric_gradient(model, graph)
        analytic = np.concatenate([g.ravel() for g in grads])
        expected = np.concatenate([g.ravel() for g in numeric])
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(expected), 1e-12)
        assert np.linalg.norm(analytic - expected) / scale < 1e-4


def test_backward_requires_targets(rng):
    graph = test_utils.random_dual_graph(rng, 3)
    with pytest.raises(ValueError, match="required for a gradient"):
        gat.backward(gat.init_model(4, SMALL), graph.replace(targets=None))


def test_adam_first_step_is_signed_lr():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    grads = [np.array([0.3, -0.5]), np.array([[-4.0]])]
    state = AdamState.zeros_like(params)

    updated = gat.adam_step(params, grads, state, lr=0.01, wd=0.0)
    assert state.step == 1
    assert np.allclose(updated[0], [0.99, -1.99], atol=1e-8)
    assert np.allclose(updated[1], [[0.51]], atol=1e-8)

    # decoupled weight decay shrinks the parameters before the moment step
    decayed = gat.adam_step(params, grads, AdamState.zeros_like(params), lr=0.01, wd=0.5)
    assert np.allclose(decayed[0], [0.995 - 0.01, -1.99 + 0.01], atol=1e-8)

    with pytest.raises(ValueError, match="gradients"):
        gat.adam_step(params, grads[:1], AdamState.zeros_like(params))


def test_train_reduces_loss(rng):
    dataset = [test_utils.random_dual_graph(rng, 6) for _ in range(3)]
    model = gat.init_model(4, SMALL, rng_seed=3)
    before = [p.copy() for p in model.parameters()]

    trained, history = gat.train(model, dataset, rng_seed=5)
    assert len(history) == SMALL.epochs
    assert history[-1] < history[0]
    # the input model is left untouched
    for a, b in zip(model.parameters(), before):
        assert np.array_equal(a, b)

    again, history_again = gat.train(model, dataset, rng_seed=5)
    assert history_again == history
    for a, b in zip(trained.parameters(), again.parameters()):
        assert np.array_equal(a, b)


def test_train_standardizes_features(rng):
    dataset = [test_utils.random_dual_graph(rng, 5) for _ in range(2)]
    params = GatParams(heads=1, hidden_dim=2, hidden_layers=0, epochs=1, standardize=True)
    trained, _ = gat.train(gat.init_model(4, params), dataset)

    stacked = np.concatenate([g.features for g in dataset])
    assert np.allclose(trained.feature_mean, stacked.mean(axis=0))
    assert np.allclose(trained.feature_std, stacked.std(axis=0))


def test_train_validation(rng):
    model = gat.init_model(4, SMALL)
    empty = DualGraph(0, np.zeros((0, 2)), (), np.zeros(0))
    with pytest.raises(ValueError, match="empty dataset"):
        gat.train(model, [empty])
    graph = test_utils.random_dual_graph(rng, 3)
    with pytest.raises(ValueError, match="features and targets"):
        gat.train(model, [graph.replace(targets=None)])
    with pytest.raises(ValueError, match="model expects 4"):
        gat.train(model, [test_utils.random_dual_graph(rng, 3, n_features=2)])


def test_train_raises_on_non_finite_loss(mocker, rng):
    model = gat.init_model(4, SMALL)
    mocker.patch(
        "vesselprune.gat._backward", return_value=(float("nan"), model.parameters())
    )
    with pytest.raises(gat.NumericalError, match="Non-finite loss"):
        gat.train(model, [test_utils.random_dual_graph(rng, 3)], epochs=1)


def test_checkpoint_round_trip(rng):
    params = GatParams(heads=2, hidden_dim=3, hidden_layers=1, standardize=True, epochs=2)
    model, _ = gat.train(
        gat.init_model(4, params, rng_seed=9), [test_utils.random_dual_graph(rng, 5)]
    )

    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, "model.ckpt")
        gat.save_checkpoint(path, model)
        with open(path, "rb") as f:
            header = json.loads(f.read().partition(b"\n")[0])
        loaded = gat.load_checkpoint(path)

        with pytest.raises(FileNotFoundError, match=r"A bad path*"):
            gat.load_checkpoint(os.path.join(temp_dir, "missing.ckpt"))

    assert header["format"] == gat.CHECKPOINT_FORMAT
    assert header["in_dim"] == 4
    assert header["seed"] == 9
    assert header["hyperparams"]["standardize"] is True

    for a, b in zip(loaded.parameters(), model.parameters()):
        assert np.array_equal(a, b.astype("<f4").astype(np.float64))
    assert np.allclose(loaded.feature_mean, model.feature_mean, atol=1e-6)
    assert loaded.params == model.params

    graph = test_utils.random_dual_graph(rng, 6)
    assert np.allclose(gat.predict(loaded, graph), gat.predict(model, graph), atol=1e-5)


def test_checkpoint_rejects_malformed():
    encoded = gat.checkpoint_to_bytes(gat.init_model(4, SMALL))
    with pytest.raises(ValueError, match="Unsupported checkpoint header"):
        gat.checkpoint_from_bytes(b'{"format": "other"}\n' + encoded.partition(b"\n")[2])
    with pytest.raises(ValueError, match="expected"):
        gat.checkpoint_from_bytes(encoded[:-4])
