import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_graph
from gratin.datasets import ContractError, Graph
from gratin.gnn import (
    EmbeddingSet,
    TrainConfig,
    TrainingError,
    _per_graph_losses,
    batch_loss_and_grad,
    ce_residual,
    embed_dataset,
    entropy,
    finetune_head,
    forward,
    gcn_lipschitz_bound,
    init_model,
    load_model,
    loss_and_grad,
    save_model,
    softmax,
    saturation_report,
    train,
    write_history_csv,
)


def dense_forward(model, graph):
    """Layer formulas evaluated with dense matrices, written independently of the library."""
    a = np.zeros((graph.node_count, graph.node_count))
    for u, v in graph.edges:
        a[u, v] = a[v, u] = 1.0
    h = graph.features
    for t in range(model.num_layers):
        if model.backbone == "gcn":
            at = a + np.eye(len(a))
            dm = np.diag(1.0 / np.sqrt(at.sum(axis=1)))
            s = dm @ at @ dm
        else:
            s = (1.0 + model.gin_eps[t]) * np.eye(len(a)) + a
        h = np.maximum(s @ h @ model.weights[t] + model.biases[t], 0.0)
    emb = h.sum(axis=0)
    logits = model.head_weight @ emb + model.head_bias
    p = np.exp(logits - logits.max())
    return emb, logits, p / p.sum()


def perturbed_model(backbone, in_dim, seed, classes=3):
    m = init_model(backbone, in_dim, classes, hidden_dim=6, num_layers=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for arr in m.parameters().values():
        arr += 0.3 * rng.standard_normal(arr.shape)
    return m


def fd_relative_errors(model, graph, step=1e-5):
    _, grads = loss_and_grad(model, graph)
    out = {}
    for name, arr in model.parameters().items():
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + step
            lp = loss_and_grad(model, graph)[0]
            arr[idx] = old - step
            lm = loss_and_grad(model, graph)[0]
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * step)
        denom = max(np.linalg.norm(fd), np.linalg.norm(grads[name]), 1e-12)
        out[name] = np.linalg.norm(fd - grads[name]) / denom
    return out


@pytest.mark.parametrize("backbone", ["gcn", "gin"])
def test_matches_dense_oracle(backbone, rng):
    g = random_graph(rng, 5, 5, p=0.5, feature_dim=4, onehot=False)
    m = perturbed_model(backbone, 4, 3)
    emb, logits, probs = forward(m, g)
    e2, l2, p2 = dense_forward(m, g)
    assert np.allclose(emb, e2, atol=1e-12, rtol=1e-12)
    assert np.allclose(logits, l2, atol=1e-12, rtol=1e-12)
    assert np.allclose(probs, p2, atol=1e-12, rtol=1e-12)


def test_isolated_node_gcn(rng):
    m = perturbed_model("gcn", 3, 1)
    x = rng.standard_normal((1, 3))
    g = Graph(1, [], x, 0)
    h = x
    for w, b in zip(m.weights, m.biases):
        h = np.maximum(h @ w + b, 0.0)
    assert np.allclose(forward(m, g)[0], h[0], atol=1e-14)


@pytest.mark.parametrize("backbone", ["gcn", "gin"])
@given(seed=st.integers(0, 2**31 - 1))
def test_permutation_invariance(backbone, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 2, 12, p=0.4, onehot=False)
    perm = rng.permutation(g.node_count)
    inv = np.argsort(perm)
    pg = Graph(g.node_count, inv[g.edges], g.features[perm], g.label)
    m = perturbed_model(backbone, 3, seed % 1000)
    for a, b in zip(forward(m, g), forward(m, pg)):
        assert np.allclose(a, b, atol=1e-10, rtol=0)


@given(seed=st.integers(0, 2**31 - 1), backbone=st.sampled_from(["gcn", "gin"]))
def test_probs_normalised(seed, backbone):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 1, 10, onehot=False)
    m = perturbed_model(backbone, 3, seed % 97)
    m.head_weight *= 50.0
    assert abs(forward(m, g)[2].sum() - 1.0) < 1e-12


def test_dimension_mismatch(rng):
    m = init_model("gcn", 4, 2)
    with pytest.raises(ContractError):
        forward(m, random_graph(rng, feature_dim=3))


@pytest.mark.parametrize("backbone", ["gcn", "gin"])
def test_gradients_six_node_graph(backbone, rng):
    g = random_graph(rng, 6, 6, p=0.5, feature_dim=4, onehot=False)
    errs = fd_relative_errors(perturbed_model(backbone, 4, 7), g)
    assert max(errs.values()) < 1e-5, errs


def test_uniform_prediction_loss(rng):
    m = init_model("gin", 3, 4)
    m.head_weight[:] = 0.0
    g = random_graph(rng, onehot=False)
    loss, grads = loss_and_grad(m, g)
    assert loss == pytest.approx(math.log(4), abs=1e-14)
    emb = forward(m, g)[0]
    resid = np.full(4, 0.25)
    resid[g.label] -= 1.0
    assert np.allclose(grads["head.weight"], np.outer(resid, emb), atol=1e-14)
    assert np.allclose(grads["head.bias"], resid, atol=1e-14)


def test_gin_eps_minus_one_edgeless():
    m = init_model("gin", 3, 2, gin_eps=-1.0)
    g = Graph(4, [], np.random.default_rng(0).standard_normal((4, 3)), 0)
    _, _, _, _ = batch_loss_and_grad(m, [g])
    assert np.allclose(forward(m, g)[0], 0.0)


def test_batch_gradient_is_mean_of_single(rng):
    graphs = [random_graph(rng, onehot=False) for _ in range(5)]
    m = perturbed_model("gcn", 3, 2, classes=2)
    _, grads, _, _ = batch_loss_and_grad(m, graphs)
    singles = [loss_and_grad(m, g)[1] for g in graphs]
    for name in grads:
        assert np.allclose(grads[name], np.mean([s[name] for s in singles], axis=0), atol=1e-13)


def separable_graphs(rng, n=40):
    out = []
    for i in range(n):
        c = i % 2
        k = int(rng.integers(2, 6))
        feats = np.zeros((k, 2))
        feats[:, c] = 1.0
        out.append(Graph(k, [(j, j + 1) for j in range(k - 1)], feats, c))
    return out


def test_training_separable_frozen_backbone(rng):
    graphs = separable_graphs(rng)
    m = init_model("gcn", 2, 2, hidden_dim=8, seed=3)
    cfg = TrainConfig(epochs=150, train_backbone=False, seed=0)
    trained, hist = train(m, graphs, cfg)
    losses = [h.loss for h in hist]
    assert all(b <= a for a, b in zip(losses[5:], losses[6:]))
    assert trained.backbone_digest() == m.backbone_digest()
    emb = embed_dataset(trained, graphs)
    assert np.mean((emb.vectors @ trained.head_weight.T + trained.head_bias).argmax(1) == emb.labels) == 1.0


def test_zero_epochs_and_determinism(rng):
    graphs = separable_graphs(rng, 12)
    m = init_model("gin", 2, 2, seed=5)
    same, hist = train(m, graphs, TrainConfig(epochs=0))
    assert hist == []
    assert all(np.array_equal(a, b) for a, b in zip(same.parameters().values(), m.parameters().values()))
    cfg = TrainConfig(epochs=20, batch_size=5, seed=9)
    a, _ = train(m, graphs, cfg)
    b, _ = train(m, graphs, cfg)
    for x, y in zip(a.parameters().values(), b.parameters().values()):
        assert np.array_equal(x, y)


def test_non_finite_loss_aborts(rng):
    m = init_model("gcn", 2, 2)
    m.head_weight[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train(m, separable_graphs(rng, 4), TrainConfig(epochs=3))
    assert err.value.epoch == 0


def test_embed_dataset_rows(rng):
    graphs = [random_graph(rng, onehot=False) for _ in range(6)]
    m = perturbed_model("gin", 3, 1)
    emb = embed_dataset(m, graphs)
    for i, g in enumerate(graphs):
        assert np.allclose(emb.vectors[i], forward(m, g)[0], atol=1e-12)
    assert emb.labels.tolist() == [g.label for g in graphs]
    empty = embed_dataset(m, [])
    assert len(empty) == 0 and empty.dim == m.embed_dim


def test_finetune_head_freezes_backbone(rng):
    graphs = separable_graphs(rng, 20)
    m = init_model("gin", 2, 2, hidden_dim=8, seed=1)
    emb = embed_dataset(m, graphs)
    tuned = finetune_head(m, emb, epochs=200, lr=5e-2)
    assert tuned.backbone_digest() == m.backbone_digest()
    pred = (emb.vectors @ tuned.head_weight.T + tuned.head_bias).argmax(1)
    assert np.mean(pred == emb.labels) == 1.0


def test_finetune_equals_continued_head_training(rng):
    graphs = separable_graphs(rng, 10)
    m = init_model("gcn", 2, 2, hidden_dim=4, seed=2)
    a = finetune_head(m, embed_dataset(m, graphs), epochs=30)
    b, _ = train(m, graphs, TrainConfig(epochs=30, train_backbone=False))
    assert np.allclose(a.head_weight, b.head_weight, atol=1e-12)
    assert np.allclose(a.head_bias, b.head_bias, atol=1e-12)


def test_entropy_values():
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(0.6931471805599453, abs=1e-15)
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)
    assert entropy(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-10)


def test_saturation_ranges(rng):
    graphs = [random_graph(rng, onehot=False) for _ in range(20)]
    m = perturbed_model("gin", 3, 4)
    rep = saturation_report(m, graphs)
    assert np.all(rep["entropy"] >= 0) and np.all(rep["entropy"] <= math.log(3) + 1e-12)
    assert np.all(rep["max_confidence"] >= 1 / 3 - 1e-12) and np.all(rep["max_confidence"] <= 1)


def test_lipschitz_single_edge():
    g = Graph(2, [(0, 1)], np.ones((2, 1)), 0)
    assert gcn_lipschitz_bound([g]) == pytest.approx(0.5 + 2 * 1 * 2 / 2**2.5)


def test_lipschitz_scan_oracle(rng):
    graphs = [random_graph(rng, 2, 15, p=0.3) for _ in range(30)]
    delta = min(g.adjacency().sum(1).min() + 1 for g in graphs)
    big_m = max(np.abs(g.adjacency()).sum(0).max() for g in graphs)
    p = max(g.node_count for g in graphs)
    assert gcn_lipschitz_bound(graphs) == pytest.approx(1 / delta + 2 * big_m * p / delta**2.5, rel=1e-14)


def test_lipschitz_min_degree_term_monotone(rng):
    g = random_graph(rng, 6, 6, p=0.2)
    more = g.replace(edges=np.vstack([g.edges, [[0, 5], [1, 4]]]))
    d = lambda x: 1.0 / (x.degrees().min() + 1)  # noqa: E731
    assert d(more) <= d(g)


def test_checkpoint_and_history_round_trip(tmp_path, rng):
    m = perturbed_model("gin", 3, 8)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for (k1, a), (k2, b) in zip(m.parameters().items(), back.parameters().items()):
        assert k1 == k2 and np.array_equal(a, b)
    assert back.backbone == "gin" and back.gin_eps == m.gin_eps
    _, hist = train(m, [random_graph(rng, onehot=False) for _ in range(4)], TrainConfig(epochs=3))
    write_history_csv(hist, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["epoch", "loss", "train_acc", "val_acc"] and len(rows) == 4


def test_embedding_set_rejects_nan():
    with pytest.raises(ContractError):
        EmbeddingSet(np.array([[np.nan]]), np.array([0]), np.array([0]))


def test_cross_entropy_precise_when_saturated():
    logits = np.array([[60.0, 0.0, 0.0], [0.0, 60.0, 1.0]])
    labels = np.array([0, 0])
    losses = _per_graph_losses(logits, labels)
    assert losses[0] == pytest.approx(2 * math.exp(-60), rel=1e-12)
    assert losses[1] == pytest.approx(60 + math.log(1 + math.exp(-60) + math.exp(-59)), rel=1e-15)
    resid = ce_residual(softmax(logits), labels)
    assert resid[0, 0] == pytest.approx(-2 * math.exp(-60), rel=1e-12)
    assert np.allclose(resid.sum(axis=1), 0.0, atol=1e-15)
