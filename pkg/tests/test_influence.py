import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gratin.datasets import ContractError
from gratin.gnn import EmbeddingSet, finetune_head, init_model
from gratin.influence import (
    ConvergenceError,
    HessianSolver,
    average_influence,
    default_damping,
    fisher_filter,
    head_hessian,
    head_hvp,
    head_params,
    ihvp_solve,
    influence_score,
    per_sample_grads,
    predicted_loss_derivative,
    rank_descending,
    set_head_params,
)
from gratin.pipeline import AugmentationBatch, merge_embeddings
from oracles import fd_hessian, mean_ce, newton_refit


def head_model(d, c, seed=0, scale=0.5):
    m = init_model("gcn", 2, c, hidden_dim=d, seed=seed)
    rng = np.random.default_rng(seed)
    m.head_weight = scale * rng.standard_normal((c, d))
    m.head_bias = scale * rng.standard_normal(c)
    return m


def emb(x, y):
    return EmbeddingSet(np.asarray(x, float), np.asarray(y), np.arange(len(y)))


def test_bias_only_hessian():
    m = head_model(1, 2)
    m.head_weight[:] = 0.0
    m.head_bias[:] = 0.0
    lam = 0.01
    h = head_hessian(m, emb([[0.0]], [0]), damping=lam)
    # flattened order: W[0,0], b[0], W[1,0], b[1]
    expected = np.zeros((4, 4))
    expected[np.ix_([1, 3], [1, 3])] = [[0.25, -0.25], [-0.25, 0.25]]
    assert np.allclose(h, expected + lam * np.eye(4), atol=1e-15)


def test_hessian_matches_finite_differences(rng):
    d, c = 8, 3
    x, y = rng.standard_normal((10, d)), rng.integers(c, size=10)
    m = head_model(d, c, seed=1)
    h = head_hessian(m, emb(x, y))
    fd = fd_hessian(lambda t: mean_ce(t, x, y, c), head_params(m))
    assert np.linalg.norm(h - fd) / np.linalg.norm(fd) < 1e-4


@given(seed=st.integers(0, 2**31 - 1))
def test_hessian_symmetric_pd(seed):
    rng = np.random.default_rng(seed)
    d, c, n = int(rng.integers(1, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 15))
    m = head_model(d, c, seed=seed % 1000, scale=2.0)
    h0 = head_hessian(m, emb(rng.standard_normal((n, d)), rng.integers(c, size=n)))
    lam = default_damping(h0)
    h = h0 + lam * np.eye(len(h0))
    assert np.array_equal(h, h.T)
    assert np.linalg.eigvalsh(h).min() >= lam - 1e-10


def test_hvp_matches_matrix(rng):
    m = head_model(5, 4, seed=2)
    e = emb(rng.standard_normal((30, 5)), rng.integers(4, size=30))
    v = rng.standard_normal(24)
    assert np.allclose(head_hvp(m, e, v), head_hessian(m, e) @ v, atol=1e-13)


def test_hessian_empty_and_non_finite():
    m = head_model(2, 2)
    with pytest.raises(ContractError):
        head_hessian(m, emb(np.zeros((0, 2)), np.zeros(0, int)))
    m.head_weight[0, 0] = np.nan
    with pytest.raises(ContractError):
        head_hessian(m, emb([[1.0, 0.0]], [0]))


def test_param_flattening_round_trip(rng):
    m = head_model(3, 2)
    theta = rng.standard_normal(8)
    m2 = set_head_params(m, theta)
    assert np.array_equal(head_params(m2), theta)
    assert m2.head_weight[1, 2] == theta[1 * 4 + 2] and m2.head_bias[1] == theta[1 * 4 + 3]


# ---------------------------------------------------------------- CG solve


def test_cg_identity(rng):
    b = rng.standard_normal(7)
    assert np.allclose(ihvp_solve(np.eye(7), b, damping=0.5), b / 1.5, atol=1e-12)
    assert np.array_equal(ihvp_solve(np.eye(7), np.zeros(7)), np.zeros(7))


def test_cg_random_pd(rng):
    a = rng.standard_normal((50, 50))
    h = a @ a.T + 0.5 * np.eye(50)
    b = rng.standard_normal(50)
    x = ihvp_solve(lambda v: h @ v, b, tol=1e-12)
    assert np.abs(x - np.linalg.solve(h, b)).max() < 1e-8


def test_cg_non_convergence_reports_residual(rng):
    h = np.diag(np.logspace(0, 8, 40))
    with pytest.raises(ConvergenceError) as err:
        ihvp_solve(h, rng.standard_normal(40), max_iter=3)
    assert err.value.residual > 0 and err.value.iterations == 3


def test_cg_matches_direct_on_head(rng):
    m = head_model(32, 5, seed=3)
    e = emb(rng.standard_normal((100, 32)), rng.integers(5, size=100))
    direct = HessianSolver(m, e, method="direct")
    cg = HessianSolver(m, e, method="cg")
    g = rng.standard_normal(direct.dim)
    a, b = direct.solve(g), cg.solve(g)
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-6


# ---------------------------------------------------------------- scores


def test_saturated_aug_sample_scores_zero(rng):
    m = head_model(2, 2, seed=4)
    m.head_weight[:] = [[500.0, 0.0], [-500.0, 0.0]]
    m.head_bias[:] = 0.0
    e = emb(rng.standard_normal((10, 2)), rng.integers(2, size=10))
    solver = HessianSolver(m, e, damping=1e-3)
    aug = (np.array([[10.0, 0.0]]), np.array([0]))
    assert np.all(per_sample_grads(m, *aug) == 0.0)
    assert influence_score(m, solver, aug, (np.array([[0.3, 0.1]]), np.array([1]))) == 0.0


def test_self_influence_positive(rng):
    m = head_model(3, 3, seed=5)
    e = emb(rng.standard_normal((20, 3)), rng.integers(3, size=20))
    solver = HessianSolver(m, e)
    for x in rng.standard_normal((10, 3)):
        v = (x[None], np.array([1]))
        assert influence_score(m, solver, v, v) > 0
        assert predicted_loss_derivative(m, solver, v, v) < 0


def test_linearity_and_symmetry(rng):
    m = head_model(4, 3, seed=6)
    e = emb(rng.standard_normal((25, 4)), rng.integers(3, size=25))
    solver = HessianSolver(m, e)
    ga, gb = rng.standard_normal((2, solver.dim))
    base = gb @ solver.solve(ga)
    assert gb @ solver.solve(3.7 * ga) == pytest.approx(3.7 * base, rel=1e-10)
    assert ga @ solver.solve(gb) == pytest.approx(base, rel=1e-10)


def test_average_matches_double_loop(rng):
    m = head_model(4, 3, seed=7)
    train_e = emb(rng.standard_normal((30, 4)), rng.integers(3, size=30))
    eval_e = emb(rng.standard_normal((12, 4)), rng.integers(3, size=12))
    labels = rng.integers(3, size=15)
    batch = AugmentationBatch(rng.standard_normal((15, 4)), labels, np.bincount(labels, minlength=3).tolist())
    rep = average_influence(m, train_e, batch, eval_e)
    solver = HessianSolver(m, train_e)
    for i in range(15):
        naive = np.mean(
            [
                influence_score(m, solver, (batch.vectors[i : i + 1], batch.labels[i : i + 1]), (eval_e.vectors[k : k + 1], eval_e.labels[k : k + 1]))
                for k in range(12)
            ]
        )
        assert abs(rep.scores[i] - naive) < 1e-10
    assert sorted(rep.ranking.tolist()) == list(range(15))
    assert np.all(np.diff(rep.scores[rep.ranking]) <= 0)


def test_empty_batch_gives_empty_report(rng):
    m = head_model(2, 2)
    e = emb(rng.standard_normal((5, 2)), rng.integers(2, size=5))
    rep = average_influence(m, e, AugmentationBatch(np.zeros((0, 2)), [], [0, 0]), e)
    assert len(rep) == 0 and len(rep.ranking) == 0


def test_retraining_oracle(rng):
    d, c, n = 2, 3, 20
    x = rng.standard_normal((n, d))
    y = rng.integers(c, size=n)
    theta_hat, gnorm = newton_refit(np.zeros(c * (d + 1)), x, y, np.full(n, 1.0 / n), c)
    assert gnorm < 1e-10
    m = set_head_params(head_model(d, c), theta_hat)
    train_e = emb(x, y)
    eval_x, eval_y = rng.standard_normal((8, d)), rng.integers(c, size=8)
    aug_x, aug_y = rng.standard_normal((6, d)) * 1.5, rng.integers(c, size=6)
    batch = AugmentationBatch(aug_x, aug_y, np.bincount(aug_y, minlength=c).tolist())
    # H is singular along the class-shift direction; a vanishing ridge recovers the pseudo-inverse
    ridge = 1e-10 * np.trace(head_hessian(m, train_e)) / (c * (d + 1))
    rep = average_influence(m, train_e, batch, emb(eval_x, eval_y), damping=ridge)
    base = mean_ce(theta_hat, eval_x, eval_y, c)
    for i in range(6):
        for eps in (1e-3, 1e-4):
            xs = np.vstack([x, aug_x[i : i + 1]])
            ys = np.append(y, aug_y[i])
            w = np.append(np.full(n, 1.0 / n), eps)
            theta_eps, gn = newton_refit(theta_hat, xs, ys, w, c)
            assert gn < 1e-10
            actual = (mean_ce(theta_eps, eval_x, eval_y, c) - base) / eps
            predicted = -rep.scores[i]
            assert abs(actual - predicted) <= 0.05 * abs(predicted), (i, eps, actual, predicted)


def test_report_writers(tmp_path, rng):
    m = head_model(3, 2)
    e = emb(rng.standard_normal((10, 3)), rng.integers(2, size=10))
    labels = rng.integers(2, size=7)
    batch = AugmentationBatch(rng.standard_normal((7, 3)), labels, np.bincount(labels, minlength=2).tolist())
    rep = average_influence(m, e, batch, e, eval_set="test")
    rep.write(tmp_path / "i.csv", tmp_path / "i.json")
    rows = list(csv.DictReader(open(tmp_path / "i.csv")))
    assert len(rows) == 7
    assert sorted(int(r["rank"]) for r in rows) == list(range(7))
    header = json.loads((tmp_path / "i.json").read_text())
    assert header["eval_set"] == "test" and header["N"] == 10 and header["dim"] == 8
    counts, edges = rep.histogram(5)
    assert counts.sum() == 7 and len(edges) == 6


# ---------------------------------------------------------------- filtering


def test_rank_ties_prefer_lower_index():
    assert rank_descending(np.array([1.0, 2.0, 2.0, 0.0, 2.0])).tolist() == [1, 2, 4, 0, 3]


@pytest.fixture
def filter_setup(rng):
    m = head_model(3, 2, seed=9)
    tr = emb(rng.standard_normal((20, 3)), rng.integers(2, size=20))
    va = emb(rng.standard_normal((8, 3)), rng.integers(2, size=8))
    labels = rng.integers(2, size=12)
    batch = AugmentationBatch(rng.standard_normal((12, 3)), labels, np.bincount(labels, minlength=2).tolist())
    return m, tr, va, batch


def test_filter_keep_none(filter_setup):
    m, tr, va, batch = filter_setup
    kept, tuned, _ = fisher_filter(m, tr, batch, va, 0.0)
    assert len(kept) == 0
    assert np.array_equal(tuned.head_weight, finetune_head(m, tr).head_weight)


def test_filter_keep_all(filter_setup):
    m, tr, va, batch = filter_setup
    kept, tuned, _ = fisher_filter(m, tr, batch, va, 1.0)
    assert np.array_equal(kept.vectors, batch.vectors) and np.array_equal(kept.labels, batch.labels)
    assert np.array_equal(tuned.head_weight, finetune_head(m, merge_embeddings(tr, batch)).head_weight)


def test_filter_keeps_top_scores(filter_setup):
    m, tr, va, batch = filter_setup
    kept, _, rep = fisher_filter(m, tr, batch, va, 0.5)
    top = np.sort(rep.ranking[:6])
    assert np.array_equal(kept.vectors, batch.vectors[top])
    assert rep.scores[top].min() >= np.delete(rep.scores, top).max()


def test_filter_tie_break(filter_setup):
    m, tr, va, _ = filter_setup
    v = np.array([[0.2, -0.1, 0.4]] * 2 + [[5.0, 5.0, 5.0]])
    batch = AugmentationBatch(v, [1, 1, 0], [1, 2])
    kept, _, rep = fisher_filter(m, tr, batch, va, 1 / 3)
    assert rep.scores[0] == rep.scores[1]
    expected = 0 if rep.scores[0] >= rep.scores[2] else 2
    assert len(kept) == 1 and np.array_equal(kept.vectors[0], v[expected])


def test_filter_bad_fraction(filter_setup):
    m, tr, va, batch = filter_setup
    with pytest.raises(ContractError):
        fisher_filter(m, tr, batch, va, 1.5)
