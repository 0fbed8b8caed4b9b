"""Influence of augmented embeddings on held-out loss, restricted to the head.

The head is the affine map ``[W | b]`` acting on ``[h; 1]``; its parameters
are flattened class-major, so index ``c * (d + 1) + j`` is ``W_aug[c, j]``.
For mean cross-entropy the Hessian is
``(1/N) sum_n (diag(p_n) - p_n p_n^T) kron [h_n; 1][h_n; 1]^T``.

Scores follow the "positive is helpful" convention: for an augmented vector
``a`` and an evaluation vector ``e`` the score is ``g_e^T H^-1 g_a``, the
negative of the predicted derivative of the evaluation loss when ``a`` is
up-weighted in the training objective.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .datasets import ContractError
from .gnn import EmbeddingSet, GnnModel, ce_residual, finetune_head, softmax
from .pipeline import AugmentationBatch, merge_embeddings


class InfluenceError(RuntimeError):
    pass


class ConvergenceError(InfluenceError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"CG stopped after {iterations} iterations, residual {residual:.3e}")


def with_bias(vectors: np.ndarray) -> np.ndarray:
    vectors = np.atleast_2d(vectors)
    return np.hstack([vectors, np.ones((len(vectors), 1))])


def head_params(model: GnnModel) -> np.ndarray:
    return np.hstack([model.head_weight, model.head_bias[:, None]]).ravel()


def set_head_params(model: GnnModel, theta: np.ndarray) -> GnnModel:
    out = model.copy()
    w = np.asarray(theta, dtype=np.float64).reshape(model.num_classes, model.embed_dim + 1)
    out.head_weight = w[:, :-1].copy()
    out.head_bias = w[:, -1].copy()
    return out


def head_probs(model: GnnModel, vectors: np.ndarray) -> np.ndarray:
    probs = softmax(np.atleast_2d(vectors) @ model.head_weight.T + model.head_bias)
    if not np.all(np.isfinite(probs)):
        raise ContractError("non-finite probabilities")
    return probs


def per_sample_grads(model: GnnModel, vectors: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of ``-log p[y]`` w.r.t. the flattened head, one row per sample."""
    labels = np.atleast_1d(labels)
    probs = head_probs(model, vectors)
    resid = ce_residual(probs, labels)
    xb = with_bias(vectors)
    return np.einsum("nc,nj->ncj", resid, xb).reshape(len(labels), -1)


def head_hessian(model: GnnModel, embeddings: EmbeddingSet, damping: float = 0.0) -> np.ndarray:
    """Exact Hessian of the mean head cross-entropy plus ``damping * I``."""
    if len(embeddings) == 0:
        raise ContractError("need at least one embedding")
    probs = head_probs(model, embeddings.vectors)
    xb = with_bias(embeddings.vectors)
    c, m = probs.shape[1], xb.shape[1]
    # B_n = diag(p_n) - p_n p_n^T, accumulated as sum_n B_n[c, c'] x_n x_n^T
    blocks = np.einsum("nc,nd,ni,nj->cdij", probs, probs, xb, xb)
    diag = np.einsum("nc,ni,nj->cij", probs, xb, xb)
    blocks = -blocks
    for k in range(c):
        blocks[k, k] += diag[k]
    hess = blocks.transpose(0, 2, 1, 3).reshape(c * m, c * m) / len(embeddings)
    hess = 0.5 * (hess + hess.T)
    return hess + damping * np.eye(c * m)


def default_damping(hessian: np.ndarray) -> float:
    return 1e-4 * float(np.trace(hessian)) / hessian.shape[0]


def head_hvp(model: GnnModel, embeddings: EmbeddingSet, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of the mean head cross-entropy without forming H."""
    probs = head_probs(model, embeddings.vectors)
    xb = with_bias(embeddings.vectors)
    v_mat = np.asarray(v).reshape(probs.shape[1], xb.shape[1])
    u = xb @ v_mat.T
    bu = probs * u - probs * (probs * u).sum(axis=1, keepdims=True)
    return (bu.T @ xb).ravel() / len(embeddings)


def ihvp_solve(
    hessian_operator,
    rhs: np.ndarray,
    damping: float = 0.0,
    max_iter: int | None = None,
    tol: float = 1e-8,
) -> np.ndarray:
    """Solve ``(H + damping I) x = rhs`` by conjugate gradients.

    ``hessian_operator`` is either a matrix or a callable computing ``H v``.
    Stops when ``||r|| <= tol * ||rhs||``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if callable(hessian_operator):
        matvec = hessian_operator
    else:
        mat = np.asarray(hessian_operator)
        matvec = mat.__matmul__
    n = rhs.shape[0]
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n)
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return x
    r = rhs.copy()
    p = r.copy()
    rs = r @ r
    for it in range(max_iter):
        if np.sqrt(rs) <= tol * b_norm:
            return x
        ap = matvec(p) + damping * p
        curv = p @ ap
        if curv <= 0:
            raise ConvergenceError(float(np.sqrt(rs)), it)
        alpha = rs / curv
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) <= tol * b_norm:
        return x
    raise ConvergenceError(float(np.sqrt(rs)), max_iter)


class HessianSolver:
    """Factorises ``H + damping I`` once and applies its inverse."""

    def __init__(
        self,
        model: GnnModel,
        embeddings: EmbeddingSet,
        damping: float | None = None,
        method: str = "direct",
    ):
        self.method = method
        hess = head_hessian(model, embeddings)
        self.damping = default_damping(hess) if damping is None else float(damping)
        self.dim = hess.shape[0]
        if method == "direct":
            damped = hess + self.damping * np.eye(self.dim)
            try:
                self._factor = cho_factor(damped)
            except LinAlgError:
                raise InfluenceError(
                    f"Hessian factorisation failed, condition estimate {np.linalg.cond(damped):.3e}"
                ) from None
        elif method == "cg":
            self._matvec: Callable = lambda v: head_hvp(model, embeddings, v)
        else:
            raise ContractError(f"unknown solve method {method!r}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.method == "direct":
            return cho_solve(self._factor, rhs)
        return ihvp_solve(self._matvec, rhs, damping=self.damping)


def influence_score(model: GnnModel, solver: HessianSolver, aug_vector, eval_vector) -> float:
    """``g_eval^T H^-1 g_aug``; positive means up-weighting the sample lowers the eval loss.

    ``aug_vector`` and ``eval_vector`` are ``(h, y)`` pairs.
    """
    g_aug = per_sample_grads(model, aug_vector[0], aug_vector[1])[0]
    g_eval = per_sample_grads(model, eval_vector[0], eval_vector[1])[0]
    return float(g_eval @ solver.solve(g_aug))


def predicted_loss_derivative(model, solver, aug_vector, eval_vector) -> float:
    """``d loss(eval) / d eps`` for the objective ``L + eps * loss(aug)``."""
    return -influence_score(model, solver, aug_vector, eval_vector)


@dataclass
class InfluenceReport:
    scores: np.ndarray
    ranking: np.ndarray
    labels: np.ndarray
    hessian_damping: float
    eval_set: str
    num_train: int = 0
    num_eval: int = 0
    dim: int = 0

    def __len__(self) -> int:
        return len(self.scores)

    def histogram(self, bins: int = 30):
        if len(self.scores) == 0:
            return np.zeros(bins, dtype=np.int64), np.linspace(0.0, 1.0, bins + 1)
        return np.histogram(self.scores, bins=bins)

    def header(self) -> dict:
        return {
            "damping": self.hessian_damping,
            "eval_set": self.eval_set,
            "N": self.num_train,
            "num_eval": self.num_eval,
            "num_samples": len(self.scores),
            "dim": self.dim,
        }

    def write(self, csv_path, header_path=None) -> None:
        rank = np.empty(len(self.ranking), dtype=np.int64)
        rank[self.ranking] = np.arange(len(self.ranking))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "class", "score", "rank"])
            for i, (c, s) in enumerate(zip(self.labels, self.scores)):
                w.writerow([i, int(c), repr(float(s)), int(rank[i])])
        if header_path is not None:
            Path(header_path).write_text(json.dumps(self.header(), sort_keys=True, indent=2) + "\n")


def rank_descending(scores: np.ndarray) -> np.ndarray:
    # stable sort of the negated scores keeps lower indices first among ties
    return np.argsort(-np.asarray(scores), kind="stable")


def average_influence(
    model: GnnModel,
    embeddings: EmbeddingSet,
    aug_batch: AugmentationBatch,
    eval_embeddings: EmbeddingSet,
    damping: float | None = None,
    method: str = "direct",
    eval_set: str = "validation",
) -> InfluenceReport:
    """Mean influence score of every augmented vector over an evaluation set.

    The Hessian is taken over the training ``embeddings`` and factorised once;
    averaging the evaluation gradients first reduces the work to one solve.
    """
    solver = HessianSolver(model, embeddings, damping=damping, method=method)
    dim = solver.dim
    if len(aug_batch) == 0:
        empty = np.zeros(0)
        return InfluenceReport(
            empty, np.zeros(0, np.int64), np.zeros(0, np.int64), solver.damping, eval_set,
            len(embeddings), len(eval_embeddings), dim,
        )
    if len(eval_embeddings) == 0:
        raise ContractError("evaluation set is empty")
    g_eval = per_sample_grads(model, eval_embeddings.vectors, eval_embeddings.labels).mean(axis=0)
    s = solver.solve(g_eval)
    g_aug = per_sample_grads(model, aug_batch.vectors, aug_batch.labels)
    scores = g_aug @ s
    return InfluenceReport(
        scores,
        rank_descending(scores),
        aug_batch.labels.copy(),
        solver.damping,
        eval_set,
        len(embeddings),
        len(eval_embeddings),
        dim,
    )


def fisher_filter(
    model: GnnModel,
    train_embeddings: EmbeddingSet,
    aug_batch: AugmentationBatch,
    val_embeddings: EmbeddingSet,
    keep_fraction: float = 0.5,
    finetune_epochs: int = 100,
    learning_rate: float = 1e-2,
    damping: float | None = None,
) -> tuple[AugmentationBatch, GnnModel, InfluenceReport]:
    """Keep the most helpful augmented vectors (by validation influence) and refit the head.

    Ties in the ranking go to the lower sample index; kept samples retain
    their original order.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ContractError("keep_fraction must lie in [0, 1]")
    report = average_influence(
        model, train_embeddings, aug_batch, val_embeddings, damping=damping, eval_set="validation"
    )
    n_keep = int(round(keep_fraction * len(aug_batch)))
    kept_idx = np.sort(report.ranking[:n_keep])
    kept = aug_batch.subset(kept_idx)
    tuned = finetune_head(
        model, merge_embeddings(train_embeddings, kept), finetune_epochs, learning_rate
    )
    return kept, tuned, report
