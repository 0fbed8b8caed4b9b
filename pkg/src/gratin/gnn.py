"""GCN / GIN graph classifiers with hand-derived gradients.

A model is ``T`` message-passing layers ``H <- ReLU(S H W + b)`` followed by a
sum readout and a linear-softmax head. ``S`` is the graph shift operator:

* GCN: ``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``
* GIN: ``(1 + eps) I + A``

Graphs are processed in batches: the shift operators of all graphs form one
block-diagonal sparse matrix and the readout is a sparse pooling matrix, so a
full-batch epoch costs a handful of sparse/dense products.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .datasets import ContractError, Graph, GraphDataset

BACKBONES = ("gcn", "gin")


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, graph_id: int, loss: float):
        self.epoch = epoch
        self.graph_id = graph_id
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch} on graph {graph_id}")


# --------------------------------------------------------------------------- #
# Data containers
# --------------------------------------------------------------------------- #


@dataclass
class GnnModel:
    backbone: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gin_eps: list[float]
    head_weight: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ContractError(f"unknown backbone {self.backbone!r}")
        if not self.weights:
            raise ContractError("need at least one message-passing layer")
        if not (len(self.weights) == len(self.biases) == len(self.gin_eps)):
            raise ContractError("weights, biases and gin_eps must have one entry per layer")
        for t in range(1, len(self.weights)):
            if self.weights[t].shape[0] != self.weights[t - 1].shape[1]:
                raise ContractError(f"layer {t} input width does not chain")
        if self.head_weight.shape != (self.head_bias.shape[0], self.weights[-1].shape[1]):
            raise ContractError("head shape does not match the last layer")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views on every trainable array (mutating them mutates the model)."""
        out = {}
        for t, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layers.{t}.weight"] = w
            out[f"layers.{t}.bias"] = b
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        for w, b, e in zip(self.weights, self.biases, self.gin_eps):
            h.update(w.tobytes())
            h.update(b.tobytes())
            h.update(np.float64(e).tobytes())
        return h.hexdigest()

    def copy(self) -> "GnnModel":
        return copy.deepcopy(self)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ContractError("vectors must be an N x d matrix with one row per label")
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if len(self.source_ids) != len(self.labels):
            raise ContractError("source_ids and labels differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("embeddings contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden_dim: int = 32
    num_layers: int = 2
    batch_size: int | None = None  # None -> full batch
    train_backbone: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.hidden_dim < 1 or self.num_layers < 1:
            raise ContractError("invalid TrainConfig")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError("batch_size must be positive")


class GraphBatch:
    """Block-diagonal view of several graphs."""

    def __init__(self, graphs: Sequence[Graph]):
        graphs = list(graphs)
        self.num_graphs = len(graphs)
        sizes = np.array([g.node_count for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n = int(offsets[-1])
        self.num_nodes = n
        if graphs:
            rows = np.concatenate(
                [g.edges[:, 0] + o for g, o in zip(graphs, offsets)] + [np.zeros(0, np.int64)]
            )
            cols = np.concatenate(
                [g.edges[:, 1] + o for g, o in zip(graphs, offsets)] + [np.zeros(0, np.int64)]
            )
            self.features = np.vstack([g.features for g in graphs])
        else:
            rows = cols = np.zeros(0, np.int64)
            self.features = np.zeros((0, 0))
        data = np.ones(2 * len(rows))
        self.adj = sp.csr_matrix(
            (data, (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n)
        )
        graph_of = np.repeat(np.arange(self.num_graphs), sizes)
        self.pool = sp.csr_matrix(
            (np.ones(n), (graph_of, np.arange(n))), shape=(self.num_graphs, n)
        )
        self.labels = np.array([g.label for g in graphs], dtype=np.int64)
        self._gcn = None

    @property
    def gcn_operator(self) -> sp.csr_matrix:
        if self._gcn is None:
            a_tilde = self.adj + sp.identity(self.num_nodes, format="csr")
            deg = np.asarray(a_tilde.sum(axis=1)).ravel()
            dinv = sp.diags(1.0 / np.sqrt(deg))
            self._gcn = (dinv @ a_tilde @ dinv).tocsr()
        return self._gcn


def as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, GraphDataset):
        graphs = graphs.graphs
    if isinstance(graphs, Graph):
        graphs = [graphs]
    return GraphBatch(graphs)


# --------------------------------------------------------------------------- #
# Model construction and the forward pass
# --------------------------------------------------------------------------- #


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(
    backbone: str,
    in_dim: int,
    num_classes: int,
    hidden_dim: int = 32,
    num_layers: int = 2,
    seed: int = 0,
    gin_eps: float = 0.0,
) -> GnnModel:
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden_dim] * num_layers
    weights = [_glorot(rng, dims[t], dims[t + 1]) for t in range(num_layers)]
    biases = [np.zeros(dims[t + 1]) for t in range(num_layers)]
    head = _glorot(rng, hidden_dim, num_classes).T.copy()
    return GnnModel(
        backbone=backbone,
        weights=weights,
        biases=biases,
        gin_eps=[float(gin_eps)] * num_layers,
        head_weight=head,
        head_bias=np.zeros(num_classes),
    )


def _shift(model: GnnModel, batch: GraphBatch, t: int, h: np.ndarray) -> np.ndarray:
    if model.backbone == "gcn":
        return batch.gcn_operator @ h
    return batch.adj @ h + (1.0 + model.gin_eps[t]) * h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: GnnModel, batch: GraphBatch):
    if batch.num_nodes and batch.features.shape[1] != model.in_dim:
        raise ContractError(
            f"feature_dim {batch.features.shape[1]} does not match model input {model.in_dim}"
        )


def _forward_cache(model: GnnModel, batch: GraphBatch) -> dict:
    _check_input(model, batch)
    h = batch.features
    shifted, pre = [], []
    for t, (w, b) in enumerate(zip(model.weights, model.biases)):
        s = _shift(model, batch, t, h)
        z = s @ w + b
        shifted.append(s)
        pre.append(z)
        h = np.maximum(z, 0.0)
    emb = batch.pool @ h
    logits = emb @ model.head_weight.T + model.head_bias
    return {"shifted": shifted, "pre": pre, "embedding": emb, "logits": logits}


def forward(model: GnnModel, graph: Graph):
    """Return ``(embedding, logits, probs)`` for a single graph."""
    cache = _forward_cache(model, as_batch(graph))
    logits = cache["logits"][0]
    return cache["embedding"][0], logits, softmax(logits)


def forward_batch(model: GnnModel, graphs) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and class probabilities for many graphs at once."""
    batch = as_batch(graphs)
    if batch.num_graphs == 0:
        return np.zeros((0, model.embed_dim)), np.zeros((0, model.num_classes))
    cache = _forward_cache(model, batch)
    return cache["embedding"], softmax(cache["logits"])


def predict(model: GnnModel, graphs) -> np.ndarray:
    return forward_batch(model, graphs)[1].argmax(axis=1)


def accuracy(model: GnnModel, graphs) -> float:
    batch = as_batch(graphs)
    if batch.num_graphs == 0:
        return float("nan")
    return float(np.mean(predict(model, batch) == batch.labels))


# --------------------------------------------------------------------------- #
# Loss and gradients
# --------------------------------------------------------------------------- #


def _per_graph_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # log(1 + sum_{j != y} exp(l_j - l_y)), which keeps full relative precision
    # when the true class dominates and the loss is far below one ulp of the logits
    rows = np.arange(len(labels))
    diff = logits - logits[rows, labels][:, None]
    diff[rows, labels] = -np.inf
    top = np.maximum(diff.max(axis=1), 0.0)
    rest = np.exp(diff - top[:, None]).sum(axis=1)
    return np.where(top > 0, top + np.log(np.exp(-top) + rest), np.log1p(rest))


def ce_residual(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``probs - onehot(labels)``, with the true-class entry as minus the other classes' mass."""
    rows = np.arange(len(labels))
    resid = probs.copy()
    resid[rows, labels] = 0.0
    resid[rows, labels] = -resid.sum(axis=1)
    return resid


def batch_loss_and_grad(model: GnnModel, graphs, backbone_grads: bool = True):
    """Mean cross-entropy over a batch and its gradient for every parameter.

    Returns ``(loss, grads, per_graph_losses, probs)`` with ``grads`` keyed like
    :meth:`GnnModel.parameters`.
    """
    batch = as_batch(graphs)
    cache = _forward_cache(model, batch)
    logits, emb = cache["logits"], cache["embedding"]
    n = batch.num_graphs
    losses = _per_graph_losses(logits, batch.labels)
    probs = softmax(logits)

    d_logits = ce_residual(probs, batch.labels) / n
    grads = {
        "head.weight": d_logits.T @ emb,
        "head.bias": d_logits.sum(axis=0),
    }
    if backbone_grads:
        d_h = batch.pool.T @ (d_logits @ model.head_weight)
        for t in reversed(range(model.num_layers)):
            d_z = d_h * (cache["pre"][t] > 0)
            grads[f"layers.{t}.weight"] = cache["shifted"][t].T @ d_z
            grads[f"layers.{t}.bias"] = d_z.sum(axis=0)
            if t > 0:
                # both shift operators are symmetric
                d_h = _shift(model, batch, t, d_z @ model.weights[t].T)
    return float(losses.mean()), grads, losses, probs


def loss_and_grad(model: GnnModel, graph: Graph):
    """Cross-entropy ``-log p[label]`` of one graph and its exact gradient."""
    loss, grads, _, _ = batch_loss_and_grad(model, [graph])
    return loss, grads


def head_loss_and_grad(
    weight: np.ndarray, bias: np.ndarray, vectors: np.ndarray, labels: np.ndarray
):
    logits = vectors @ weight.T + bias
    n = len(labels)
    probs = softmax(logits)
    losses = _per_graph_losses(logits, labels)
    d_logits = ce_residual(probs, labels) / n
    return float(losses.mean()), d_logits.T @ vectors, d_logits.sum(axis=0), losses


# --------------------------------------------------------------------------- #
# Optimisation
# --------------------------------------------------------------------------- #


class Adam:
    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float = float("nan")


def train(
    model: GnnModel,
    graphs,
    config: TrainConfig,
    val_graphs=None,
    augment: Callable[[int], Sequence[Graph]] | None = None,
) -> tuple[GnnModel, list[EpochRecord]]:
    """Train a copy of ``model`` with Adam on the mean cross-entropy.

    Full batch unless ``config.batch_size`` is set, in which case each epoch
    visits the graphs in an order drawn from ``config.seed``. ``augment`` (if
    given) returns extra graphs that join the training set for one epoch.
    The loss and accuracy in the history are measured at the parameters the
    epoch started from.
    """
    graphs = list(graphs.graphs if isinstance(graphs, GraphDataset) else graphs)
    if not graphs:
        raise ContractError("empty training slice")
    model = model.copy()
    params = model.parameters()
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    val_batch = as_batch(val_graphs) if val_graphs else None
    full_batch = as_batch(graphs) if augment is None else None
    history = []
    for epoch in range(config.epochs):
        pool = graphs if augment is None else graphs + list(augment(epoch))
        if config.batch_size is None:
            chunks = [full_batch if full_batch is not None else as_batch(pool)]
        else:
            order = rng.permutation(len(pool))
            chunks = [
                as_batch([pool[i] for i in order[s : s + config.batch_size]])
                for s in range(0, len(pool), config.batch_size)
            ]
        total_loss = correct = seen = 0.0
        for batch in chunks:
            loss, grads, losses, probs = batch_loss_and_grad(
                model, batch, backbone_grads=config.train_backbone
            )
            bad = np.flatnonzero(~np.isfinite(losses))
            if bad.size:
                raise TrainingError(epoch, int(bad[0]), float(losses[bad[0]]))
            opt.step(params, grads)
            total_loss += loss * batch.num_graphs
            correct += float(np.sum(probs.argmax(axis=1) == batch.labels))
            seen += batch.num_graphs
        val_acc = accuracy(model, val_batch) if val_batch is not None else float("nan")
        history.append(EpochRecord(epoch, total_loss / seen, correct / seen, val_acc))
    return model, history


def embed_dataset(model: GnnModel, graphs, source_ids=None) -> EmbeddingSet:
    graphs = list(graphs.graphs if isinstance(graphs, GraphDataset) else graphs)
    ids = np.arange(len(graphs)) if source_ids is None else np.asarray(source_ids)
    if not graphs:
        return EmbeddingSet(np.zeros((0, model.embed_dim)), np.zeros(0, np.int64), ids)
    emb, _ = forward_batch(model, graphs)
    return EmbeddingSet(emb, np.array([g.label for g in graphs]), ids)


def finetune_head(
    model: GnnModel,
    embeddings: EmbeddingSet,
    epochs: int = 100,
    lr: float = 1e-2,
    history: list | None = None,
) -> GnnModel:
    """Train only the linear-softmax head on fixed embeddings (full batch Adam)."""
    if len(embeddings) and embeddings.dim != model.embed_dim:
        raise ContractError("embedding dimension does not match the head")
    model = model.copy()
    if len(embeddings) == 0 or epochs == 0:
        return model
    params = {"head.weight": model.head_weight, "head.bias": model.head_bias}
    opt = Adam(lr)
    for epoch in range(epochs):
        loss, gw, gb, _ = head_loss_and_grad(
            model.head_weight, model.head_bias, embeddings.vectors, embeddings.labels
        )
        if not math.isfinite(loss):
            raise TrainingError(epoch, -1, loss)
        opt.step(params, {"head.weight": gw, "head.bias": gb})
        if history is not None:
            history.append(loss)
    return model


def head_predict(model: GnnModel, vectors: np.ndarray) -> np.ndarray:
    return (vectors @ model.head_weight.T + model.head_bias).argmax(axis=1)


# --------------------------------------------------------------------------- #
# Diagnostics
# --------------------------------------------------------------------------- #


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-12, 1.0)
    return -(probs * np.log(p)).sum(axis=-1)


def saturation_report(model: GnnModel, graphs) -> dict[str, np.ndarray]:
    """Per-graph maximum softmax confidence and predictive entropy."""
    _, probs = forward_batch(model, graphs)
    return {"max_confidence": probs.max(axis=1), "entropy": entropy(probs)}


def gcn_lipschitz_bound(graphs) -> float:
    """``1/delta + 2 M p / delta^(5/2)`` for the GCN shift operator.

    ``delta`` is the smallest self-loop-augmented degree in the slice, ``M`` the
    largest adjacency 1-norm (maximum degree) and ``p`` the largest node count.
    """
    graphs = list(graphs.graphs if isinstance(graphs, GraphDataset) else graphs)
    if not graphs:
        raise ContractError("empty slice")
    delta = min(int(g.degrees().min()) + 1 for g in graphs)
    m = max(int(g.degrees().max()) for g in graphs)
    p = max(g.node_count for g in graphs)
    return 1.0 / delta + 2.0 * m * p / delta**2.5


# --------------------------------------------------------------------------- #
# Serialisation
# --------------------------------------------------------------------------- #


def model_to_dict(model: GnnModel) -> dict:
    tensors = {
        name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        for name, arr in model.parameters().items()
    }
    return {"backbone": model.backbone, "gin_eps": list(model.gin_eps), "tensors": tensors}


def model_from_dict(d: dict) -> GnnModel:
    t = d["tensors"]

    def arr(name):
        return np.array(t[name]["data"], dtype=np.float64).reshape(t[name]["shape"])

    n_layers = len(d["gin_eps"])
    return GnnModel(
        backbone=d["backbone"],
        weights=[arr(f"layers.{i}.weight") for i in range(n_layers)],
        biases=[arr(f"layers.{i}.bias") for i in range(n_layers)],
        gin_eps=[float(e) for e in d["gin_eps"]],
        head_weight=arr("head.weight"),
        head_bias=arr("head.bias"),
    )


def save_model(model: GnnModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True) + "\n")


def load_model(path) -> GnnModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), repr(r.val_acc)])
