"""Embedding-space augmentation with class-conditional Gaussian mixtures.

The trained message-passing layers map every training graph to its readout
vector; one mixture per class is fitted to those vectors, sampled, and the
linear-softmax head is fine-tuned on the union of real and sampled vectors.
The message-passing weights are never touched.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import gmm as gmm_mod
from .datasets import ContractError
from .gnn import EmbeddingSet, GnnModel, embed_dataset, finetune_head

logger = logging.getLogger(__name__)


@dataclass
class AugmentationBatch:
    vectors: np.ndarray
    labels: np.ndarray
    origin_class_counts: list[int]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ContractError("vectors must be an M x d matrix with one row per label")
        if np.any(self.labels < 0) or np.any(self.labels >= len(self.origin_class_counts)):
            raise ContractError("label outside the class range")
        if sum(self.origin_class_counts) != len(self.labels):
            raise ContractError("class counts do not add up to the number of samples")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "AugmentationBatch":
        idx = np.asarray(indices, dtype=np.int64)
        labels = self.labels[idx]
        counts = np.bincount(labels, minlength=len(self.origin_class_counts)).tolist()
        return AugmentationBatch(self.vectors[idx], labels, counts)

    def as_embeddings(self) -> EmbeddingSet:
        return EmbeddingSet(self.vectors, self.labels, -1 - np.arange(len(self.labels)))


class TimingProbe:
    """Collects ``(phase, seconds)`` rows from wall-clock bracketed sections."""

    def __init__(self):
        self.rows: list[tuple[str, float]] = []

    @contextmanager
    def section(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.rows.append((name, time.perf_counter() - start))

    def as_list(self) -> list[dict]:
        return [{"phase": p, "seconds": s} for p, s in self.rows]


def timing_probe(probe: TimingProbe, section: str):
    return probe.section(section)


@dataclass
class GratinReport:
    per_class: list[dict] = field(default_factory=list)
    mean_dev: float = 0.0
    sup_dev: float = 0.0
    sup_exact: bool = True
    timings: list[dict] = field(default_factory=list)
    gmms: dict[int, dict] = field(default_factory=dict)

    def to_dict(self, include_gmms: bool = True) -> dict:
        out = {
            "per_class": self.per_class,
            "mean_dev": self.mean_dev,
            "sup_dev": self.sup_dev,
            "sup_exact": self.sup_exact,
            "timings": self.timings,
        }
        if include_gmms:
            out["gmms"] = {str(c): g for c, g in sorted(self.gmms.items())}
        return out


def _class_seed(seed: int, cls: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, cls, purpose]).generate_state(1)[0])


def _components_for(gmm_components, cls: int) -> int:
    if isinstance(gmm_components, Mapping):
        return int(gmm_components[cls])
    if isinstance(gmm_components, Sequence) and not isinstance(gmm_components, str):
        return int(gmm_components[cls])
    return int(gmm_components)


def sample_class_gmms(
    embeddings: EmbeddingSet,
    num_classes: int,
    samples_per_graph: float,
    gmm_components=5,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-3,
) -> tuple[AugmentationBatch, dict[int, gmm_mod.GmmModel], list[dict]]:
    """Fit one mixture per class and draw ``samples_per_graph * |class|`` vectors from it."""
    vectors, labels, counts, gmms, per_class = [], [], [], {}, []
    for c in range(num_classes):
        rows = embeddings.vectors[embeddings.labels == c]
        n_c = len(rows)
        n_samples = int(round(samples_per_graph * n_c))
        if n_c == 0:
            counts.append(0)
            per_class.append({"class": c, "K": 0, "n": 0, "loglik": None, "samples": 0})
            continue
        k = _components_for(gmm_components, c)
        if k > n_c:
            logger.warning("class %d has %d embeddings; reducing K from %d", c, n_c, k)
            k = n_c
        model = gmm_mod.fit_em(rows, k, seed=_class_seed(seed, c, 0), max_iter=max_iter, tol=tol)
        drawn = gmm_mod.sample(model, n_samples, seed=_class_seed(seed, c, 1))
        gmms[c] = model
        vectors.append(drawn)
        labels.append(np.full(n_samples, c, dtype=np.int64))
        counts.append(n_samples)
        per_class.append(
            {
                "class": c,
                "K": k,
                "n": n_c,
                "loglik": float(gmm_mod.gmm_logpdf_many(model, rows).mean()),
                "samples": n_samples,
            }
        )
    dim = embeddings.dim
    batch = AugmentationBatch(
        np.vstack(vectors) if vectors else np.zeros((0, dim)),
        np.concatenate(labels) if labels else np.zeros(0, np.int64),
        counts,
    )
    return batch, gmms, per_class


def merge_embeddings(original: EmbeddingSet, batch: AugmentationBatch) -> EmbeddingSet:
    if len(batch) == 0:
        return original
    return EmbeddingSet(
        np.vstack([original.vectors, batch.vectors]),
        np.concatenate([original.labels, batch.labels]),
        np.concatenate([original.source_ids, -1 - np.arange(len(batch))]),
    )


@dataclass
class DeviationResult:
    mean_dev: float
    sup_dev: float
    sup_exact: bool


def embedding_deviation(
    originals,
    augmented,
    pairs: int = 10_000,
    seed: int = 0,
    exhaustive_limit: int = 4_000_000,
) -> DeviationResult:
    """Expected and worst-case Euclidean distance between original and augmented vectors.

    The mean is a Monte Carlo estimate over ``pairs`` independent uniform draws
    of one original and one augmented vector. The supremum is an exact scan
    when the product of the set sizes is at most ``exhaustive_limit``,
    otherwise the maximum over the sampled pairs (``sup_exact=False``).
    """
    h = originals.vectors if isinstance(originals, EmbeddingSet) else np.asarray(originals)
    a = augmented.vectors if isinstance(augmented, AugmentationBatch) else np.asarray(augmented)
    h = np.atleast_2d(h)
    a = np.atleast_2d(a)
    if len(h) == 0 or len(a) == 0:
        return DeviationResult(0.0, 0.0, True)
    if h.shape[1] != a.shape[1]:
        raise ContractError("dimension mismatch")
    rng = np.random.default_rng(seed)
    i = rng.integers(len(h), size=pairs)
    j = rng.integers(len(a), size=pairs)
    dists = np.linalg.norm(h[i] - a[j], axis=1)
    mean_dev = float(dists.mean())
    if len(h) * len(a) <= exhaustive_limit:
        sup = 0.0
        for start in range(0, len(h), 256):
            block = h[start : start + 256]
            d2 = (
                (block**2).sum(1)[:, None] + (a**2).sum(1)[None, :] - 2.0 * block @ a.T
            )
            sup = max(sup, float(np.sqrt(max(d2.max(), 0.0))))
        # the expansion above can lose a few ulps against the direct difference
        return DeviationResult(mean_dev, max(sup, float(dists.max())), True)
    return DeviationResult(mean_dev, float(dists.max()), False)


def run_gratin(
    model: GnnModel,
    train_graphs,
    samples_per_graph: float = 1.0,
    seed: int = 0,
    gmm_components=5,
    num_classes: int | None = None,
    finetune_epochs: int = 100,
    learning_rate: float = 1e-2,
    em_max_iter: int = 100,
    em_tol: float = 1e-3,
    deviation_pairs: int = 10_000,
) -> tuple[GnnModel, AugmentationBatch, GratinReport]:
    """Augment a trained model's training set in embedding space and refit its head.

    ``model`` must already be trained on ``train_graphs``. Returns the model
    with the fine-tuned head, the sampled batch and a report with per-class
    mixture fits, deviation diagnostics and phase timings.
    """
    num_classes = num_classes or model.num_classes
    probe = TimingProbe()
    with probe.section("embed"):
        embeddings = embed_dataset(model, train_graphs)
    with probe.section("augment"):
        batch, gmms, per_class = sample_class_gmms(
            embeddings,
            num_classes,
            samples_per_graph,
            gmm_components,
            seed=seed,
            max_iter=em_max_iter,
            tol=em_tol,
        )
    with probe.section("finetune"):
        tuned = finetune_head(
            model, merge_embeddings(embeddings, batch), finetune_epochs, learning_rate
        )
    dev = embedding_deviation(embeddings, batch, pairs=deviation_pairs, seed=seed)
    report = GratinReport(
        per_class=per_class,
        mean_dev=dev.mean_dev,
        sup_dev=dev.sup_dev,
        sup_exact=dev.sup_exact,
        timings=probe.as_list(),
        gmms={c: g.to_dict() for c, g in gmms.items()},
    )
    return tuned, batch, report
