"""Cross-validated experiment runner and artifact writer.

Randomness: every random stream is derived from the root seed with
``numpy.random.SeedSequence([seed, purpose, fold])`` where ``purpose`` is one
of the integer codes in ``SEED_PURPOSES``. Each component can therefore be
re-run in isolation from ``(seed, purpose, fold)`` alone.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds_mod
from .datasets import ContractError, GraphDataset
from .gnn import (
    TrainConfig,
    accuracy,
    embed_dataset,
    init_model,
    model_to_dict,
    saturation_report,
    train,
)
from .influence import InfluenceReport, average_influence, fisher_filter
from .pipeline import run_gratin, sample_class_gmms

logger = logging.getLogger(__name__)

AUGMENTERS = ("none", "gratin", "gratin_fisher", "dropedge", "dropnode", "config_model")
BACKBONES = ("gcn", "gin")

SEED_PURPOSES = {"folds": 0, "init": 1, "shuffle": 2, "augment": 3, "gmm": 4, "corrupt": 5}

# per-backbone GMM component counts for the benchmark datasets
TUNED_K = {
    "gcn": {"IMDB-BINARY": 40, "IMDB-MULTI": 50, "MUTAG": 10, "PROTEINS": 10, "DD": 2},
    "gin": {"IMDB-BINARY": 50, "IMDB-MULTI": 5, "MUTAG": 2, "PROTEINS": 2, "DD": 50},
}
FALLBACK_K = 5

# augmenter -> parameters it consumes, with defaults
AUGMENTER_PARAMS = {
    "none": {},
    "gratin": {"gmm_k": "table7", "samples_per_graph": 1.0},
    "gratin_fisher": {
        "gmm_k": "table7",
        "samples_per_graph": 1.0,
        "keep_fraction": 0.5,
        "pool_multiplier": 4.0,
    },
    "dropedge": {"p": 0.2},
    "dropnode": {"p": 0.2},
    "config_model": {"r": 0.2},
}
OPTIONAL_PARAMS = ("gmm_k", "samples_per_graph", "keep_fraction", "pool_multiplier", "p", "r")

# fields that do not change results and stay out of the hash
NON_SEMANTIC = ("data_root", "output_dir")


class MissingReportError(LookupError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no {name} report available")


def derive_seed(seed: int, purpose: str, fold: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), SEED_PURPOSES[purpose], int(fold)])
    return int(ss.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    dataset: str = "MUTAG"
    data_root: str = "data"
    backbone: str = "gcn"
    augmenter: str = "none"
    epochs: int = 300
    learning_rate: float = 1e-2
    hidden_dim: int = 32
    num_layers: int = 2
    batch_size: int | None = None
    finetune_epochs: int = 100
    finetune_lr: float = 1e-2
    gmm_k: int | str | None = None
    samples_per_graph: float | None = None
    keep_fraction: float | None = None
    pool_multiplier: float | None = None
    p: float | None = None
    r: float | None = None
    budget: float = 0.0
    per_epoch_augment: bool = False
    folds: int = 10
    fold_limit: int | None = None
    seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ContractError(f"unknown backbone {self.backbone!r}")
        if self.augmenter not in AUGMENTERS:
            raise ContractError(f"unknown augmenter {self.augmenter!r}")
        needed = AUGMENTER_PARAMS[self.augmenter]
        for name in OPTIONAL_PARAMS:
            value = getattr(self, name)
            if name in needed:
                if value is None:
                    setattr(self, name, needed[name])
            elif value is not None:
                raise ContractError(f"{name} is not used by augmenter {self.augmenter!r}")
        if self.per_epoch_augment and self.augmenter not in ("dropedge", "dropnode", "config_model"):
            raise ContractError("per_epoch_augment applies to structural augmenters only")
        if isinstance(self.gmm_k, str) and self.gmm_k != "table7":
            self.gmm_k = int(self.gmm_k)
        if not 0.0 <= self.budget < 1.0:
            raise ContractError("budget must lie in [0, 1)")
        if self.folds < 1:
            raise ContractError("folds must be at least 1")
        for name in ("p", "r", "keep_fraction"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.augmenter == "dropnode" and self.p >= 1.0:
            raise ContractError("dropnode needs p < 1")

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def semantic_dict(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in NON_SEMANTIC}

    def config_hash(self, extra: dict | None = None) -> str:
        payload = self.semantic_dict()
        if extra:
            payload = {**payload, "_extra": extra}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def train_config(self, fold: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            batch_size=self.batch_size,
            seed=derive_seed(self.seed, "shuffle", fold),
        )

    def components(self, num_classes: int) -> int:
        if self.gmm_k == "table7":
            return TUNED_K[self.backbone].get(self.dataset, FALLBACK_K)
        return int(self.gmm_k)


@dataclass
class ResultTable:
    config_hash: str
    seed: int
    config: dict
    rows: list[dict] = field(default_factory=list)
    budget: float = 0.0
    timings: list[dict] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r["test_acc"] for r in self.rows if r["status"] == "ok"])

    @property
    def mean(self) -> float:
        acc = self.accuracies
        return float(acc.mean()) if acc.size else float("nan")

    @property
    def std(self) -> float:
        acc = self.accuracies
        return float(acc.std()) if acc.size else float("nan")

    @property
    def partial(self) -> bool:
        return any(r["status"] != "ok" for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": self.config,
            "budget": self.budget,
            "rows": self.rows,
            # strict JSON has no NaN; an all-failed table reports null
            "mean": None if np.isnan(self.mean) else self.mean,
            "std": None if np.isnan(self.std) else self.std,
            "partial": self.partial,
        }

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out_dir / "table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "seed", "fold", "status", "test_acc", "error"])
            for r in self.rows:
                w.writerow(
                    [self.config_hash, self.seed, r["fold"], r["status"], r["test_acc"], r.get("error", "")]
                )
        (out_dir / "timings.json").write_text(
            json.dumps({"config_hash": self.config_hash, "seed": self.seed, "timings": self.timings}, indent=2)
            + "\n"
        )


@dataclass
class RunArtifacts:
    """In-memory reports gathered during a run, turned into CSVs by ``emit_figures``."""

    config_hash: str
    seed: int
    saturation: dict[int, dict] = field(default_factory=dict)
    influence: dict[int, InfluenceReport] = field(default_factory=dict)
    filter_sweep: list[dict] = field(default_factory=list)
    num_classes: int = 2


# --------------------------------------------------------------------------- #
# Data
# --------------------------------------------------------------------------- #


def load_dataset(config: ExperimentConfig) -> GraphDataset:
    """Parse ``<data_root>/<dataset>`` and synthesise degree features when none exist.

    The degree cap is the maximum degree over the whole dataset so every fold
    shares one feature dimension.
    """
    root = Path(config.data_root) / config.dataset
    dataset = ds_mod.parse_tud_dataset(root, config.dataset)
    if dataset.feature_dim == 0:
        dataset = ds_mod.degree_onehot_features(dataset, max(1, ds_mod.max_degree(dataset)))
    return dataset


def fold_splits(dataset: GraphDataset, config: ExperimentConfig) -> list[ds_mod.FoldSplit]:
    # a single fold is the first split of the default ten-way partition
    k = config.folds if config.folds >= 2 else 10
    splits = ds_mod.make_folds(dataset, k, derive_seed(config.seed, "folds"))
    if config.folds == 1:
        splits = splits[:1]
    if config.fold_limit is not None:
        splits = splits[: config.fold_limit]
    return splits


def _structural(config: ExperimentConfig):
    if config.augmenter == "dropedge":
        return lambda g, rng: ds_mod.drop_edge(g, config.p, rng)
    if config.augmenter == "dropnode":
        return lambda g, rng: ds_mod.drop_node(g, config.p, rng)
    if config.augmenter == "config_model":
        return lambda g, rng: ds_mod.configuration_rewire(g, config.r, rng)
    return None


# --------------------------------------------------------------------------- #
# One fold
# --------------------------------------------------------------------------- #


@dataclass
class FoldOutcome:
    row: dict
    model: object = None
    timings: list[dict] = field(default_factory=list)
    saturation: dict | None = None
    influence: InfluenceReport | None = None
    gratin_report: dict | None = None
    corruption: list[dict] | None = None


def train_backbone(config, dataset, train_graphs, val_graphs, fold):
    model = init_model(
        config.backbone,
        dataset.feature_dim,
        dataset.num_classes,
        config.hidden_dim,
        config.num_layers,
        seed=derive_seed(config.seed, "init", fold),
    )
    augment_fn = _structural(config)
    tcfg = config.train_config(fold)
    if augment_fn is None:
        return train(model, train_graphs, tcfg, val_graphs)[0]
    rng = np.random.default_rng(derive_seed(config.seed, "augment", fold))
    if config.per_epoch_augment:
        fresh = lambda epoch: [augment_fn(g, rng) for g in train_graphs]  # noqa: E731
        return train(model, train_graphs, tcfg, val_graphs, augment=fresh)[0]
    extra = [augment_fn(g, rng) for g in train_graphs]
    return train(model, list(train_graphs) + extra, tcfg, val_graphs)[0]


def run_fold(
    config: ExperimentConfig,
    dataset: GraphDataset,
    split: ds_mod.FoldSplit,
    influence_eval: str | None = None,
) -> FoldOutcome:
    fold = split.fold_index
    timings: list[dict] = []
    t0 = time.perf_counter()
    train_g = [dataset.graphs[i] for i in split.train_indices]
    val_g = [dataset.graphs[i] for i in split.val_indices]
    test_g = [dataset.graphs[i] for i in split.test_indices]
    corruption = None
    if config.budget > 0:
        rng = np.random.default_rng(derive_seed(config.seed, "corrupt", fold))
        corrupted, records = ds_mod.corrupt_structure(dataset.subset(split.train_indices), config.budget, rng)
        train_g = corrupted.graphs
        corruption = [
            {"fold": fold, "graph_index": int(i), "removed": rec.removed, "added": rec.added}
            for i, rec in zip(split.train_indices, records)
        ]
    model = train_backbone(config, dataset, train_g, val_g, fold)
    timings.append({"fold": fold, "phase": "train", "seconds": time.perf_counter() - t0})

    gratin_report = None
    batch = None
    gmm_seed = derive_seed(config.seed, "gmm", fold)
    k = config.components(dataset.num_classes) if config.gmm_k is not None else None
    if config.augmenter == "gratin":
        model, batch, rep = run_gratin(
            model,
            train_g,
            samples_per_graph=config.samples_per_graph,
            seed=gmm_seed,
            gmm_components=k,
            num_classes=dataset.num_classes,
            finetune_epochs=config.finetune_epochs,
            learning_rate=config.finetune_lr,
        )
        for t in rep.timings:
            timings.append({"fold": fold, **t})
        rep.timings = []
        gratin_report = rep.to_dict()
    elif config.augmenter == "gratin_fisher":
        t1 = time.perf_counter()
        train_emb = embed_dataset(model, train_g)
        pool, _, _ = sample_class_gmms(
            train_emb,
            dataset.num_classes,
            config.samples_per_graph * config.pool_multiplier,
            k,
            seed=gmm_seed,
        )
        val_emb = embed_dataset(model, val_g)
        batch, model, _ = fisher_filter(
            model,
            train_emb,
            pool,
            val_emb,
            config.keep_fraction,
            config.finetune_epochs,
            config.finetune_lr,
        )
        timings.append({"fold": fold, "phase": "augment_filter", "seconds": time.perf_counter() - t1})

    influence = None
    if influence_eval is not None:
        if batch is None:
            raise ContractError("influence analysis needs a GMM augmenter")
        eval_graphs = val_g if influence_eval == "validation" else test_g
        influence = average_influence(
            model,
            embed_dataset(model, train_g),
            batch,
            embed_dataset(model, eval_graphs),
            eval_set=influence_eval,
        )
    acc = accuracy(model, test_g)
    sat = saturation_report(model, test_g)
    return FoldOutcome(
        row={"fold": fold, "status": "ok", "test_acc": acc},
        model=model,
        timings=timings,
        saturation={
            "graph_index": [int(i) for i in split.test_indices],
            "max_confidence": sat["max_confidence"].tolist(),
            "entropy": sat["entropy"].tolist(),
        },
        influence=influence,
        gratin_report=gratin_report,
        corruption=corruption,
    )


# --------------------------------------------------------------------------- #
# Experiments
# --------------------------------------------------------------------------- #

ERRORS_CAUGHT_PER_FOLD = (RuntimeError, ValueError, ArithmeticError, np.linalg.LinAlgError)


def _run(config, verb, extra=None, influence_eval=None, dataset=None):
    dataset = dataset if dataset is not None else load_dataset(config)
    h = config.config_hash({"verb": verb, **(extra or {})})
    out_dir = Path(config.output_dir) / h
    table = ResultTable(h, config.seed, config.semantic_dict(), budget=config.budget)
    arts = RunArtifacts(h, config.seed, num_classes=dataset.num_classes)
    models_dir = out_dir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    reports, corruption = [], []
    for split in fold_splits(dataset, config):
        try:
            outcome = run_fold(config, dataset, split, influence_eval)
        except ERRORS_CAUGHT_PER_FOLD as exc:
            logger.error("fold %d failed: %s", split.fold_index, exc)
            table.rows.append(
                {
                    "fold": split.fold_index,
                    "status": "failed",
                    "test_acc": None,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
            continue
        table.rows.append(outcome.row)
        table.timings.extend(outcome.timings)
        arts.saturation[split.fold_index] = outcome.saturation
        if outcome.influence is not None:
            arts.influence[split.fold_index] = outcome.influence
        if outcome.gratin_report is not None:
            reports.append({"fold": split.fold_index, **outcome.gratin_report})
        if outcome.corruption is not None:
            corruption.extend(outcome.corruption)
        _write_json(
            models_dir / f"fold{split.fold_index}.json",
            {"config_hash": h, "seed": config.seed, "fold": split.fold_index, "model": model_to_dict(outcome.model)},
        )
    table.write(out_dir)
    if reports:
        _write_json(out_dir / "gratin_report.json", {"config_hash": h, "seed": config.seed, "folds": reports})
    if config.budget > 0:
        _write_json(
            out_dir / "corruption_manifest.json",
            {"config_hash": h, "seed": config.seed, "budget": config.budget, "edits": corruption},
        )
    return table, arts, out_dir


def run_experiment(config: ExperimentConfig, verb: str = "train", dataset=None) -> ResultTable:
    """Cross-validate the configured backbone and augmenter and write the artifacts.

    A fold that raises is recorded as a failure row and the table is flagged
    partial; the remaining folds still run.
    """
    table, arts, out_dir = _run(config, verb, dataset=dataset)
    _emit_available(arts, out_dir / "figures", ("saturation",))
    return table


def _emit_available(arts: RunArtifacts, figures_dir: Path, kinds, **kw) -> None:
    # failed folds leave no reports; emit whatever the successful folds produced
    present = [k for k in kinds if getattr(arts, k)]
    if present:
        emit_figures(arts, figures_dir, kinds=present, **kw)


def run_corruption_experiment(config: ExperimentConfig, budget: float, dataset=None) -> ResultTable:
    """``run_experiment`` with the training graphs of every fold corrupted at ``budget``."""
    cfg = dataclasses.replace(config, budget=budget)
    table, arts, out_dir = _run(cfg, "train", dataset=dataset)
    _emit_available(arts, out_dir / "figures", ("saturation",))
    return table


def run_influence(config: ExperimentConfig, eval_set: str = "validation", bins: int = 30, dataset=None):
    if eval_set not in ("validation", "test"):
        raise ContractError("eval_set must be 'validation' or 'test'")
    if config.augmenter not in ("gratin", "gratin_fisher"):
        raise ContractError("influence analysis needs a GMM augmenter")
    table, arts, out_dir = _run(
        config, "influence", {"eval_set": eval_set, "bins": bins}, influence_eval=eval_set, dataset=dataset
    )
    _emit_available(arts, out_dir / "figures", ("saturation", "influence"), bins=bins)
    return table, arts


def run_filter_sweep(
    config: ExperimentConfig, grid=(0.0, 0.25, 0.5, 0.75, 1.0), dataset=None
) -> tuple[list[dict], Path]:
    """Test accuracy of Fisher-filtered fine-tuning for every keep fraction in ``grid``.

    The backbone and the candidate pool are built once per fold and shared by
    all grid points.
    """
    if config.augmenter != "gratin_fisher":
        raise ContractError("the filter sweep needs the gratin_fisher augmenter")
    grid = [float(g) for g in grid]
    dataset = dataset if dataset is not None else load_dataset(config)
    h = config.config_hash({"verb": "filter-sweep", "grid": grid})
    out_dir = Path(config.output_dir) / h
    per_fraction: dict[float, list[float]] = {g: [] for g in grid}
    for split in fold_splits(dataset, config):
        fold = split.fold_index
        train_g = [dataset.graphs[i] for i in split.train_indices]
        val_g = [dataset.graphs[i] for i in split.val_indices]
        test_g = [dataset.graphs[i] for i in split.test_indices]
        model = train_backbone(config, dataset, train_g, val_g, fold)
        train_emb = embed_dataset(model, train_g)
        val_emb = embed_dataset(model, val_g)
        pool, _, _ = sample_class_gmms(
            train_emb,
            dataset.num_classes,
            config.samples_per_graph * config.pool_multiplier,
            config.components(dataset.num_classes),
            seed=derive_seed(config.seed, "gmm", fold),
        )
        for g in grid:
            _, tuned, _ = fisher_filter(
                model, train_emb, pool, val_emb, g, config.finetune_epochs, config.finetune_lr
            )
            per_fraction[g].append(accuracy(tuned, test_g))
    rows = [
        {
            "keep_fraction": g,
            "mean_acc": float(np.mean(per_fraction[g])),
            "std_acc": float(np.std(per_fraction[g])),
            "n_folds": len(per_fraction[g]),
        }
        for g in grid
    ]
    arts = RunArtifacts(h, config.seed, filter_sweep=rows)
    emit_figures(arts, out_dir / "figures", kinds=("filter_sweep",))
    _write_json(out_dir / "sweep.json", {"config_hash": h, "seed": config.seed, "config": config.semantic_dict(), "rows": rows})
    return rows, out_dir


# --------------------------------------------------------------------------- #
# Figures
# --------------------------------------------------------------------------- #


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def emit_figures(
    artifacts: RunArtifacts,
    figures_dir,
    kinds=("saturation", "influence", "filter_sweep"),
    bins: int = 30,
) -> list[Path]:
    """Write plot-ready CSVs.

    ``saturation.csv``: config_hash, seed, fold, graph_index, max_confidence, entropy.
    ``influence_fold<k>.csv``: config_hash, seed, fold, sample_id, class, score, rank.
    ``influence_hist_fold<k>.csv``: config_hash, seed, fold, bin_left, bin_right, count.
    ``filter_sweep.csv``: config_hash, seed, keep_fraction, mean_acc, std_acc, n_folds.
    """
    figures_dir = Path(figures_dir)
    figures_dir.mkdir(parents=True, exist_ok=True)
    tag = [artifacts.config_hash, artifacts.seed]
    written = []
    for kind in kinds:
        if kind == "saturation":
            if not artifacts.saturation:
                raise MissingReportError("saturation")
            path = figures_dir / "saturation.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["config_hash", "seed", "fold", "graph_index", "max_confidence", "entropy"])
                for fold, sat in sorted(artifacts.saturation.items()):
                    for gi, mc, en in zip(sat["graph_index"], sat["max_confidence"], sat["entropy"]):
                        w.writerow(tag + [fold, gi, repr(mc), repr(en)])
            written.append(path)
        elif kind == "influence":
            if not artifacts.influence:
                raise MissingReportError("influence")
            for fold, rep in sorted(artifacts.influence.items()):
                rank = np.empty(len(rep.ranking), dtype=np.int64)
                rank[rep.ranking] = np.arange(len(rep.ranking))
                path = figures_dir / f"influence_fold{fold}.csv"
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["config_hash", "seed", "fold", "sample_id", "class", "score", "rank"])
                    for i, (c, s) in enumerate(zip(rep.labels, rep.scores)):
                        w.writerow(tag + [fold, i, int(c), repr(float(s)), int(rank[i])])
                written.append(path)
                counts, edges = rep.histogram(bins)
                hpath = figures_dir / f"influence_hist_fold{fold}.csv"
                with open(hpath, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["config_hash", "seed", "fold", "bin_left", "bin_right", "count"])
                    for b in range(len(counts)):
                        w.writerow(tag + [fold, repr(float(edges[b])), repr(float(edges[b + 1])), int(counts[b])])
                written.append(hpath)
                _write_json(
                    figures_dir / f"influence_fold{fold}.json",
                    {"config_hash": artifacts.config_hash, "seed": artifacts.seed, "fold": fold, **rep.header()},
                )
        elif kind == "filter_sweep":
            if not artifacts.filter_sweep:
                raise MissingReportError("filter_sweep")
            path = figures_dir / "filter_sweep.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["config_hash", "seed", "keep_fraction", "mean_acc", "std_acc", "n_folds"])
                for r in artifacts.filter_sweep:
                    w.writerow(tag + [r["keep_fraction"], repr(r["mean_acc"]), repr(r["std_acc"]), r["n_folds"]])
            written.append(path)
        else:
            raise ContractError(f"unknown figure kind {kind!r}")
    return written


def collect_tables(results_dir) -> list[dict]:
    """Summaries of every ``table.json`` below ``results_dir``, sorted by hash."""
    rows = []
    for path in sorted(Path(results_dir).glob("*/table.json")):
        t = json.loads(path.read_text())
        cfg = t["config"]
        rows.append(
            {
                "config_hash": t["config_hash"],
                "seed": t["seed"],
                "dataset": cfg["dataset"],
                "backbone": cfg["backbone"],
                "augmenter": cfg["augmenter"],
                "budget": t.get("budget", 0.0),
                "mean": t["mean"],
                "std": t["std"],
                "n_folds": sum(1 for r in t["rows"] if r["status"] == "ok"),
                "partial": t["partial"],
            }
        )
    return rows


def data_root_default() -> str:
    return os.environ.get("GRATIN_DATA_ROOT", "data")
