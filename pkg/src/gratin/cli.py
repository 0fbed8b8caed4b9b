"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the flat
JSON file given with ``--config``, explicit command-line flags.

Exit codes: 0 success, 2 invalid configuration or usage, 3 dataset ingestion
failure, 4 numerical failure (training, EM or Hessian solve), 5 some folds
failed and the table is partial, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .datasets import ContractError, DatasetError
from .experiment import (
    ExperimentConfig,
    collect_tables,
    data_root_default,
    fold_splits,
    load_dataset,
    run_corruption_experiment,
    run_experiment,
    run_filter_sweep,
    run_influence,
)
from .gmm import GmmInvariantError
from .gnn import TrainingError
from .influence import InfluenceError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4, 5


def _gmm_k(value: str):
    return value if value == "table7" else int(value)


def _bool(value: str) -> bool:
    if value.lower() in ("1", "true", "yes"):
        return True
    if value.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {value}")


FLAG_TYPES = {
    "dataset": str,
    "data_root": str,
    "backbone": str,
    "augmenter": str,
    "epochs": int,
    "learning_rate": float,
    "hidden_dim": int,
    "num_layers": int,
    "batch_size": int,
    "finetune_epochs": int,
    "finetune_lr": float,
    "gmm_k": _gmm_k,
    "samples_per_graph": float,
    "keep_fraction": float,
    "pool_multiplier": float,
    "p": float,
    "r": float,
    "budget": float,
    "per_epoch_augment": _bool,
    "folds": int,
    "fold_limit": int,
    "seed": int,
    "output_dir": str,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON file with ExperimentConfig fields")
    for name, typ in FLAG_TYPES.items():
        parser.add_argument(
            "--" + name.replace("_", "-"), dest=name, type=typ, default=argparse.SUPPRESS
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gratin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in [
        ("prepare", "parse a dataset and write its manifest and fold splits"),
        ("train", "cross-validate with the configured augmenter"),
        ("augment", "cross-validate with GMM augmentation in embedding space"),
        ("influence", "score augmented embeddings by average influence"),
        ("filter-sweep", "accuracy of influence filtering across keep fractions"),
        ("corrupt", "cross-validate with corrupted training structure"),
    ]:
        p = sub.add_parser(verb, help=help_text)
        _add_config_flags(p)
        if verb == "influence":
            p.add_argument("--eval-set", choices=("validation", "test"), default="validation")
            p.add_argument("--bins", type=int, default=30)
        if verb == "filter-sweep":
            p.add_argument("--grid", default="0,0.25,0.5,0.75,1")
    rep = sub.add_parser("report", help="summarise every table under the results directory")
    rep.add_argument("--output-dir", dest="output_dir", default="results")
    return parser


GMM_VERBS = {"augment": "gratin", "influence": "gratin", "filter-sweep": "gratin_fisher"}


def resolve_config(args: argparse.Namespace, overrides: dict | None = None) -> ExperimentConfig:
    """Merge defaults, the JSON file and flags; GMM verbs force a GMM augmenter."""
    values: dict = {"data_root": data_root_default()}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ContractError("config file must hold a flat JSON object")
        values.update(loaded)
    values.update({k: v for k, v in vars(args).items() if k in FLAG_TYPES})
    values.update(overrides or {})
    forced = GMM_VERBS.get(getattr(args, "verb", None))
    if forced and values.get("augmenter") not in ("gratin", "gratin_fisher"):
        values["augmenter"] = forced
        for key in ("p", "r", "per_epoch_augment"):
            values.pop(key, None)
    if forced == "gratin_fisher":
        values["augmenter"] = forced
    return ExperimentConfig.from_dict(values)


def _summary(table, out_dir: Path) -> dict:
    return {
        "config_hash": table.config_hash,
        "seed": table.seed,
        "mean": table.mean,
        "std": table.std,
        "folds": len(table.rows),
        "partial": table.partial,
        "output": str(out_dir),
    }


def _dispatch(args) -> int:
    if args.verb == "report":
        rows = collect_tables(args.output_dir)
        out = Path(args.output_dir) / "summary.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        fields = ["config_hash", "seed", "dataset", "backbone", "augmenter", "budget", "mean", "std", "n_folds", "partial"]
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        for r in rows:
            score = "failed" if r["mean"] is None else f"{100 * r['mean']:.2f} +- {100 * r['std']:.2f}"
            print(
                f"{r['config_hash']}  {r['dataset']:<12} {r['backbone']:<4} {r['augmenter']:<14} "
                f"budget={r['budget']:<4} {score} ({r['n_folds']} folds)"
            )
        return EXIT_OK

    config = resolve_config(args)
    if args.verb == "prepare":
        dataset = load_dataset(config)
        h = config.config_hash({"verb": "prepare"})
        out_dir = Path(config.output_dir) / h
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"config_hash": h, "seed": config.seed, **dataset.manifest()}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        splits = [
            {
                "fold": s.fold_index,
                "train": [int(i) for i in s.train_indices],
                "val": [int(i) for i in s.val_indices],
                "test": [int(i) for i in s.test_indices],
            }
            for s in fold_splits(dataset, config)
        ]
        (out_dir / "folds.json").write_text(
            json.dumps({"config_hash": h, "seed": config.seed, "folds": splits}, sort_keys=True) + "\n"
        )
        print(json.dumps({"config_hash": h, "output": str(out_dir), **dataset.manifest()}, sort_keys=True))
        return EXIT_OK

    if args.verb == "train":
        table = run_experiment(config)
        verb_extra = {"verb": "train"}
    elif args.verb == "augment":
        table = run_experiment(config, verb="augment")
        verb_extra = {"verb": "augment"}
    elif args.verb == "corrupt":
        budget = config.budget if config.budget > 0 else 0.1
        table = run_corruption_experiment(config, budget)
        config = dataclasses.replace(config, budget=budget)
        verb_extra = {"verb": "train"}
    elif args.verb == "influence":
        table, _ = run_influence(config, args.eval_set, args.bins)
        verb_extra = {"verb": "influence", "eval_set": args.eval_set, "bins": args.bins}
    elif args.verb == "filter-sweep":
        try:
            grid = [float(x) for x in args.grid.split(",") if x.strip()]
        except ValueError:
            raise ContractError(f"bad grid {args.grid!r}") from None
        rows, out_dir = run_filter_sweep(config, grid)
        for r in rows:
            print(json.dumps(r, sort_keys=True))
        return EXIT_OK
    else:  # pragma: no cover - argparse restricts verbs
        raise ContractError(args.verb)
    out_dir = Path(config.output_dir) / config.config_hash(verb_extra)
    print(json.dumps(_summary(table, out_dir), sort_keys=True))
    return EXIT_PARTIAL if table.partial else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except ContractError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, GmmInvariantError, InfluenceError) as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
