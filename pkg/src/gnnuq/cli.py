"""``gnnuq`` command line: split, search, posttrain, predict, evaluate, baseline, space.

Every flag can also be given in a JSON file passed with ``--config``; keys
are the flag names with dashes replaced by underscores, and flags given on
the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import uq
from .archspace import DEFAULT_SPACE, cardinality
from .errors import GnnuqError
from .evolver import (INIT, SHUFFLE, SearchConfig, TrainingEvaluator, load_catalog,
                      random_baseline, run_search, select_top_k)
from .molgraph import Dataset, Split, SplitSpec, TargetScaler, load_dataset, split_dataset
from .mpnn import instantiate, load_model, save_model
from .rng import derive_seed
from .trainer import TrainConfig, TrainData, mc_dropout_predict, predict_store, train

logger = logging.getLogger("gnnuq")

SPLITS = ("train", "val", "test")


class CliError(GnnuqError):
    pass


# ---------------------------------------------------------------------------
# shared pipeline pieces


@dataclass
class Prepared:
    dataset: Dataset
    split: Split
    scaler: TargetScaler
    data: dict  # split name -> TrainData (standardized targets)


def prepare(data_path, smiles_column: str, target_column: str, splits_path) -> Prepared:
    ds = load_dataset(data_path, smiles_column, target_column)
    split = Split.from_json(Path(splits_path).read_text())
    n = len(ds)
    for name in SPLITS:
        if any(not 0 <= i < n for i in split[name]):
            raise CliError(f"split {name!r} indexes past the {n} usable rows of {data_path}")
    store = ds.graphs()
    scaler = TargetScaler.fit(ds.y[split.train])
    data = {name: TrainData(store.subset(split[name]), scaler.apply(ds.y[split[name]]))
            for name in SPLITS}
    return Prepared(ds, split, scaler, data)


def train_genome(prep: Prepared, genome, cfg: TrainConfig, init_seed: int):
    ds = prep.dataset
    model = instantiate(DEFAULT_SPACE, genome, ds.n_max, ds.e_max, init_seed=init_seed)
    return train(model, prep.data["train"], prep.data["val"], cfg)


def _model_paths(spec) -> list[Path]:
    paths = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.guqw")))
        else:
            paths.append(p)
    if not paths:
        raise CliError(f"no checkpoints found in {list(map(str, spec))}")
    for p in paths:
        if not p.exists():
            raise CliError(f"missing checkpoint {p}")
    return paths


def _indices(prep: Prepared, split: str) -> list[int]:
    return list(range(len(prep.dataset))) if split == "all" else prep.split[split]


def predict_members(models, prep: Prepared, split: str) -> uq.PredictionSet:
    idx = _indices(prep, split)
    store = prep.dataset.graphs().subset(idx)
    members, ids = [], []
    for path, (model, scaler) in models:
        if model.n_max != store.n_max or model.e_max != store.e_max:
            raise CliError(f"{path}: model padded to ({model.n_max}, {model.e_max}), "
                           f"data needs ({store.n_max}, {store.e_max})")
        members.append(predict_store(model, store, scaler or prep.scaler))
        ids.append(Path(path).stem)
    return uq.PredictionSet.stack(members, ids)


# ---------------------------------------------------------------------------
# commands


def cmd_split(args) -> None:
    ds = load_dataset(args.data, args.smiles_column, args.target_column)
    split = split_dataset(ds, SplitSpec(_ratios(args.ratios), args.seed))
    Path(args.out).write_text(split.to_json() + "\n")
    print(f"{len(split.train)} train, {len(split.val)} val, {len(split.test)} test -> {args.out}")


def _train_config(args, **over) -> TrainConfig:
    kw = dict(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)
    kw.update(over)
    return TrainConfig(**kw)


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("GNNUQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"GNNUQ_THREADS={env!r} is not an integer") from None
    return 1


def cmd_search(args) -> None:
    prep = prepare(args.data, args.smiles_column, args.target_column, args.splits)
    cfg = SearchConfig(args.evals, args.population, args.sample, _workers(args),
                       _train_config(args), args.seed)
    ds = prep.dataset
    evaluator = TrainingEvaluator(DEFAULT_SPACE, prep.data["train"], prep.data["val"],
                                  ds.n_max, ds.e_max, cfg.train)
    rewards = []

    def report(rec, state):
        rewards.append(-rec.val_nll if not rec.failed else math.nan)
        if len(state.records) % 10 == 0:
            window = [r for r in rewards[-10:] if math.isfinite(r)]
            mean = sum(window) / len(window) if window else math.nan
            print(f"evals {len(state.records):5d}  mean reward (last 10) {mean:.4f}", flush=True)

    records = run_search(DEFAULT_SPACE, evaluator, cfg, args.catalog, on_record=report)
    best = min(records, key=lambda r: (r.val_nll, r.eval_id))
    print(f"{len(records)} records in {args.catalog}; best eval {best.eval_id} val_nll {best.val_nll:.4f}")


def _save_trained(out_dir: Path, name: str, model, hist, scaler) -> None:
    save_model(out_dir / f"{name}.guqw", model, scaler)
    hist.write_csv(out_dir / f"{name}.history.csv")


def cmd_posttrain(args) -> None:
    prep = prepare(args.data, args.smiles_column, args.target_column, args.splits)
    records = load_catalog(args.catalog, DEFAULT_SPACE)
    if not records:
        raise CliError(f"catalog {args.catalog} is empty or missing")
    top = select_top_k(records, args.top_k)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rank, rec in enumerate(top):
        seed = derive_seed(args.seed, rec.eval_id)
        cfg = _train_config(args, seed=derive_seed(seed, SHUFFLE), keep_best_on_val=args.keep_best)
        model, hist = train_genome(prep, rec.genome, cfg, derive_seed(seed, INIT))
        _save_trained(out, f"model_{rank:02d}", model, hist, prep.scaler)
        print(f"model_{rank:02d}: eval {rec.eval_id} search val_nll {rec.val_nll:.4f} "
              f"-> best val_nll {hist.best_val_nll:.4f}", flush=True)


def cmd_predict(args) -> None:
    prep = prepare(args.data, args.smiles_column, args.target_column, args.splits)
    models = []
    for p in _model_paths(args.models):
        models.append((p, load_model(p, DEFAULT_SPACE)))
    preds = predict_members(models, prep, args.split)
    idx = _indices(prep, args.split)
    uq.write_predictions(args.out, idx, prep.dataset.y[idx], preds)
    print(f"{preds.k} members x {preds.n} rows -> {args.out}")


def _write_summary(path, ids, y, s: uq.EnsembleSummary) -> None:
    with open(path, "w") as fh:
        fh.write("id,y,mu,aleatoric,epistemic,total\n")
        for row in zip(ids, y, s.mu, s.aleatoric, s.epistemic, s.total):
            fh.write(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]) + "\n")


def evaluate_files(preds_path, val_preds_path=None, recalibrate: bool = False) -> tuple[dict, dict]:
    ids, y, preds = uq.read_predictions(preds_path)
    test = uq.ensemble_summary(preds)
    val = y_val = None
    if val_preds_path:
        _, y_val, vpreds = uq.read_predictions(val_preds_path)
        val = uq.ensemble_summary(vpreds)
    elif recalibrate:
        raise CliError("--recalibrate needs --val-preds")
    report = uq.evaluate(test, y, val, y_val, recalibrate_with_val=recalibrate)
    extra = {"ids": ids, "y": y, "summary": test}
    return report, extra


def cmd_evaluate(args) -> None:
    report, extra = evaluate_files(args.preds, args.val_preds, args.recalibrate)
    path = Path(args.report)
    uq.write_report(path, {args.split_name: report})
    s, y = extra["summary"], extra["y"]
    stem = path.with_suffix("")
    uq.write_calibration_csv(f"{stem}.calibration.csv", uq.calibration_curve(s.mu, s.total, y))
    uq.write_confidence_csv(f"{stem}.confidence.csv", uq.confidence_curve(s.mu, s.total, y))
    _write_summary(f"{stem}.summary.csv", extra["ids"], y, s)
    shown = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in report.items()}
    print(json.dumps(shown))


def cmd_baseline(args) -> None:
    prep = prepare(args.data, args.smiles_column, args.target_column, args.splits)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "mcdropout":
        records = load_catalog(args.catalog, DEFAULT_SPACE) if args.catalog else []
        if not records:
            raise CliError("mcdropout needs a non-empty --catalog")
        best = select_top_k(records, 1)[0]
        seed = derive_seed(args.seed, best.eval_id)
        cfg = _train_config(args, seed=derive_seed(seed, SHUFFLE), keep_best_on_val=args.keep_best,
                            dropout=args.rate)
        model, hist = train_genome(prep, best.genome, cfg, derive_seed(seed, INIT))
        _save_trained(out, "mcdropout", model, hist, prep.scaler)
        for split in ("val", "test"):
            idx = prep.split[split]
            store = prep.dataset.graphs().subset(idx)
            preds = mc_dropout_predict(model, store, args.rate, args.passes,
                                       derive_seed(args.seed, 7, SPLITS.index(split)), prep.scaler)
            uq.write_predictions(out / f"{split}.csv", idx, prep.dataset.y[idx], preds)
        print(f"mcdropout: eval {best.eval_id}, rate {args.rate}, {args.passes} passes -> {out}")
    else:
        for rank, genome in enumerate(random_baseline(DEFAULT_SPACE, args.k, args.seed)):
            seed = derive_seed(args.seed, rank, 1)
            cfg = _train_config(args, seed=derive_seed(seed, SHUFFLE), keep_best_on_val=args.keep_best)
            model, hist = train_genome(prep, genome, cfg, derive_seed(seed, INIT))
            _save_trained(out, f"random_{rank:02d}", model, hist, prep.scaler)
            print(f"random_{rank:02d}: best val_nll {hist.best_val_nll:.4f}", flush=True)


def cmd_space(args) -> None:
    if args.cardinality:
        print(cardinality(DEFAULT_SPACE))
    else:
        for g in DEFAULT_SPACE.genes:
            print(f"{g.name}: {', '.join(map(str, g.options))}")


# ---------------------------------------------------------------------------
# argument parsing


def _ratios(text) -> tuple[int, int, int]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(":")
    try:
        ratios = tuple(int(p) for p in parts)
    except ValueError:
        raise CliError(f"bad ratios {text!r}; expected e.g. 5:2:3") from None
    if len(ratios) != 3:
        raise CliError(f"bad ratios {text!r}; expected three parts")
    return ratios


def _data_flags(p, splits: bool = True) -> None:
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--smiles-column", default="smiles", help="SMILES column name")
    p.add_argument("--target-column", default="y", help="target column name")
    if splits:
        p.add_argument("--splits", required=True, help="split JSON written by `gnnuq split`")


def _train_flags(p, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs, help="training epochs per model")
    p.add_argument("--batch-size", type=int, default=64, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="root seed")


def _keep_best(p) -> None:
    p.add_argument("--keep-best", dest="keep_best", action="store_true", default=True,
                   help="return the weights with the lowest validation NLL (default)")
    p.add_argument("--no-keep-best", dest="keep_best", action="store_false",
                   help="return the final-epoch weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnnuq", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag values (flags override)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a seeded train/val/test split")
    _data_flags(p, splits=False)
    p.add_argument("--ratios", default="5:2:3", help="train:val:test ratios")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--out", required=True, help="split JSON path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("search", help="aging-evolution architecture search")
    _data_flags(p)
    _train_flags(p, 30)
    p.add_argument("--evals", type=int, default=1000, help="total evaluations")
    p.add_argument("--population", type=int, default=100, help="population size P")
    p.add_argument("--sample", type=int, default=10, help="tournament sample size S")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel evaluations (default: $GNNUQ_THREADS or 1)")
    p.add_argument("--catalog", required=True, help="JSON-lines catalog (appended, resumable)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("posttrain", help="retrain the top-k catalog genomes from scratch")
    _data_flags(p)
    _train_flags(p, 1000)
    _keep_best(p)
    p.add_argument("--catalog", required=True, help="search catalog")
    p.add_argument("--top-k", type=int, default=10, help="ensemble size")
    p.add_argument("--out-dir", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_posttrain)

    p = sub.add_parser("predict", help="per-member predictions for one split")
    _data_flags(p)
    p.add_argument("--models", nargs="+", required=True, help="checkpoint files or directories")
    p.add_argument("--split", choices=SPLITS + ("all",), default="test", help="rows to predict")
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="UQ report and curve CSVs from predictions")
    p.add_argument("--preds", required=True, help="predictions CSV to score")
    p.add_argument("--val-preds", help="validation predictions (for cNLL and recalibration)")
    p.add_argument("--recalibrate", action="store_true", help="add recal_a and recal_mca")
    p.add_argument("--split-name", default="test", help="key of the report entry")
    p.add_argument("--report", required=True, help="report JSON path; curves are written beside it")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="MC-dropout or random-ensemble baselines")
    _data_flags(p)
    _train_flags(p, 1000)
    _keep_best(p)
    p.add_argument("--kind", choices=("mcdropout", "random"), required=True, help="baseline type")
    p.add_argument("--catalog", help="search catalog (mcdropout uses its best genome)")
    p.add_argument("--rate", type=float, default=0.1, help="dropout rate")
    p.add_argument("--passes", type=int, default=10, help="stochastic passes")
    p.add_argument("--k", type=int, default=10, help="random ensemble size")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("space", help="describe the search space")
    p.add_argument("--cardinality", action="store_true", help="print the number of genomes")
    p.set_defaults(func=cmd_space)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    subparsers = [sp for action in parser._subparsers._group_actions for sp in action.choices.values()]
    known_keys = {a.dest for sp in subparsers for a in sp._actions} - {"help", "func"}
    unknown = sorted(set(cfg) - known_keys)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    for sp in subparsers:
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})
        # a config value satisfies a required flag
        for a in sp._actions:
            if a.dest in cfg:
                a.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "ratios", None) is not None and not isinstance(args.ratios, str):
            args.ratios = ":".join(map(str, args.ratios))
        args.func(args)
    except (GnnuqError, OSError, KeyError, ValueError) as exc:
        print(f"gnnuq: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
