"""Command-line front end: ``unite {generate,train,evaluate,predict,export-covariance}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every command writes the resolved configuration next to its
outputs as ``config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import AutodiffError
from .config import ABLATIONS, ConfigError, RunConfig, load_config
from .data import DataError, SignalSpec, generate_synthetic, load_cohort_dir, split
from .embeddings import Standardizer, take_rows
from .kernel import SingularKernelError
from .metrics import evaluate
from .model import CheckpointError, UniteModel
from .predict import balanced_sample, covariance_bicluster, predict, uncertainty_filter, write_covariance, write_predictions
from .train import Trainer, TrainingDiverged

logger = logging.getLogger("unite")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_FILE = "model.npz"
LOG_FILE = "train_log.jsonl"
CONFIG_FILE = "config.txt"


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out / CONFIG_FILE)
    return out


def _load_split(config: RunConfig):
    return split(load_cohort_dir(config.data_dir), seed=config.seed)


def _checkpoint_path(config: RunConfig) -> Path:
    return Path(config.checkpoint) if config.checkpoint else Path(config.out_dir) / CHECKPOINT_FILE


def _load_model(config: RunConfig, cohort) -> UniteModel:
    model = UniteModel.load(_checkpoint_path(config))
    emb = model.embedding
    expected = (len(cohort.vocab), cohort.demographics_dim, cohort.location_dim)
    found = (emb.vocab_size, emb.demographics_dim, emb.location_dim)
    if found != expected:
        raise CheckpointError(f"checkpoint dimensions (vocab, demographics, location) = {found} do not match the data {expected}")
    return model


# -- commands ----------------------------------------------------------------


def cmd_generate(config: RunConfig) -> int:
    """Write a planted-signal synthetic cohort into ``data_dir``."""
    signal = SignalSpec(
        risk_weight=config.risk_weight,
        location_weight=config.location_weight,
        age_weight=config.age_weight,
        noise_fraction=config.noise_fraction,
        seq_len_min=config.seq_len,
        seq_len_max=config.seq_len,
    )
    generate_synthetic(
        config.n_patients, config.vocab_size, config.n_locations, config.positive_rate, config.seed, signal, out_dir=config.data_dir
    )
    config.write(Path(config.data_dir) / CONFIG_FILE)
    logger.info("wrote %d patients to %s", config.n_patients, config.data_dir)
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    """Pre-train, fit the GP layer, and write checkpoint, log and config."""
    cohort = _load_split(config)
    out = _out_dir(config)
    train_batch = cohort.batch(cohort.indices("train"), config.max_len)
    embedding = config.embedding(len(cohort.vocab), cohort.demographics_dim, cohort.location_dim)
    model = UniteModel.create(embedding, config.gp(), Standardizer.fit(train_batch), config.seed)
    trainer = Trainer(model, cohort, config.train())
    try:
        report = trainer.fit()
    except TrainingDiverged as exc:
        exc.report.write_log(out / LOG_FILE)
        raise
    report.write_log(out / LOG_FILE)
    model.meta = {"stop_reason": report.stop_reason, "best_epoch": report.best_epoch}
    model.save(out / CHECKPOINT_FILE)
    logger.info("training stopped (%s) at best epoch %d", report.stop_reason, report.best_epoch)
    return EXIT_OK


def evaluation_rows(model: UniteModel, batch, fractions, B: int, seed: int) -> list[dict]:
    """Metrics on the retained subset for each removal fraction, from one set of predictions."""
    preds = predict(model, batch, B=B, seed=seed)
    mean = np.array([p.mean for p in preds])
    rows = []
    for q in fractions:
        keep = uncertainty_filter(preds, q)
        r = evaluate(batch.labels[keep], mean[keep])
        rows.append({"q": q, "n_retained": int(keep.size), "f1": r.f1, "kappa": r.kappa, "pr_auc": r.pr_auc})
    return rows


def cmd_evaluate(config: RunConfig) -> int:
    """Test-set F1, kappa and PR-AUC after removing the most uncertain patients."""
    cohort = _load_split(config)
    model = _load_model(config, cohort)
    out = _out_dir(config)
    test = cohort.batch(cohort.indices("test"), model.embedding.transformer.max_len)
    fractions = sorted(set((0.0, *config.filter_fractions)))
    rows = evaluation_rows(model, test, fractions, config.B_predict, config.seed)
    with open(out / "evaluation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["q", "n_retained", "f1", "kappa", "pr_auc"])
        for r in rows:
            w.writerow([repr(r["q"]), r["n_retained"], repr(r["f1"]), repr(r["kappa"]), repr(r["pr_auc"])])
    for r in rows:
        print(f"q={r['q']:.2f}  n={r['n_retained']:4d}  f1={r['f1']:.4f}  kappa={r['kappa']:.4f}  pr_auc={r['pr_auc']:.4f}")
    return EXIT_OK


def cmd_predict(config: RunConfig) -> int:
    """Per-patient risk and uncertainty for the test split."""
    cohort = _load_split(config)
    model = _load_model(config, cohort)
    out = _out_dir(config)
    test = cohort.batch(cohort.indices("test"), model.embedding.transformer.max_len)
    write_predictions(out / "predictions.csv", predict(model, test, B=config.B_predict, seed=config.seed))
    return EXIT_OK


def cmd_export_covariance(config: RunConfig) -> int:
    """Kernel matrix over a class-balanced test sample, reordered by its spectral split."""
    cohort = _load_split(config)
    model = _load_model(config, cohort)
    out = _out_dir(config)
    test = cohort.batch(cohort.indices("test"), model.embedding.transformer.max_len)
    try:
        idx = balanced_sample(test.labels, config.n_sample, config.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    sample = take_rows(test, idx)
    export = covariance_bicluster(model, sample)
    write_covariance(out, export, sample.labels)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-covariance": cmd_export_covariance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unite", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory (data directory for generate)")
        p.add_argument("--data", help="data directory")
        p.add_argument("--checkpoint", help="model checkpoint (default: OUT/model.npz)")
        p.add_argument("--ablate", choices=sorted(ABLATIONS), help="drop a tabular modality")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.data is not None:
        overrides.append(f"data_dir = {args.data}")
    if args.out is not None:
        overrides.append(f"{'data_dir' if args.command == 'generate' else 'out_dir'} = {args.out}")
    if args.checkpoint is not None:
        overrides.append(f"checkpoint = {args.checkpoint}")
    return load_config(args.config, overrides).with_ablation(args.ablate)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve(args)
        return COMMANDS[args.command](config)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, SingularKernelError, AutodiffError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
