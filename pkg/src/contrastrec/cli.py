"""Command-line entry point wiring the staged pipeline.

Subcommands mirror the pipeline stages; every flag has a config-file twin
and flags win. Exit codes: 0 success, 2 validation error, 3 backend error,
4 numeric error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import RunConfig, load_config
from .errors import BackendError, NumericError, ValidationError
from .pipeline import STAGES

log = logging.getLogger(__name__)

# (flag, config section, key) triples; flags override the config file
_FLAG_MAP = [
    ("outdir", "run", "outdir"),
    ("seed", "run", "seed"),
    ("domain", "run", "domain"),
    ("records", "data", "records"),
    ("profiles", "data", "profiles"),
    ("history_len", "data", "history_len"),
    ("split_ratio", "data", "split_ratio"),
    ("users", "data", "users"),
    ("items", "data", "items"),
    ("tokens", "data", "tokens"),
    ("noise", "data", "label_noise"),
    ("backend", "backend", "kind"),
    ("endpoint", "backend", "endpoint"),
    ("model", "backend", "model"),
    ("max_concurrency", "backend", "max_concurrency"),
    ("retry_count", "backend", "retry_count"),
    ("augment_profiles", "backend", "augment"),
    ("maxlen", "autoencoder", "maxlen"),
    ("dim", "autoencoder", "dim"),
    ("ae_lr", "autoencoder", "lr"),
    ("ae_batch", "autoencoder", "batch"),
    ("ae_epochs", "autoencoder", "epochs"),
    ("ae_seed", "autoencoder", "seed"),
    ("task", "model", "task"),
    ("variant", "model", "variant"),
    ("lr", "model", "lr"),
    ("batch", "model", "batch"),
    ("epochs", "model", "epochs"),
    ("model_seed", "model", "seed"),
    ("experiment", "theory", "experiment"),
    ("trials", "theory", "trials"),
    ("theory_seed", "theory", "seed"),
]


def _add_common(parser):
    parser.add_argument("--config", help="INI config file; flags override it")
    parser.add_argument("--outdir", help="output directory for staged artifacts")
    parser.add_argument("--force", action="store_true",
                        help="overwrite a stage built with a different config")
    parser.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contrastrec",
        description="Explanation-aware recommender lab: staged pipeline and "
                    "regression workbench.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a planted-signal dataset")
    synth.add_argument("--users", type=int)
    synth.add_argument("--items", type=int)
    synth.add_argument("--tokens", type=int)
    synth.add_argument("--noise", type=float)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--history-len", dest="history_len", type=int)
    _add_common(synth)

    ingest = sub.add_parser("ingest", help="validate and snapshot the dataset")
    ingest.add_argument("--records")
    ingest.add_argument("--profiles")
    ingest.add_argument("--history-len", dest="history_len", type=int)
    ingest.add_argument("--split-ratio", dest="split_ratio", type=float)
    _add_common(ingest)

    def backend_flags(p):
        p.add_argument("--backend", choices=["stub", "http"])
        p.add_argument("--endpoint")
        p.add_argument("--model")
        p.add_argument("--max-concurrency", dest="max_concurrency", type=int)
        p.add_argument("--retry-count", dest="retry_count", type=int)
        p.add_argument("--resume", action="store_true",
                       help="reuse the append-only completion cache (always on; "
                            "flag kept for interface parity)")

    augment = sub.add_parser("augment", help="expand item names into rich profiles")
    backend_flags(augment)
    augment.add_argument("--enable", dest="augment_profiles", action="store_const",
                         const=True, help="turn profile augmentation on")
    _add_common(augment)

    explain = sub.add_parser("explain", help="generate contrastive explanations")
    backend_flags(explain)
    explain.add_argument("--variant")
    _add_common(explain)

    train_ae = sub.add_parser("train-ae", help="train the explanation autoencoder")
    train_ae.add_argument("--maxlen", type=int)
    train_ae.add_argument("--dim", type=int)
    train_ae.add_argument("--lr", dest="ae_lr", type=float)
    train_ae.add_argument("--batch", dest="ae_batch", type=int)
    train_ae.add_argument("--epochs", dest="ae_epochs", type=int)
    train_ae.add_argument("--seed", dest="ae_seed", type=int)
    _add_common(train_ae)

    train = sub.add_parser("train", help="train the recommendation model")
    train.add_argument("--task", choices=["classification", "regression"])
    train.add_argument("--variant")
    train.add_argument("--lr", type=float)
    train.add_argument("--batch", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--seed", dest="model_seed", type=int)
    train.add_argument("--history-len", dest="history_len", type=int)
    _add_common(train)

    evaluate = sub.add_parser("eval", help="score the trained model on the test split")
    _add_common(evaluate)

    analyze = sub.add_parser("analyze", help="attention and keyword reports")
    analyze.add_argument("--top-k", dest="top_k", type=int, default=10)
    _add_common(analyze)

    theory = sub.add_parser("theory", help="multi-environment regression experiments")
    theory.add_argument("--experiment", choices=["rates", "nonlinear-rates",
                                                 "selection", "eills", "lemma2"])
    theory.add_argument("--trials", type=int)
    theory.add_argument("--seed", dest="theory_seed", type=int)
    _add_common(theory)

    pipeline = sub.add_parser("run", help="run synth through analyze in order")
    backend_flags(pipeline)
    pipeline.add_argument("--users", type=int)
    pipeline.add_argument("--items", type=int)
    pipeline.add_argument("--variant")
    pipeline.add_argument("--task", choices=["classification", "regression"])
    pipeline.add_argument("--seed", type=int)
    _add_common(pipeline)

    return parser


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, section, key in _FLAG_MAP:
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, value)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            for stage in ("synth", "ingest", "augment", "explain", "train-ae",
                          "train", "eval", "analyze"):
                manifest = STAGES[stage](cfg, force=args.force)
                print(f"{stage}: {manifest['stats']}")
        elif args.command == "analyze":
            manifest = STAGES["analyze"](cfg, top_k=args.top_k, force=args.force)
            print(f"analyze: {manifest['stats']}")
        else:
            manifest = STAGES[args.command](cfg, force=args.force)
            print(f"{args.command}: {manifest['stats']}")
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
