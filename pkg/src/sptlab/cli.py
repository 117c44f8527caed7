"""Command-line interface: generate, train, eval, heatmap, gradcheck.

Exit codes: 0 success, 1 configuration error (the message names the
offending key), 2 runtime failure.  Every run logs its resolved
configuration and seed; reproducing a run needs nothing beyond that echo.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bagstore import BagError, generate_synthetic, load_bag, load_dataset, save_dataset
from .checkpoint import CheckpointError, load_checkpoint
from .config import EvalSettings, ExperimentConfig, config_help, load_config
from .errors import ConfigError, TrainingError
from .evaluate import (compute_metrics, export_heatmap, extract_features, fit_linear_probe,
                       knn_vote_scores, save_feature_table, write_report, ProbeConfig)
from .trainer import GRADCHECK_COMPONENTS, fit, grad_check

log = logging.getLogger("sptlab")


class _UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage is config error
        raise _UsageError(message)


def _setup_logging() -> None:
    level = os.environ.get("SPTLAB_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _echo_config(cfg: ExperimentConfig, out_dir: Path | None) -> None:
    blob = json.dumps(cfg.resolved, indent=1, sort_keys=True)
    log.info("resolved config:\n%s", blob)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(blob + "\n")


def _dataset_dir(path: Path, split: str) -> Path:
    """Accept either a dataset directory or a parent holding train/ and val/."""
    if (path / "manifest.json").exists():
        return path
    if (path / split / "manifest.json").exists():
        return path / split
    raise ConfigError(f"{path}: no dataset found (expected manifest.json or {split}/manifest.json)")


def _cmd_generate(args) -> int:
    cfg = load_config(args.spec)
    out = Path(args.out)
    _echo_config(cfg, out)
    log.info("generating synthetic datasets with seed %d", cfg.data.seed)
    train, val = generate_synthetic(cfg.data)
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    log.info("wrote %d train bags and %d val bags under %s", len(train), len(val), out)
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _echo_config(cfg, out)
    train_ds = load_dataset(_dataset_dir(Path(args.data), "train"))
    start = load_checkpoint(args.resume) if args.resume else None
    log.info("training objective=%s seed=%d on %d bags",
             cfg.train.objective.name, cfg.train.seed, len(train_ds))
    ckpt, metrics = fit(train_ds, cfg.train, out_dir=out, start=start)
    log.info("finished at step %d; final loss %.6f; checkpoint at %s",
             ckpt.step, metrics[-1]["loss"] if metrics else float("nan"),
             out / "checkpoint.ckpt")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    if cfg:
        _echo_config(cfg, Path(args.report).parent)
    settings = cfg.eval if cfg else EvalSettings()

    ckpt = load_checkpoint(args.ckpt)
    train_ds = load_dataset(_dataset_dir(Path(args.train_data), "train"))
    val_ds = load_dataset(_dataset_dir(Path(args.val_data), "val"))
    workers = settings.resolved_workers()
    log.info("extracting features (workers=%d)", workers)
    train_tab = extract_features(train_ds, ckpt, workers=workers)
    val_tab = extract_features(val_ds, ckpt, workers=workers)

    if args.protocol == "knn":
        preds, scores, class_ids = knn_vote_scores(train_tab, val_tab, settings.k, settings.metric)
    else:
        probe = fit_linear_probe(train_tab, ProbeConfig(
            l2=settings.probe_l2, max_iter=settings.probe_max_iter, tol=settings.probe_tol))
        scores = probe.scores(val_tab.features)
        preds = probe.predict(val_tab.features)
        class_ids = probe.class_ids
    if val_tab.labels is None:
        raise ConfigError("validation dataset has no labels; cannot score predictions")
    report = compute_metrics(preds, scores, val_tab.labels, class_ids, protocol=args.protocol)

    report_path = Path(args.report)
    csv_path = write_report(report, report_path)
    save_feature_table(train_tab, report_path.with_suffix(".train-features.bag"))
    save_feature_table(val_tab, report_path.with_suffix(".val-features.bag"))
    log.info("protocol=%s MCA=%.4f macro_F1=%.4f AUC=%.4f -> %s (+ %s)",
             args.protocol, report.mca, report.macro_f1, report.auc, report_path, csv_path.name)
    return 0


def _cmd_heatmap(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    bag = load_bag(args.bag)
    layer = "last" if args.layer == "last" else int(args.layer)
    head = "mean" if args.head == "mean" else int(args.head)
    json_path, png_path = export_heatmap(bag, ckpt, args.out, layer=layer, head=head)
    log.info("wrote %s and %s", json_path, png_path)
    return 0


def _cmd_gradcheck(args) -> int:
    components = GRADCHECK_COMPONENTS if args.component == "all" else (args.component,)
    for component in components:
        report = grad_check(component, seed=args.seed)
        for line in report.lines():
            print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sptlab",
        description=__doc__,
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"sptlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset with planted structure")
    p.add_argument("--spec", required=True, help="TOML config; [data] section is used")
    p.add_argument("--out", required=True, help="output directory (train/ and val/ inside)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a slide encoder")
    p.add_argument("--config", required=True, help="TOML config")
    p.add_argument("--data", required=True, help="dataset directory (or parent of train/)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with kNN or a linear probe")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--protocol", required=True, choices=("knn", "linear"))
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--config", help="optional TOML config for the [eval] section")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("heatmap", help="export CLS attention over a bag")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bag", required=True, help="a .bag file")
    p.add_argument("--out", required=True, help="output base path (.json and .png)")
    p.add_argument("--layer", default="last", help="layer index or 'last'")
    p.add_argument("--head", default="mean", help="head index or 'mean'")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--component", required=True,
                   choices=(*GRADCHECK_COMPONENTS, "all"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, BagError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
