"""Command-line entry point.

Exit codes: 0 success, 1 verification failure (gradient check), 2 usage,
configuration or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments as ex
from .checkpoint import CheckpointError, load_checkpoint
from .config import ExperimentConfig, load_config, parse_config_text
from .data import DatasetError, GenConfig, corpus_stats, generate_synthetic_corpus, split_corpus, write_jsonl
from .gradchecks import run_gradchecks
from .numerics import ConfigError, NondeterminismError, ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("poolbench")


class UsageError(Exception):
    pass


def _band_value(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat key = value experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output path (file or directory, per command)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="poolbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one model; writes model.ckpt, report.json, metrics.json")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint's last completed epoch")

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="defaults to the config's eval_path")

    p = sub.add_parser("compare", parents=[common], help="train all four pooling kinds and tabulate F1")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--jobs", type=int, default=1, help="independent worker processes (default 1, sequential)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward rule")
    p.add_argument("--only", nargs="*", help="restrict to the named checks")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("stats", parents=[common], help="per-class corpus statistics table")
    p.add_argument("--dataset", type=Path, help="defaults to the config's train_path")

    p = sub.add_parser("gen-data", parents=[common], help="write a seeded synthetic corpus")
    p.add_argument("--n-per-class", type=int, default=1250)
    p.add_argument("--no-split", action="store_true", help="write one corpus.jsonl instead of train/dev/test")

    p = sub.add_parser("probe-length", parents=[common], help="length-bias probe on a length band")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="defaults to the config's eval_path")
    p.add_argument("--band", nargs=2, type=_band_value, metavar=("LO", "HI"), default=(0.0, float("inf")),
                   help="inclusive word-count band; HI may be 'inf'")
    p.add_argument("--fit-dataset", type=Path, help="fit the length baseline here (default: the probe dataset)")
    return parser


def _config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = base or ExperimentConfig()
    overrides = {}
    if getattr(args, "set", None):
        text = "\n".join(args.set)
        if any("=" not in s for s in args.set):
            raise UsageError("--set expects KEY=VALUE")
        parsed = parse_config_text(text, Path.cwd()).to_flat()
        keys = [s.split("=", 1)[0].strip() for s in args.set]
        overrides.update({k: parsed[k] for k in keys})
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _emit(payload: dict, out: Path | None) -> None:
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        ex.dump_json(payload, out)


def _dataset(args, cfg: ExperimentConfig, fallback: str | None) -> Path:
    path = args.dataset or (Path(fallback) if fallback else None)
    if path is None:
        raise UsageError("no dataset given (use --dataset or set it in --config)")
    return path


def cmd_train(args) -> int:
    base = load_checkpoint(args.resume).config if args.resume else None
    cfg = _config(args, base)
    out = args.out or Path("runs") / cfg.train.pooling
    report = ex.cmd_train(cfg, out, args.resume)
    ev = report.eval_metrics
    print(f"pooling={report.pooling} epochs={cfg.train.epochs} final_loss="
          f"{report.epoch_losses[-1] if report.epoch_losses else float('nan'):.5f} "
          f"train_acc={report.train_metrics['accuracy']:.4f}"
          + (f" eval_f1={ev['f1']:.4f}" if ev else "")
          + f"  -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    payload = ex.cmd_evaluate(args.checkpoint, _dataset(args, cfg, cfg.eval_path))
    m = payload["metrics"]
    print(f"F1={m['f1']:.4f}  macro-F1={m['macro_f1']:.4f}  accuracy={m['accuracy']:.4f}  "
          f"P={m['precision']:.4f}  R={m['recall']:.4f}  TP={m['tp']} FP={m['fp']} FN={m['fn']} TN={m['tn']}")
    _emit(payload, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    report = ex.cmd_compare(cfg, jobs=args.jobs)
    print(ex.compare_table(report))
    _emit(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else (_config(args).train.seed if args.config else 0)
    start = time.perf_counter()
    results = run_gradchecks(seed=seed, tol=args.tol, only=set(args.only) if args.only else None)
    if not results:
        raise UsageError("no checks selected")
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    elapsed = time.perf_counter() - start
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s")
    _emit({"schema_version": ex.SCHEMA_VERSION, "report": "gradcheck", "seed": seed, "tolerance": args.tol,
           "passed": not failed, "seconds": elapsed, "checks": [r.to_dict() for r in results]}, args.out)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config(args) if args.config else ExperimentConfig()
    stats = ex.cmd_stats(_dataset(args, cfg, cfg.train_path))
    print(ex.stats_table(stats))
    _emit(ex.stats_payload(stats), args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.n_per_class < 1:
        raise UsageError("--n-per-class must be positive")
    seed = args.seed if args.seed is not None else 0
    out = args.out or Path("data")
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_synthetic_corpus(args.n_per_class, GenConfig(), seed)
    if args.no_split:
        parts = {"corpus": corpus}
    else:
        parts = dict(zip(("train", "dev", "test"), split_corpus(corpus, seed=seed)))
    for name, samples in parts.items():
        write_jsonl(samples, out / f"{name}.jsonl")
        print(f"wrote {len(samples):>6d} samples to {out / (name + '.jsonl')}")
    stats = corpus_stats(corpus)
    print(ex.stats_table(stats))
    print(f"mean word ratio (human/machine) = {stats.human.avg_words / stats.machine.avg_words:.3f}")
    return EXIT_OK


def cmd_probe_length(args) -> int:
    cfg = _config(args) if args.config else ExperimentConfig()
    lo, hi = args.band
    if lo > hi:
        raise UsageError(f"band lower bound {lo} exceeds upper bound {hi}")
    payload = ex.cmd_probe_length(args.checkpoint, _dataset(args, cfg, cfg.eval_path), (lo, hi), args.fit_dataset)
    sizes = payload["sizes"]
    print(f"band [{lo:g}, {hi:g}] words: {sizes['controlled']} of {sizes['full']} samples")
    print(f"{'':<16}  {'full F1':>8}  {'band F1':>8}  {'delta':>8}")
    for key, label in (("model", "model"), ("length_baseline", "length baseline")):
        row = payload[key]
        print(f"{label:<16}  {row['full']['f1']:>8.4f}  {row['controlled']['f1']:>8.4f}  {row['f1_delta']:>+8.4f}")
    _emit(payload, args.out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "stats": cmd_stats,
    "gen-data": cmd_gen_data,
    "probe-length": cmd_probe_length,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, ShapeError, OSError, json.JSONDecodeError) as exc:
        print(f"poolbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NondeterminismError as exc:
        print(f"poolbench {args.command}: verification failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
