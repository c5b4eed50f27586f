"""Command line interface.

Exit codes: 0 success, 2 bad usage or configuration, 3 checkpoint mismatch,
4 malformed data. Every subcommand writes a run manifest recording the
arguments, configuration, and timing (timing lives only there, so the
metric files stay byte-reproducible). A JSON config file can supply any
flag's value; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .dialog import label_positions, load_corpus, save_corpus
from .explore import dump_exploration, systematic_explore
from .kb import DataError, load_kb
from .metrics import evaluate, prepare_dialogs, write_metrics_csv
from .policy import CheckpointError, PolicyParameters
from .position import PositionModel, PositionTrainConfig, position_metrics, train_position
from .synth import BenchConfig, generate, save_benchmark, verify_gold
from .train import ESTIMATORS, ConfigError, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DATA = 4

JOBS_ENV_VAR = "DIALOQUERY_JOBS"

# flags a subcommand cannot run without; a config file may supply them
_REQUIRED = {
    "synth": ("out",),
    "label-positions": ("kb", "corpus", "out"),
    "explore": ("kb", "corpus", "out"),
    "train": ("kb", "train", "val", "out"),
    "eval": ("kb", "corpus", "checkpoint", "out"),
    "train-position": ("kb", "corpus", "out"),
}

_PATH_DESTS = ("out", "kb", "corpus", "train", "val", "checkpoint",
               "eval_corpus", "position_model", "config")


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV_VAR, "1")))
    except ValueError:
        return 1


def _manifest_dict(command: str, argv: list[str], config: dict, started: float,
                   outputs: list[str]) -> dict:
    return {
        "tool": "dialoquery",
        "version": __version__,
        "command": command,
        "argv": argv,
        "config": config,
        "elapsed_seconds": round(time.time() - started, 3),
        "outputs": outputs,
    }


def _write_manifest(outdir: Path, command: str, argv: list[str], config: dict,
                    started: float, outputs: list[str]) -> None:
    with open(outdir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_manifest_dict(command, argv, config, started, outputs), fh, indent=2)
        fh.write("\n")


def _write_file_manifest(outfile: Path, command: str, argv: list[str], config: dict,
                         started: float) -> None:
    """Sibling manifest for subcommands whose --out is a single file."""
    path = Path(str(outfile) + ".manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_manifest_dict(command, argv, config, started, [outfile.name]), fh, indent=2)
        fh.write("\n")


def _add_position_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--positions", dest="position_source",
                   choices=("gold", "heuristic", "predicted"), default="heuristic",
                   help="where to issue the query in each dialog")
    p.add_argument("--position-model", type=Path, default=None,
                   help="trained position model (required for --positions predicted)")


def _load_position_model(args, kb):
    if args.position_source != "predicted":
        return None
    if args.position_model is None:
        raise ConfigError("--positions predicted needs --position-model")
    return PositionModel.load(args.position_model, expected_fields=kb.fields)


def _pmap(fn, payloads: list, jobs: int) -> list:
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads))


def _explore_job(payload):
    context, supervision, kb, max_clauses = payload
    return systematic_explore(context, supervision, kb, max_clauses)


def _cmd_synth(args, argv) -> int:
    config = BenchConfig(
        n_rows=args.rows,
        n_cuisines=args.cuisines,
        n_areas=args.areas,
        n_prices=args.prices,
        rho=args.rho,
        n_train=args.dialogs,
        n_val=args.val_dialogs,
        n_test=args.test_dialogs,
        heuristic_match_rate=args.match_rate,
        distractor_rate=args.distractor_rate,
        overconstrain_rate=args.overconstrain_rate,
        seed=args.seed,
    )
    started = time.time()
    bench = generate(config, jobs=args.jobs)
    report = verify_gold(bench.kb, bench.train + bench.val + bench.test)
    out = Path(args.out)
    save_benchmark(bench, out)
    with open(out / "gold_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "synth", argv, asdict(config), started,
                    ["kb.json", "train.json", "val.json", "test.json",
                     "manifest.json", "gold_report.json"])
    print(f"wrote benchmark to {out} "
          f"(rho={config.rho}, achieved={bench.manifest['achieved_rho']:.4f}, "
          f"heuristic match={bench.manifest['achieved_heuristic_match_rate']:.4f})")
    return EXIT_OK


def _cmd_label_positions(args, argv) -> int:
    started = time.time()
    kb = load_kb(args.kb)
    dialogs = load_corpus(args.corpus)
    labeled = label_positions(dialogs, kb)
    save_corpus(labeled, args.out)
    _write_file_manifest(args.out, "label-positions", argv,
                         {"kb": str(args.kb), "corpus": str(args.corpus)}, started)
    with_gold = [d for d in labeled if d.gold_position is not None]
    msg = f"labeled {len(labeled)} dialogs"
    if with_gold:
        agree = sum(d.heuristic_position == d.gold_position for d in with_gold) / len(with_gold)
        msg += f"; heuristic matches gold on {agree:.4f} of {len(with_gold)} annotated dialogs"
    print(msg)
    return EXIT_OK


def _cmd_explore(args, argv) -> int:
    started = time.time()
    kb = load_kb(args.kb)
    dialogs = load_corpus(args.corpus)
    items = prepare_dialogs(dialogs, kb, args.position_source, _load_position_model(args, kb))
    payloads = []
    skipped = 0
    for item in items:
        if not item.supervision:
            skipped += 1
            continue
        payloads.append((item.context, item.supervision, kb, args.max_clauses))
    results = _pmap(_explore_job, payloads, args.jobs)
    dump_exploration(results, args.out)
    _write_file_manifest(args.out, "explore", argv,
                         {"kb": str(args.kb), "corpus": str(args.corpus),
                          "positions": args.position_source,
                          "max_clauses": args.max_clauses}, started)
    print(f"explored {len(results)} dialogs ({skipped} skipped for empty supervision); "
          f"wrote {args.out}")
    return EXIT_OK


def _cmd_train(args, argv) -> int:
    kb = load_kb(args.kb)
    train_dialogs = load_corpus(args.train)
    val_dialogs = load_corpus(args.val)
    config = TrainConfig(
        estimator=args.estimator,
        learning_rate=args.learning_rate,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        n_samples=args.n_samples,
        beam_width=args.beam_width,
        epsilon=args.epsilon,
        alpha=args.alpha,
        alpha_high=args.alpha_high,
        alpha_other=args.alpha_other,
        lam=getattr(args, "lambda"),
        max_clauses=args.max_clauses,
        feature_dim=args.feature_dim,
        position_source=args.position_source,
    )
    model = _load_position_model(args, kb)
    started = time.time()
    result = train(kb, train_dialogs, val_dialogs, config, position_model=model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.params.save(out / "checkpoint.json")
    rows = [row for record in result.history for row in record.csv_rows()]
    write_metrics_csv(out / "metrics.csv", rows)
    history = {
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "n_train_items": result.n_train_items,
        "n_skipped_no_supervision": result.n_skipped_no_supervision,
        "n_skipped_ungrammatical_gold": result.n_skipped_ungrammatical_gold,
        "buffer_dynamics": result.buffer_dynamics(),
    }
    with open(out / "history.json", "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2)
        fh.write("\n")
    outputs = ["checkpoint.json", "metrics.csv", "history.json"]
    if args.train_position:
        labeled = label_positions(train_dialogs, kb)
        pos_model = train_position(labeled, kb, PositionTrainConfig(label_source="heuristic"))
        pos_model.save(out / "position_model.json")
        outputs.append("position_model.json")
    _write_manifest(out, "train", argv, asdict(config), started, outputs)
    last = result.history[-1]
    print(f"trained {config.estimator} for {len(result.history)} epochs "
          f"(best epoch {result.best_epoch}); val mean reward "
          f"{max(r.val.mean_reward for r in result.history):.4f}; "
          f"last val {last.val.mean_reward:.4f}; wrote {out}")
    return EXIT_OK


def _eval_query_mode(args, kb, dialogs):
    params = PolicyParameters.load(args.checkpoint, expected_fields=kb.fields)
    model = _load_position_model(args, kb)
    items = prepare_dialogs(dialogs, kb, args.position_source, model)
    report = evaluate(params, items, kb)
    return report.to_json(), report.rows()


def _eval_position_mode(args, kb, dialogs):
    model = PositionModel.load(args.checkpoint, expected_fields=kb.fields)
    metrics = position_metrics(model, dialogs, kb, label_source="gold")
    payload = {
        "strict_accuracy": metrics.strict_accuracy,
        "avg_turn_distance": metrics.avg_turn_distance,
        "n_dialogs": metrics.n_dialogs,
    }
    rows = [("strict_accuracy", metrics.strict_accuracy),
            ("avg_turn_distance", metrics.avg_turn_distance)]
    return payload, rows


def _cmd_eval(args, argv) -> int:
    if args.mode not in ("query", "position"):
        raise ConfigError(f"unknown eval mode {args.mode!r}")
    if args.format not in ("json", "csv", "both"):
        raise ConfigError(f"unknown output format {args.format!r}")
    kb = load_kb(args.kb)
    dialogs = load_corpus(args.corpus)
    started = time.time()
    if args.mode == "query":
        payload, rows = _eval_query_mode(args, kb, dialogs)
    else:
        payload, rows = _eval_position_mode(args, kb, dialogs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.format in ("json", "both"):
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump({"split": args.split, "mode": args.mode,
                       "position_source": args.position_source, **payload}, fh, indent=2)
            fh.write("\n")
        outputs.append("report.json")
    if args.format in ("csv", "both"):
        write_metrics_csv(out / "metrics.csv",
                          [(0, args.split, metric, value) for metric, value in rows])
        outputs.append("metrics.csv")
    _write_manifest(out, "eval", argv,
                    {"checkpoint": str(args.checkpoint), "split": args.split,
                     "mode": args.mode, "format": args.format,
                     "position_source": args.position_source}, started, outputs)
    for metric, value in rows:
        print(f"{args.split} {metric} {value:.6f}")
    return EXIT_OK


def _cmd_train_position(args, argv) -> int:
    started = time.time()
    kb = load_kb(args.kb)
    dialogs = load_corpus(args.corpus)
    if args.label_source == "heuristic":
        dialogs = label_positions(dialogs, kb)
    config = PositionTrainConfig(label_source=args.label_source, threshold=args.threshold)
    model = train_position(dialogs, kb, config)
    model.save(args.out)
    _write_file_manifest(args.out, "train-position", argv,
                         {"kb": str(args.kb), "corpus": str(args.corpus),
                          "label_source": args.label_source,
                          "threshold": args.threshold}, started)
    msg = f"wrote {args.out}"
    if args.eval_corpus:
        eval_dialogs = load_corpus(args.eval_corpus)
        metrics = position_metrics(model, eval_dialogs, kb, label_source="gold")
        msg += (f"; strict accuracy {metrics.strict_accuracy:.4f}, "
                f"avg turn distance {metrics.avg_turn_distance:.4f} "
                f"on {metrics.n_dialogs} dialogs")
    print(msg)
    return EXIT_OK


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="dialoquery",
        description="Induce knowledge-base queries from task-oriented dialogs "
                    "using only the entities mentioned later in each dialog.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def new_command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON file of flag defaults; explicit flags win")
        subparsers[name] = p
        return p

    bench_defaults = BenchConfig()
    p = new_command("synth", "generate a synthetic benchmark")
    p.add_argument("--out", type=Path)
    p.add_argument("--rows", type=int, default=bench_defaults.n_rows)
    p.add_argument("--cuisines", type=int, default=bench_defaults.n_cuisines)
    p.add_argument("--areas", type=int, default=bench_defaults.n_areas)
    p.add_argument("--prices", type=int, default=bench_defaults.n_prices)
    p.add_argument("--rho", type=float, default=bench_defaults.rho)
    p.add_argument("--dialogs", type=int, default=bench_defaults.n_train,
                   help="training dialogs")
    p.add_argument("--val-dialogs", type=int, default=bench_defaults.n_val)
    p.add_argument("--test-dialogs", type=int, default=bench_defaults.n_test)
    p.add_argument("--match-rate", type=float, default=bench_defaults.heuristic_match_rate)
    p.add_argument("--distractor-rate", type=float, default=bench_defaults.distractor_rate)
    p.add_argument("--overconstrain-rate", type=float,
                   default=bench_defaults.overconstrain_rate)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=_cmd_synth)

    p = new_command("label-positions", "attach heuristic query positions to a corpus")
    p.add_argument("--kb", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_label_positions)

    p = new_command("explore", "enumerate positive-reward queries per dialog")
    p.add_argument("--kb", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--max-clauses", type=int, default=4)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    _add_position_args(p)
    p.set_defaults(func=_cmd_explore)

    p = new_command("train", "train a query policy")
    p.add_argument("--kb", type=Path)
    p.add_argument("--train", type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--estimator", choices=ESTIMATORS, default="mbmapo")
    p.add_argument("--learning-rate", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=8)
    p.add_argument("--beam-width", type=int, default=8)
    p.add_argument("--eps", dest="epsilon", type=float, default=0.15,
                   help="random-continuation rate for the rbs estimator")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="buffer clip floor for the mapo estimator")
    p.add_argument("--alpha-h", dest="alpha_high", type=float, default=0.5)
    p.add_argument("--alpha-o", dest="alpha_other", type=float, default=0.1)
    p.add_argument("--lambda", type=float, default=0.1, dest="lambda",
                   help="weight of the sampled term in the slrl estimator")
    p.add_argument("--max-clauses", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=1 << 15)
    p.add_argument("--train-position", action="store_true",
                   help="also fit a position predictor on heuristic labels")
    _add_position_args(p)
    p.set_defaults(func=_cmd_train)

    p = new_command("eval", "evaluate a trained policy on a corpus")
    p.add_argument("--kb", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--split", default="test", help="split name used in the output rows")
    p.add_argument("--mode", choices=("query", "position"), default="query")
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    _add_position_args(p)
    p.set_defaults(func=_cmd_eval)

    p = new_command("train-position", "fit the query-position predictor")
    p.add_argument("--kb", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--label-source", choices=("heuristic", "gold"), default="heuristic")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--eval-corpus", type=Path, default=None,
                   help="corpus with gold positions to score the model on")
    p.set_defaults(func=_cmd_train_position)

    return parser, subparsers


def _config_path_from(argv: list[str]) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise ConfigError("--config needs a path")
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def _apply_config_file(argv: list[str], subparsers: dict) -> None:
    """Install config-file values as argparse defaults so flags override them."""
    path = _config_path_from(argv)
    if path is None:
        return
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    sub = subparsers.get(command or "")
    if sub is None:
        raise ConfigError("--config requires a recognized subcommand")
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {action.dest for action in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"config file {path} has unknown keys: {', '.join(unknown)}")
    sub.set_defaults(**values)


def _finalize_args(args) -> None:
    """Coerce config-file strings to paths and check required settings."""
    for dest in _PATH_DESTS:
        value = getattr(args, dest, None)
        if isinstance(value, str):
            setattr(args, dest, Path(value))
    missing = [dest for dest in _REQUIRED[args.command]
               if getattr(args, dest, None) is None]
    if missing:
        flags = ", ".join("--" + dest.replace("_", "-") for dest in missing)
        raise ConfigError(f"{args.command} needs {flags} (flag or config file)")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_config_file(argv, subparsers)
        args = parser.parse_args(argv)
        _finalize_args(args)
        return args.func(args, argv)
    except (ConfigError, argparse.ArgumentTypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
