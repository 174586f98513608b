"""Command-line entry point.

Every command writes its outputs plus ``<out>.manifest.json`` recording the
command, the effective configuration, seed, library version, output paths and
wall-clock time. Exit codes: 0 success, 1 usage error, 2 data or validation
error, 3 numerical divergence.

Scores file (``evaluate --scores``)::

    num_examples num_labels
    s_00 s_01 ... s_0(l-1)
    ...

Training config file (``--config``): ``key = value`` lines, ``#`` comments,
keys as in ``TRAIN_KEYS``. Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import re
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import Propensities
from .data import SparseDataset, label_frequency_order, load_cache, load_xmc, tfidf, top_n_labels, write_xmc
from .errors import DataFormatError, DivergenceError, ParameterError, PSLossError
from .evaluation import DEFAULT_FILTER_Q, evaluate_predictions
from .multilabel import Reduction
from .propensity import JainModelParams, jain_propensity, linear_inverse_propensity, read_propensities, write_propensities
from .simulate import (
    DEFAULT_P_GRID,
    SyntheticSpec,
    build_experiment,
    make_linear_dataset,
    recall_variance_sweep,
    training_experiment,
)
from .train import TrainConfig, noise_pattern_gap, regularization_sweep, train

log = logging.getLogger("pslosses")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

# config key -> parser; reduction keys first, then TrainConfig fields
TRAIN_KEYS = {
    "kind": str,
    "base": str,
    "variant": str,
    "full_denominator": lambda v: _parse_bool(v),
    "cap": lambda v: None if str(v).lower() == "none" else int(v),
    "l2": float,
    "epochs_phase1": int,
    "lr_phase1": float,
    "epochs_phase2": int,
    "lr_phase2": float,
    "batch_size": int,
    "seed": int,
    "link": str,
    "pretrain_epochs": int,
}
TRAIN_DEFAULTS = {"kind": "ova", "base": "bce", "variant": "unbiased", "full_denominator": False, "cap": 25}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_bool(v) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"not a boolean: {v!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _default_threads() -> int:
    env = os.environ.get("PSLOSSES_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"PSLOSSES_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# --- output ---------------------------------------------------------------------


def fmt(x) -> str:
    """17 significant digits for floats, plain text otherwise."""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


_RAW = "\x00F"
_RAW_RE = re.compile(r'"\\u0000F([^"\\]*)\\u0000"')


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return f"{_RAW}{fmt(obj)}\x00" if math.isfinite(obj) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_json(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    return _RAW_RE.sub(r"\1", text) + "\n"


def write_csv(path, header: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(row.get(h, "")) for h in header])
    Path(path).write_text(buf.getvalue())


def write_manifest(out: Path, command: str, config: dict, seed, outputs: list, started: float) -> Path:
    path = Path(f"{out}.manifest.json")
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": [str(o) for o in outputs],
        "started": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_clock_seconds": time.time() - started,
    }
    path.write_text(dumps_json(manifest))
    return path


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# --- inputs -------------------------------------------------------------------


def load_dataset(path, use_tfidf: bool = False, idf_smooth: bool = False) -> SparseDataset:
    path = Path(path)
    ds = load_cache(path) if path.suffix in (".bin", ".cache") else load_xmc(path)
    return tfidf(ds, smooth=idf_smooth) if use_tfidf else ds


def read_scores(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataFormatError("scores header must be 'num_examples num_labels'", 1)
        try:
            n, l = int(header[0]), int(header[1])
            rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
        except ValueError as exc:
            raise DataFormatError(f"bad scores file: {exc}") from None
    if len(rows) != n or any(len(r) != l for r in rows):
        raise DataFormatError(f"scores file does not contain {n} rows of {l} values")
    scores = np.array(rows, dtype=np.float64).reshape(n, l)
    if not np.all(np.isfinite(scores)):
        raise DataFormatError("scores must be finite")
    return scores


def write_scores(path, scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    lines = [f"{scores.shape[0]} {scores.shape[1]}\n"]
    lines += [" ".join(fmt(v) for v in row) + "\n" for row in scores]
    Path(path).write_text("".join(lines))


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string("[train]\n" + text)
    except configparser.Error as exc:
        raise DataFormatError(f"cannot parse config {path}: {exc}") from None
    return dict(cp["train"])


def parse_train_values(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in TRAIN_KEYS:
            raise ParameterError(f"unknown config key {key!r}; known keys: {', '.join(TRAIN_KEYS)}")
        try:
            out[key] = TRAIN_KEYS[key](value)
        except ValueError as exc:
            raise ParameterError(f"bad value for {key}: {exc}") from None
    return out


def make_train_config(values: dict) -> TrainConfig:
    v = {**TRAIN_DEFAULTS, **values}
    loss = Reduction(v.pop("kind"), v.pop("base"), v.pop("variant"), v.pop("full_denominator"), v.pop("cap"))
    return TrainConfig(loss=loss, **v)


def config_snapshot(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    loss = d.pop("loss")
    loss["variant"] = cfg.loss.variant.value
    return {**loss, **d}


def parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise UsageError(f"--sweep expects key=v1,v2,..., got {text!r}")
    key, values = text.split("=", 1)
    key = key.strip()
    if key not in TRAIN_KEYS:
        raise UsageError(f"cannot sweep unknown key {key!r}")
    grid = [TRAIN_KEYS[key](v.strip()) for v in values.split(",") if v.strip()]
    if not grid:
        raise UsageError("--sweep grid is empty")
    return key, grid


# --- parser ---------------------------------------------------------------------


def _add_train_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="key = value training config file")
    for key, conv in TRAIN_KEYS.items():
        sp.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="V", help=f"override {key}")


def _add_experiment_options(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--synthetic", action="store_true", help="use the built-in synthetic linear task")
    sp.add_argument("--data", help="clean training pool (XMC text or binary cache)")
    sp.add_argument("--test", help="clean test set")
    sp.add_argument("--propensities", help="propensity TSV (required with --data)")
    sp.add_argument("--top-labels", type=int, help="keep the most frequent labels of the training split")
    sp.add_argument("--val-fraction", type=float, default=0.3)
    sp.add_argument("--tfidf", action="store_true")
    sp.add_argument("--idf-smooth", action="store_true")
    sp.add_argument("--examples", type=int, default=2000, help="synthetic pool size")
    sp.add_argument("--test-examples", type=int, default=2000)
    sp.add_argument("--features", type=int, default=50)
    sp.add_argument("--labels", type=int, default=20)
    sp.add_argument("--top", type=float, default=2.0, help="inverse propensity of the most frequent label")
    sp.add_argument("--bottom", type=float, default=10.0, help="inverse propensity of the rarest label")
    sp.add_argument("--split-seed", type=int, default=0, help="seed for data generation, splitting and masking")
    sp.add_argument("--sweep", default="l2=1e-5,1e-4,1e-3,1e-2,1e-1", help="l2=v1,v2,...")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pslosses", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="worker processes (default: $PSLOSSES_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("propensity", help="propensities from label counts")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", choices=("jain", "linear"), default="jain")
    sp.add_argument("--a", type=float)
    sp.add_argument("--b", type=float)
    sp.add_argument("--top", type=float, default=2.0)
    sp.add_argument("--bottom", type=float, default=10.0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("simulate-recall", help="recall estimators under repeated masking")
    sp.add_argument("--labels", type=int, default=100)
    sp.add_argument("--label-prob", type=float, default=0.1)
    sp.add_argument("--examples", type=int, default=10000)
    sp.add_argument("--p-grid", default=",".join(fmt(p) for p in DEFAULT_P_GRID))
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--skip-empty", action="store_true", help="average only over examples with observed labels")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("evaluate", help="P@k, R@k and their propensity-scored versions")
    sp.add_argument("--truth", required=True, help="labels (XMC text, features may be empty)")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--propensities")
    sp.add_argument("--k", default="1,3,5")
    sp.add_argument("--ps", action="store_true", help="add PSP@k and PSR@k")
    sp.add_argument("--filter-q", type=float, default=None,
                    help=f"quantile trimming of PS metrics (e.g. {DEFAULT_FILTER_Q}); off by default")
    sp.add_argument("--seed", type=int, default=0, help="seed for subsampled PS recall")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train a linear model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--propensities", help="propensity TSV (default: all 1)")
    sp.add_argument("--tfidf", action="store_true")
    sp.add_argument("--idf-smooth", action="store_true")
    sp.add_argument("--top-labels", type=int)
    sp.add_argument("--drop-unlabeled", action="store_true",
                    help="drop examples without labels (normalized weights are undefined there)")
    sp.add_argument("--sweep", help="key=v1,v2,... trains one model per value")
    sp.add_argument("--out", required=True, help="model checkpoint path")
    _add_train_options(sp)

    sp = sub.add_parser("sweep", help="regularization sweep evaluated on every split")
    _add_experiment_options(sp)
    _add_train_options(sp)
    sp.add_argument("--train-on", choices=("noisy", "clean"), default="noisy")
    sp.add_argument("--k", default="1,3,5")
    sp.add_argument("--out", required=True, help="CSV path")

    sp = sub.add_parser("gap-analysis", help="finite-sample vs noise-pattern generalization gaps")
    _add_experiment_options(sp)
    _add_train_options(sp)
    sp.add_argument("--out", required=True, help="CSV path")

    sp = sub.add_parser("synthesize", help="write the synthetic linear task as XMC files")
    sp.add_argument("--examples", type=int, default=2000)
    sp.add_argument("--test-examples", type=int, default=2000)
    sp.add_argument("--features", type=int, default=50)
    sp.add_argument("--labels", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="training file; the test set goes to <out>.test")
    return parser


# --- commands -------------------------------------------------------------------


def _train_values(args) -> dict:
    values = parse_train_values(read_config_file(args.config)) if args.config else {}
    flags = {k: getattr(args, f"opt_{k}") for k in TRAIN_KEYS if getattr(args, f"opt_{k}") is not None}
    values.update(parse_train_values(flags))
    return values


def cmd_propensity(args) -> tuple[dict, list]:
    ds = load_dataset(args.data)
    if args.model == "jain":
        if args.a is None or args.b is None:
            raise UsageError("--model jain needs --a and --b")
        p = jain_propensity(JainModelParams(args.a, args.b, ds.num_examples), ds.label_counts())
    else:
        ranked = linear_inverse_propensity(ds.num_labels, args.top, args.bottom).p
        values = np.empty(ds.num_labels)
        values[label_frequency_order(ds)] = ranked
        p = Propensities(values)
    out = _ensure_parent(Path(args.out))
    write_propensities(out, p)
    return {"model": args.model, "a": args.a, "b": args.b, "top": args.top, "bottom": args.bottom,
            "data": args.data, "num_examples": ds.num_examples}, [out]


def cmd_simulate_recall(args) -> tuple[dict, list]:
    spec = SyntheticSpec(args.labels, args.label_prob, args.examples, args.seed)
    grid = _float_list(args.p_grid)
    rows = recall_variance_sweep(spec, grid, args.reps, skip_empty=args.skip_empty, threads=args.threads)
    out = _ensure_parent(Path(args.out))
    write_csv(out, ["p", "estimator", "mean", "std", "true_recall"], rows)
    return {**asdict(spec), "p_grid": grid, "reps": args.reps, "skip_empty": args.skip_empty}, [out]


def cmd_evaluate(args) -> tuple[dict, list]:
    if args.ps and not args.propensities:
        raise UsageError("--ps needs --propensities")
    ks = _int_list(args.k)
    truth = load_dataset(args.truth)
    scores = read_scores(args.scores)
    if scores.shape != (truth.num_examples, truth.num_labels):
        raise DataFormatError(f"scores shape {scores.shape} does not match labels "
                              f"({truth.num_examples}, {truth.num_labels})")
    p = read_propensities(args.propensities, truth.num_labels) if args.ps else None
    report = evaluate_predictions(truth.label_sets(), scores, ks, p, args.filter_q, rng=args.seed)
    out = _ensure_parent(Path(args.out))
    out.write_text(dumps_json({
        "num_examples": truth.num_examples,
        "k": ks,
        "filter_q": args.filter_q,
        "metrics": {name: m.to_dict() for name, m in report.items()},
    }))
    return {"truth": args.truth, "scores": args.scores, "propensities": args.propensities, "k": ks,
            "ps": args.ps, "filter_q": args.filter_q, "seed": args.seed}, [out]


def _sweep_path(out: Path, key: str, value) -> Path:
    return out.with_name(f"{out.stem}.{key}_{fmt(value)}{out.suffix}")


def cmd_train(args) -> tuple[dict, list]:
    cfg = make_train_config(_train_values(args))
    sweep = parse_sweep(args.sweep) if args.sweep else None
    ds = load_dataset(args.data, args.tfidf, args.idf_smooth)
    if args.top_labels:
        ds = top_n_labels(ds, args.top_labels)
    if args.drop_unlabeled:
        ds = ds.subset(np.flatnonzero(np.diff(ds.label_matrix.indptr) > 0))
    p = read_propensities(args.propensities, ds.num_labels) if args.propensities else Propensities.uniform(1.0, ds.num_labels)
    out = _ensure_parent(Path(args.out))
    runs = [(out, cfg)]
    if sweep:
        key, grid = sweep
        runs = [(_sweep_path(out, key, v), make_train_config({**_train_values(args), key: v})) for v in grid]
    outputs, histories = [], {}
    for path, run_cfg in runs:
        history: list = []
        model = train(ds, p, run_cfg, history=history)
        model.save(path)
        outputs.append(path)
        histories[str(path)] = history
    return {**config_snapshot(cfg), "data": args.data, "propensities": args.propensities, "sweep": args.sweep,
            "drop_unlabeled": args.drop_unlabeled, "num_examples": ds.num_examples, "history": histories}, outputs


def _experiment(args):
    if args.synthetic:
        return training_experiment(args.examples, args.features, args.labels, args.top, args.bottom,
                                   args.test_examples, args.val_fraction, args.split_seed)
    if not (args.data and args.test and args.propensities):
        raise UsageError("give --synthetic or all of --data, --test and --propensities")
    pool = load_dataset(args.data, args.tfidf, args.idf_smooth)
    test = load_dataset(args.test, args.tfidf, args.idf_smooth)
    n_labels = args.top_labels or pool.num_labels
    p = read_propensities(args.propensities, n_labels)
    return build_experiment(pool, test, p, args.val_fraction, args.split_seed, args.top_labels), p


def _experiment_snapshot(args) -> dict:
    keys = ("synthetic", "data", "test", "propensities", "top_labels", "val_fraction", "tfidf", "idf_smooth",
            "examples", "test_examples", "features", "labels", "top", "bottom", "split_seed", "sweep")
    return {k: getattr(args, k) for k in keys}


def cmd_sweep(args) -> tuple[dict, list]:
    key, grid = parse_sweep(args.sweep)
    if key != "l2":
        raise UsageError("the sweep command only sweeps l2")
    splits, p = _experiment(args)
    values = _train_values(args)
    if args.train_on == "clean":
        values["variant"] = "vanilla"
    cfg = make_train_config(values)
    ks = _int_list(args.k)
    result = regularization_sweep(splits, p, cfg, grid, train_on=args.train_on, ks=ks)
    out = _ensure_parent(Path(args.out))
    header = ["l2", "split", "loss"] + [f"{m}@{k}" for k in ks for m in ("P", "R", "PSP", "PSR")]
    write_csv(out, header, result.rows)
    return {**config_snapshot(cfg), **_experiment_snapshot(args), "train_on": args.train_on, "k": ks,
            "optimal_l2": result.optimal_l2, "selection_split": result.selection_split}, [out]


def cmd_gap_analysis(args) -> tuple[dict, list]:
    key, grid = parse_sweep(args.sweep)
    if key != "l2":
        raise UsageError("gap-analysis only sweeps l2")
    splits, p = _experiment(args)
    cfg = make_train_config(_train_values(args))
    rows = []
    for l2 in grid:
        model = train(splits.noisy_train, p, replace(cfg, l2=float(l2)))
        fs, npg = noise_pattern_gap(model, splits.clean_train, splits.noisy_train, splits.clean_test, cfg.loss, p,
                                    cfg.link)
        rows.append({"l2": float(l2), "finite_sample_gap": fs, "noise_pattern_gap": npg, "total_gap": fs + npg})
    out = _ensure_parent(Path(args.out))
    write_csv(out, ["l2", "finite_sample_gap", "noise_pattern_gap", "total_gap"], rows)
    return {**config_snapshot(cfg), **_experiment_snapshot(args)}, [out]


def cmd_synthesize(args) -> tuple[dict, list]:
    seq_train, seq_test = np.random.SeedSequence(args.seed).spawn(2)
    train_ds, teacher = make_linear_dataset(args.examples, args.features, args.labels,
                                            rng=np.random.default_rng(seq_train))
    test_ds, _ = make_linear_dataset(args.test_examples, args.features, args.labels,
                                     rng=np.random.default_rng(seq_test), teacher=teacher)
    out = _ensure_parent(Path(args.out))
    test_out = Path(f"{out}.test")
    write_xmc(out, train_ds)
    write_xmc(test_out, test_ds)
    return {"examples": args.examples, "test_examples": args.test_examples, "features": args.features,
            "labels": args.labels, "seed": args.seed}, [out, test_out]


COMMANDS = {
    "propensity": cmd_propensity,
    "simulate-recall": cmd_simulate_recall,
    "evaluate": cmd_evaluate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gap-analysis": cmd_gap_analysis,
    "synthesize": cmd_synthesize,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = args.threads if args.threads is not None else _default_threads()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        started = time.time()
        config, outputs = COMMANDS[args.command](args)
        seed = getattr(args, "seed", None)
        if seed is None:
            seed = config.get("seed")
        write_manifest(Path(args.out), args.command, config, seed, outputs, started)
    except UsageError as exc:
        print(f"pslosses {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"pslosses {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PSLossError, OSError) as exc:
        print(f"pslosses {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
