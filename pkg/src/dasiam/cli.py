"""Command-line entry point: ``dasiam <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, inputs or configs), 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__, io
from .domain import a_distance, features_csv
from .errors import ConfigurationError, DasiamError
from .haze import DEFAULT_AIRLIGHT, EVAL_BETA_RANGE, TRAIN_BETA_RANGE, BetaSampler, HazeParams, haze_dataset
from .metrics import (
    BURN_IN, compare_report, otb_report, render_table, report_csv, supervised_runs, vot_from_runs, vot_report,
)
from .siamese.model import ModelConfig
from .siamese.tracker import SiameseTracker, TrackerConfig, predictions_path, track_sequence
from .synthseq import DefaultSpecSampler, derive_seeds, generate_sequence, pseudo_tir
from .trainer import TrainConfig, load_model, model_config_from_file, prepare_pseudo_crops, train

log = logging.getLogger("dasiam")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(DasiamError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2; usage problems are validation errors here
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ---------------------------------------------------------------

def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map, in worker processes when ``jobs > 1``; results never depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _guard(path: Path, no_overwrite: bool) -> None:
    if no_overwrite and path.exists() and (path.is_file() or any(path.iterdir())):
        raise UsageError(f"{path} exists and --no-overwrite is set")


def _publish_dir(build: Callable[[Path], None], out: Path, no_overwrite: bool) -> None:
    """Build into a sibling temp dir and swap it in, so a failed run never leaves a half-written tree."""
    _guard(out, no_overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        build(tmp)
        if out.exists():
            shutil.rmtree(out) if out.is_dir() else out.unlink()
        tmp.rename(out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def _write_text(path: Optional[Path], text: str, no_overwrite: bool) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    _guard(path, no_overwrite)
    path.parent.mkdir(parents=True, exist_ok=True)
    io.atomic_write_text(path, text)


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None


def _load(path: Path):
    if not Path(path).exists():
        raise UsageError(f"{path}: no such dataset")
    return io.load_dataset(path)


def _model(checkpoint: Path):
    if not Path(checkpoint).exists():
        raise UsageError(f"{checkpoint}: no such checkpoint")
    return load_model(checkpoint)


def _tracker_config(args) -> TrackerConfig:
    return TrackerConfig(window_influence=args.window_influence, penalty_k=args.penalty_k, lr=args.scale_lr)


# module-level workers so they pickle for --jobs
def _synth_one(item, sampler, root):
    i, seed, prefix, n_eval, n, corpus_seed = item
    ds = generate_sequence(sampler(np.random.default_rng(seed)), seed, name=f"{prefix}{i:04d}")
    ds.meta["split"] = "eval" if i >= n - n_eval else "train"
    ds.meta["corpus_seed"] = corpus_seed
    io.save_dataset(ds, root)
    return ds.name


def _haze_one(item, params, root):
    seq_dir, seed = item
    io.save_dataset(haze_dataset(io.load_sequence(seq_dir), params, seed), root)


def _tir_one(seq_dir, band, root):
    io.save_dataset(pseudo_tir(io.load_sequence(seq_dir), band), root)


def _track_one(seq_dir, model, config):
    ds = io.load_sequence(seq_dir)
    boxes, scores = track_sequence(model, ds, config)
    return ds.name, boxes, scores


def _vot_one(seq_dir, model, config):
    ds = io.load_sequence(seq_dir)
    if len(ds) <= BURN_IN + 1:
        return ds.name, None
    return ds.name, supervised_runs(SiameseTracker(model, config), ds)


def _sequence_dirs(root: Path) -> list[Path]:
    root = Path(root)
    if not root.exists():
        raise UsageError(f"{root}: no such dataset")
    if (root / "groundtruth.txt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "groundtruth.txt").exists())
    if not dirs:
        raise UsageError(f"{root}: no sequence directories found")
    return dirs


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    sampler = DefaultSpecSampler(length=args.length, target_depth_range=(args.target_depth_min, args.target_depth_max),
                                 extra={"background_depth": (args.background_depth_min, args.background_depth_max)})
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    n_eval = int(round(args.n * args.eval_fraction))
    items = [(i, s, args.prefix, n_eval, args.n, args.seed) for i, s in enumerate(derive_seeds(args.seed, args.n))]
    _publish_dir(lambda root: _pmap(functools.partial(_synth_one, sampler=sampler, root=root), items, args.jobs),
                 args.out, args.no_overwrite)
    log.info("wrote %d sequences to %s", args.n, args.out)
    return EXIT_OK


def cmd_haze(args) -> int:
    dirs = _sequence_dirs(args.data)
    if args.beta is not None:
        params = HazeParams.uniform(args.beta, airlight=(args.airlight,) * 3, depth_scale=args.depth_scale)
    else:
        lo, hi = args.beta_range or (TRAIN_BETA_RANGE if args.split == "train" else EVAL_BETA_RANGE)
        params = BetaSampler(lo, hi, airlight=(args.airlight,) * 3, depth_scale=args.depth_scale)
    seeds = [int(s) for s in np.random.SeedSequence(args.seed).generate_state(len(dirs))]
    _publish_dir(lambda root: _pmap(functools.partial(_haze_one, params=params, root=root),
                                    list(zip(dirs, seeds)), args.jobs), args.out, args.no_overwrite)
    return EXIT_OK


def cmd_tir(args) -> int:
    dirs = _sequence_dirs(args.data)
    _publish_dir(lambda root: _pmap(functools.partial(_tir_one, band=args.band, root=root), dirs, args.jobs),
                 args.out, args.no_overwrite)
    return EXIT_OK


TRAIN_FLAGS = ("epochs", "iters_per_epoch", "batch_size", "lambda_da", "lambda_grl", "freeze_backbone_until",
               "pseudo_threshold")


def _train_config(args, file_values: dict) -> TrainConfig:
    values = {k: v for k, v in file_values.items() if k in {f.name for f in dataclasses.fields(TrainConfig)}}
    for key in TRAIN_FLAGS:
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.no_da:
        values["enable_da"] = False
    values["seed"] = args.seed
    return TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    cfg = _train_config(args, args.config_values)
    sources = _load(args.source)
    model_config = model_config_from_file(args.model_config) if args.model_config else ModelConfig()
    pool, skipped = [], []
    if args.target is not None and cfg.enable_da:
        if args.baseline is None:
            raise UsageError("--target needs --baseline (the checkpoint that produces pseudo-labels)")
        baseline = _model(args.baseline)
        pool, skipped = prepare_pseudo_crops(_load(args.target), baseline, cfg.pseudo_threshold,
                                             checkpoint=str(args.baseline))
        if not pool:
            raise UsageError("every target sequence was skipped by the pseudo-label threshold")
    elif cfg.enable_da and cfg.lambda_da > 0:
        log.info("no --target given; training without domain adaptation")
        cfg = dataclasses.replace(cfg, enable_da=False)

    def build(root: Path) -> None:
        train(sources, pool, cfg, model_config, out_dir=root)
        if skipped:
            io.atomic_write_text(root / "skipped_targets.txt", "".join(f"{s}\n" for s in skipped))

    _publish_dir(build, args.out, args.no_overwrite)
    print(args.out / f"epoch_{cfg.epochs:02d}.ckpt")
    return EXIT_OK


def cmd_track(args) -> int:
    model = _model(args.checkpoint)
    dirs = _sequence_dirs(args.data)
    results = _pmap(functools.partial(_track_one, model=model, config=_tracker_config(args)), dirs, args.jobs)

    def build(root: Path) -> None:
        for name, boxes, scores in results:
            io.write_predictions(predictions_path(root, name), boxes, scores)

    _publish_dir(build, args.out, args.no_overwrite)
    return EXIT_OK


def cmd_eval(args) -> int:
    dirs = _sequence_dirs(args.data)
    datasets_meta = str(args.data)
    if args.protocol == "otb":
        gts = {d.name: io.read_groundtruth(d / "groundtruth.txt") for d in dirs}
        if args.preds is not None:
            preds = {}
            for name in gts:
                p = predictions_path(args.preds, name)
                if not p.exists():
                    raise UsageError(f"missing predictions {p}")
                preds[name] = io.read_predictions(p)[0]
        elif args.checkpoint is not None:
            model = _model(args.checkpoint)
            out = _pmap(functools.partial(_track_one, model=model, config=_tracker_config(args)), dirs, args.jobs)
            preds = {name: boxes for name, boxes, _ in out}
        else:
            raise UsageError("otb evaluation needs --preds or --checkpoint")
        report = otb_report(preds, gts, dataset=datasets_meta, checkpoint=str(args.checkpoint or ""), seed=args.seed)
    else:
        if args.checkpoint is None:
            raise UsageError("vot evaluation re-runs the tracker and needs --checkpoint")
        model = _model(args.checkpoint)
        parts = _pmap(functools.partial(_vot_one, model=model, config=_tracker_config(args)), dirs, args.jobs)
        # EAO pools runs across sequences, so workers return raw runs and aggregation happens once here
        result = vot_from_runs({name: runs for name, runs in parts if runs is not None})
        result.excluded = [name for name, runs in parts if runs is None]
        for name in result.excluded:
            log.warning("%s: not longer than the burn-in; excluded", name)
        report = vot_report(result, dataset=datasets_meta, checkpoint=str(args.checkpoint), seed=args.seed)
    _write_text(args.out, io.dumps_json(report), args.no_overwrite)
    if args.csv is not None:
        _write_text(args.csv, report_csv(report), args.no_overwrite)
    return EXIT_OK


def _features(args, which: str) -> np.ndarray:
    model = _model(args.checkpoint)
    return _feature_rows(model, _load(getattr(args, which)), args)


def _feature_rows(model, datasets, args) -> np.ndarray:
    from .experiments import target_features

    return target_features(model, datasets, level=args.level, every=args.every, flatten=args.flatten)


def _read_features_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].endswith(",domain"):
        raise UsageError(f"{path}: expected a header ending in ',domain'")
    try:
        data = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line])
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return data[data[:, -1] == 0, :-1], data[data[:, -1] == 1, :-1]


def cmd_adistance(args) -> int:
    if args.features is not None:
        src, tgt = _read_features_csv(args.features)
    else:
        if args.checkpoint is None or args.source is None or args.target is None:
            raise UsageError("adistance needs --features or all of --checkpoint, --source and --target")
        src, tgt = _features(args, "source"), _features(args, "target")
    d = a_distance(src, tgt, seed=args.seed)
    report = {"schema": 1, "a_distance": d, "n_source": int(len(src)), "n_target": int(len(tgt)), "seed": args.seed,
              "checkpoint": str(args.checkpoint or ""), "features": str(args.features or "")}
    _write_text(args.out, io.dumps_json(report), args.no_overwrite)
    return EXIT_OK


def cmd_export_features(args) -> int:
    src, tgt = _features(args, "source"), _features(args, "target")
    _write_text(args.out, features_csv(src, tgt), args.no_overwrite)
    return EXIT_OK


def cmd_compare(args) -> int:
    cmp_ = compare_report(_read_json(args.baseline), _read_json(args.adapted))
    if args.out is not None:
        _write_text(args.out, io.dumps_json(cmp_), args.no_overwrite)
    sys.stdout.write(render_table([(args.label, cmp_)]))
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise UsageError(f"{path}: no such file or directory")
    if path.is_dir():
        dss = io.load_dataset(path)
        info = {"sequences": [{"name": d.name, "frames": len(d), "size": list(d.frame_size),
                               "depth": d.depth is not None, "domain": d.meta.get("domain", "clean")} for d in dss]}
    elif path.suffix == ".json":
        rep = _read_json(path)
        info = {k: rep.get(k) for k in ("schema", "protocol", "dataset", "checkpoint", "aggregate") if k in rep}
    else:
        entries = io.inspect_checkpoint(path)
        info = {"tensors": len(entries), "parameters": int(sum(int(np.prod(s)) for _, s in entries)),
                "entries": [{"name": n, "shape": list(s)} for n, s in entries]}
    sys.stdout.write(io.dumps_json(info))
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step (default 0)")
    p.add_argument("--config", type=Path, help="key = value file; flags override its values")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for synth/haze/track/eval")
    p.add_argument("--no-overwrite", action="store_true", help="refuse to replace existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _tracker_flags(p: argparse.ArgumentParser) -> None:
    d = TrackerConfig()
    p.add_argument("--window-influence", type=float, default=d.window_influence)
    p.add_argument("--penalty-k", type=float, default=d.penalty_k)
    p.add_argument("--scale-lr", type=float, default=d.lr)


def _feature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--source", type=Path)
    p.add_argument("--target", type=Path)
    p.add_argument("--level", type=int, default=-1, help="feature level index (default: deepest)")
    p.add_argument("--every", type=int, default=5, help="sample every Nth frame")
    p.add_argument("--flatten", action="store_true", help="keep whole maps instead of channel means")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="dasiam", description="Domain-adaptive Siamese tracking workbench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic sequence corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--length", type=int, default=40)
    p.add_argument("--eval-fraction", type=float, default=0.0)
    p.add_argument("--prefix", default="seq")
    p.add_argument("--target-depth-min", type=float, default=8.0)
    p.add_argument("--target-depth-max", type=float, default=8.0)
    p.add_argument("--background-depth-min", type=float, default=20.0)
    p.add_argument("--background-depth-max", type=float, default=80.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("haze", parents=[common], help="render fog into a corpus with depth maps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--beta", type=float, help="fixed extinction coefficient (overrides the range)")
    p.add_argument("--beta-range", type=float, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--split", choices=("train", "eval"), default="train", help="default beta range to use")
    p.add_argument("--airlight", type=float, default=DEFAULT_AIRLIGHT)
    p.add_argument("--depth-scale", type=float, help="metres per depth unit (default: normalise per sequence)")
    p.set_defaults(func=cmd_haze)

    p = sub.add_parser("tir", parents=[common], help="pseudo-thermal copy of a corpus")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--band", type=float, default=48.0)
    p.set_defaults(func=cmd_tir)

    p = sub.add_parser("train", parents=[common], help="train a tracker, optionally with domain adaptation")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, help="unlabelled target-domain corpus")
    p.add_argument("--baseline", type=Path, help="checkpoint used to pseudo-crop the target corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model-config", type=Path, help="model_config.json to build the network from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-da", type=float)
    p.add_argument("--lambda-grl", type=float)
    p.add_argument("--freeze-backbone-until", type=int)
    p.add_argument("--pseudo-threshold", type=float)
    p.add_argument("--no-da", action="store_true", help="build no domain modules")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="write per-sequence predictions")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _tracker_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="OTB or VOT-style evaluation report")
    p.add_argument("--protocol", choices=("otb", "vot"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--preds", type=Path, help="directory of <name>_pred.txt files (otb)")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, help="JSON report path (default: stdout)")
    p.add_argument("--csv", type=Path, help="also write per-sequence CSV")
    _tracker_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adistance", parents=[common], help="proxy A-distance between two feature sets")
    _feature_flags(p)
    p.add_argument("--features", type=Path, help="CSV written by export-features")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_adistance)

    p = sub.add_parser("export-features", parents=[common], help="per-sample features with domain labels as CSV")
    _feature_flags(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("compare", parents=[common], help="baseline vs adapted report deltas")
    p.add_argument("--baseline", type=Path, required=True)
    p.add_argument("--adapted", type=Path, required=True)
    p.add_argument("--label", default="")
    p.add_argument("--out", type=Path, help="also write the comparison as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", parents=[common], help="summarise a checkpoint, dataset or report")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_inspect)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], args) -> argparse.Namespace:
    """Re-parse with config-file values as defaults so explicit flags still win."""
    values = io.read_config(args.config)
    sub = _subparser(parser, args.command)
    dests = {a.dest: a for a in sub._actions}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)} if args.command == "train" else set()
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest in ("config", "func", "help"):
            raise ConfigurationError(f"{args.config}: {key!r} cannot be set from a config file")
        action = dests.get(dest)
        if action is None:
            if dest not in train_keys:
                raise ConfigurationError(f"{args.config}: unknown option {key!r} for {args.command}")
            continue
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigurationError(f"{args.config}: {key} expects true/false, got {raw!r}")
            defaults[dest] = raw.lower() in ("true", "1", "yes")
        elif action.nargs not in (None, "?"):
            defaults[dest] = raw.split()
        else:
            defaults[dest] = raw  # argparse applies the option's type to string defaults
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for dest, action in dests.items():
        if action.nargs not in (None, "?") and isinstance(getattr(args, dest, None), list) and action.type:
            setattr(args, dest, [v if not isinstance(v, str) else action.type(v) for v in getattr(args, dest)])
    args.config_values = {k.replace("-", "_"): v for k, v in values.items()}
    return args


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.config_values = {}
        if args.config is not None:
            args = _apply_config(parser, argv, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
