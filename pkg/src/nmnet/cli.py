"""Command-line front end.

Subcommands: synth, stats, mine, train, infer, baseline, eval.  Every
subcommand accepts ``--config FILE`` holding ``key = value`` lines (keys are
flag names without the leading dashes); flags given on the command line win.

Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import baseline, compat, synth
from . import evaluation as ev
from .errors import (
    ConfigError,
    EmptyDataset,
    InsufficientCorrespondences,
    NMNetError,
    ParseError,
    ShapeError,
    VersionError,
)

PROG = "nmnet"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage problems raise instead of exiting with argparse's code 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows every flag's default; required flags say so instead."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required:
            return text + " (required)"
        if "default" in text or action.default is argparse.SUPPRESS:
            return text
        if action.default is None:
            return text + " (default: unset)"
        return super()._get_help_string(action)


def _fmt(prog):
    return _HelpFormatter(prog, max_help_position=32)


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _ratio(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"inlier ratio must lie in (0, 1], got {text}")
    return v


def _int_list(text):
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text}")
    return vals


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p, seed=True):
    p.add_argument("--config", metavar="FILE", default=None, help="file of 'key = value' lines; command-line flags win over it")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random choice of this run")


def _data_arg(p):
    p.add_argument("--data", required=True, metavar="PATH", help="dataset file (one scene per line)")


def _graph_args(p, k_default=compat.DEFAULT_K):
    p.add_argument("--k", type=_positive_int, default=k_default, help="graph size per correspondence")
    p.add_argument("--lam", type=_positive_float, default=compat.DEFAULT_LAMBDA, help="compatibility kernel width")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Compatibility-graph correspondence classification experiments.", formatter_class=_fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset", formatter_class=_fmt)
    p.add_argument("--scenes", type=_positive_int, default=10, help="number of scenes")
    p.add_argument("--n", type=_positive_int, default=500, help="correspondences per scene")
    p.add_argument("--inlier-ratio", type=_ratio, default=0.4, help="fraction of true matches")
    p.add_argument("--kind", choices=synth.SCENE_KINDS, default="two-view-3d", help="scene model")
    p.add_argument("--outliers", choices=synth.OUTLIER_KINDS, default="mixed", help="outlier model")
    p.add_argument("--keypoint-noise", type=_nonneg_float, default=1e-3, help="keypoint noise std (normalized units)")
    p.add_argument("--frame-noise", type=_nonneg_float, default=0.01, help="relative noise std on frame entries")
    p.add_argument("--rotation-max", type=_nonneg_float, default=0.3, help="largest camera rotation angle (radians)")
    p.add_argument("--translation-scale", type=_positive_float, default=1.0, help="camera baseline length")
    p.add_argument("--depth-min", type=_positive_float, default=4.0, help="nearest point depth")
    p.add_argument("--depth-max", type=_positive_float, default=12.0, help="farthest point depth")
    p.add_argument("--out", required=True, metavar="PATH", help="dataset file to write")
    _common(p)

    p = sub.add_parser("stats", help="bucketed neighbor inlier ratios of both miners", formatter_class=_fmt)
    _data_arg(p)
    p.add_argument("--ks", type=_int_list, default="4,8,16,32", help="comma-separated neighbor counts")
    p.add_argument("--lam", type=_positive_float, default=compat.DEFAULT_LAMBDA, help="compatibility kernel width")
    _common(p, seed=False)

    p = sub.add_parser("mine", help="mine neighbor graphs for every scene", formatter_class=_fmt)
    _data_arg(p)
    _graph_args(p)
    p.add_argument("--mining", choices=("compatibility", "spatial"), default="compatibility", help="neighbor ranking")
    p.add_argument("--include-self", type=_bool, default=True, help="put the query itself at position 0")
    p.add_argument("--out", required=True, metavar="PATH", help="graph file to write (one scene per line)")
    _common(p, seed=False)

    p = sub.add_parser("train", help="train a classifier and write a checkpoint", formatter_class=_fmt)
    _data_arg(p)
    p.add_argument("--val-data", metavar="PATH", default=None, help="optional validation dataset")
    _graph_args(p)
    p.add_argument("--mining", choices=("compatibility", "spatial"), default="compatibility", help="graph mining used by the network")
    p.add_argument("--epochs", type=int, default=10, help="passes over the training set")
    p.add_argument("--batch-size", type=_positive_int, default=16, help="scenes per step")
    p.add_argument("--lr", type=_positive_float, default=1e-3, help="Adam learning rate")
    p.add_argument("--arch", choices=("full", "tiny"), default="full", help="channel profile (tiny divides every width by eight)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="training precision")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint file to write")
    p.add_argument("--history", metavar="PATH", default=None, help="optional per-epoch history file")
    _common(p)

    p = sub.add_parser("infer", help="label correspondences with a trained checkpoint", formatter_class=_fmt)
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint from 'train'")
    _data_arg(p)
    p.add_argument("--k", type=_positive_int, default=None, help="must match the checkpoint; unset means the checkpoint value")
    p.add_argument("--mining", choices=("compatibility", "spatial"), default=None, help="must match the checkpoint; unset means the checkpoint value")
    p.add_argument("--out", required=True, metavar="PATH", help="label file to write (one scene per line)")
    _common(p, seed=False)

    p = sub.add_parser("baseline", help="RANSAC with the eight-point solver", formatter_class=_fmt)
    _data_arg(p)
    p.add_argument("--iterations", type=_positive_int, default=2000, help="random hypotheses per scene")
    p.add_argument("--threshold", type=_positive_float, default=1e-4, help="inlier epipolar distance")
    p.add_argument("--out", required=True, metavar="PATH", help="result file to write (one scene per line)")
    _common(p)

    p = sub.add_parser("eval", help="compare selectors on a labeled dataset", formatter_class=_fmt)
    _data_arg(p)
    p.add_argument("--selector", action="append", choices=ev.SELECTORS, default=None, help="selector to evaluate; repeatable (default: ransac)")
    p.add_argument("--checkpoint", metavar="PATH", default=None, help="checkpoint for nmnet")
    p.add_argument("--checkpoint-sp", metavar="PATH", default=None, help="checkpoint for nmnet_sp")
    _graph_args(p)
    p.add_argument("--score-threshold", type=_positive_float, default=7.0, help="score_sum threshold")
    p.add_argument("--iterations", type=_positive_int, default=2000, help="RANSAC hypotheses per scene")
    p.add_argument("--threshold", type=_positive_float, default=1e-4, help="RANSAC inlier epipolar distance")
    p.add_argument("--out", required=True, metavar="PATH", help="report file to write")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (t.strip() for t in text.split("=", 1))
            if not key:
                raise UsageError(f"{path}:{lineno}: empty key")
            out[key.replace("-", "_")] = value
    return out


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)  # pragma: no cover


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--":
            break
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; config-file values become defaults of the chosen subcommand."""
    parser = build_parser()
    command = next((t for t in argv if not t.startswith("-")), None)
    path = _config_path(argv)
    if path is not None and command in COMMANDS:
        sub = _subparser(parser, command)
        by_dest = {a.dest: a for a in sub._actions if a.option_strings}
        try:
            values = read_config(path)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        for key, value in values.items():
            action = by_dest.get(key)
            if action is None or key in ("config", "help"):
                raise UsageError(f"{path}: unknown key {key!r}")
            if isinstance(action, argparse._AppendAction):
                value = [v.strip() for v in value.split(",") if v.strip()]
                bad = [v for v in value if action.choices and v not in action.choices]
                if bad:
                    raise UsageError(f"{path}: invalid {key} {bad[0]!r}")
            action.required = False
            sub.set_defaults(**{key: value})
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load(path):
    scenes = synth.read_dataset(path)
    return scenes


def _write_lines(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def _say(text=""):
    print(text, file=sys.stdout)


def _warn(text):
    print(f"{PROG}: {text}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    if args.depth_min >= args.depth_max:
        raise UsageError("--depth-min must be below --depth-max")
    try:
        cfg = synth.GeneratorConfig(
            n_correspondences=args.n,
            inlier_ratio=args.inlier_ratio,
            keypoint_noise_sigma=args.keypoint_noise,
            frame_noise_sigma=args.frame_noise,
            scene_kind=args.kind,
            rotation_max=args.rotation_max,
            translation_scale=args.translation_scale,
            depth_range=(args.depth_min, args.depth_max),
            outlier_kind=args.outliers,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.inlier_ratio * args.n < 1:
        raise UsageError(f"--inlier-ratio {args.inlier_ratio} leaves no inliers for --n {args.n}")
    scenes = synth.generate_many(cfg, args.scenes, seed=args.seed)
    synth.write_dataset(args.out, scenes)
    ratios = np.array([s.inlier_ratio for s in scenes])
    _say(f"wrote {len(scenes)} scenes to {args.out}")
    _say(f"inlier ratio: mean {ratios.mean():.4f} min {ratios.min():.4f} max {ratios.max():.4f}")
    return EXIT_OK


def cmd_stats(args):
    scenes = _load(args.data)
    stats = compat.NeighborStats(tuple(args.ks))
    used = 0
    for i, s in enumerate(scenes):
        if not s.labels.any():
            _warn(f"scene {i}: no inliers, skipped")
            continue
        try:
            compat.neighbor_inlier_stats([(s.corrs, s.labels)], args.ks, args.lam, stats)
            used += 1
        except InsufficientCorrespondences as exc:
            _warn(f"scene {i}: {exc}")
    _say(f"scenes used: {used} of {len(scenes)}")
    _say(stats.table())
    return EXIT_OK


def cmd_mine(args):
    scenes = _load(args.data)
    records = []
    for i, s in enumerate(scenes):
        if args.mining == "compatibility":
            g = compat.mine_cs_knn(compat.score_matrix(s.corrs, args.lam), args.k, args.include_self)
        else:
            g = compat.mine_spatial_knn(s.corrs, args.k, args.include_self)
        records.append({"scene": i, "k": args.k, "mining": args.mining, "include_self": args.include_self, "indices": g.indices.tolist(), "scores": g.scores.tolist()})
    _write_lines(args.out, records)
    _say(f"wrote {len(records)} graphs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .net import train as T

    try:
        cfg = T.TrainConfig(
            learning_rate=args.lr,
            batch_size=args.batch_size,
            epochs=args.epochs,
            k=args.k,
            lam=args.lam,
            seed=args.seed,
            mining=args.mining,
            arch=args.arch,
            dtype=args.dtype,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scenes = _load(args.data)
    val = _load(args.val_data) if args.val_data else None

    def report(entry):
        cells = " ".join(f"{k} {v:.6f}" for k, v in entry.items() if k != "epoch")
        _say(f"epoch {entry['epoch']}: {cells}")

    model, history = T.train(scenes, cfg, val_scenes=val, callback=report)
    T.save_checkpoint(args.out, model, cfg)
    if args.history:
        with open(args.history, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(history, fh, indent=1, sort_keys=True)
            fh.write("\n")
    _say(f"wrote checkpoint to {args.out}")
    return EXIT_OK


def cmd_infer(args):
    from .net import train as T

    model, cfg = T.load_checkpoint(args.checkpoint)
    T.check_compatible(cfg, args.k, args.mining)
    scenes = _load(args.data)
    records = []
    for i, s in enumerate(scenes):
        probs, labels = T.infer(model, s, cfg)
        records.append({"scene": i, "probabilities": probs.tolist(), "labels": labels.tolist()})
    _write_lines(args.out, records)
    _say(f"wrote labels for {len(records)} scenes to {args.out}")
    return EXIT_OK


def cmd_baseline(args):
    scenes = _load(args.data)
    cfg = baseline.RansacConfig(iterations=args.iterations, inlier_threshold=args.threshold, seed=args.seed)
    records = []
    for i, s in enumerate(scenes):
        try:
            e, labels = baseline.ransac(s.corrs, cfg)
            records.append({"scene": i, "e": e.reshape(9).tolist(), "labels": labels.tolist(), "flag": None})
        except NMNetError as exc:
            records.append({"scene": i, "e": None, "labels": [0] * len(s), "flag": type(exc).__name__})
            _warn(f"scene {i}: {exc}")
    _write_lines(args.out, records)
    _say(f"wrote RANSAC results for {len(records)} scenes to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    from .net import train as T

    names = list(dict.fromkeys(args.selector or ["ransac"]))
    selectors = {}
    for name in names:
        if name in ("nmnet", "nmnet_sp"):
            path = args.checkpoint if name == "nmnet" else args.checkpoint_sp
            flag = "--checkpoint" if name == "nmnet" else "--checkpoint-sp"
            if not path:
                raise UsageError(f"selector {name} needs {flag}")
            model, cfg = T.load_checkpoint(path)
            want = "compatibility" if name == "nmnet" else "spatial"
            T.check_compatible(cfg, mining=want)
            selectors[name] = ev.make_selector(name, model=model, config=cfg)
        elif name == "score_sum":
            if args.score_threshold > args.k:
                raise UsageError(f"--score-threshold must not exceed --k ({args.k})")
            selectors[name] = ev.make_selector(name, k=args.k, lam=args.lam, threshold=args.score_threshold)
        else:
            rcfg = baseline.RansacConfig(iterations=args.iterations, inlier_threshold=args.threshold, seed=args.seed)
            selectors[name] = ev.make_selector(name, ransac_config=rcfg)
    scenes = _load(args.data)
    if not scenes:
        raise EmptyDataset(f"{args.data} holds no scenes")
    report = ev.evaluate_pipeline(scenes, selectors)
    ev.write_report(args.out, report)
    _say(ev.format_table(report))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "mine": cmd_mine,
    "train": cmd_train,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
}

DATA_ERRORS = (ParseError, VersionError, EmptyDataset, ShapeError, InsufficientCorrespondences)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _warn(f"usage error: {exc}")
        return EXIT_USAGE
    except ConfigError as exc:
        _warn(f"configuration error: {exc}")
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        _warn(f"data error: {exc}")
        return EXIT_DATA
    except FileNotFoundError as exc:
        _warn(f"data error: {exc.filename}: {exc.strerror}")
        return EXIT_DATA
    except OSError as exc:
        _warn(f"I/O error: {exc.filename}: {exc.strerror}")
        return EXIT_RUNTIME
    except NMNetError as exc:
        _warn(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
