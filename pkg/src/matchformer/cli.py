"""Command-line entry point.

Subcommands: selftest (invariant suite), shapes (per-stage geometry table),
match (PGM pair to TSV + overlay), train (toy reference loop), eval (manifest
evaluation report), bench (FLOPs + runtime scaling).

Exit codes: 0 success, 2 usage, 3 IO/parse failure, 4 numerical failure.
Every run that writes artifacts also writes a manifest.txt echoing the fully
resolved configuration.  MATCHFORMER_THREADS, when set, caps the BLAS thread
pools (applied before numpy loads).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _apply_thread_cap() -> None:
    cap = os.environ.get("MATCHFORMER_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import numpy as np  # noqa: E402  (after the thread cap on purpose)

from dataclasses import asdict  # noqa: E402

from . import data as D  # noqa: E402
from . import evalkit as E  # noqa: E402
from . import matcher as M  # noqa: E402
from . import tensor as T  # noqa: E402
from . import selftest as S  # noqa: E402
from .encoder import (make_config, output_plan, parse_config_text,  # noqa: E402
                      stage_plan, _MODEL_KEYS)
from .model import MatchModel  # noqa: E402
from .trainer import (TrainConfig, TrainingDivergedError, config_from_dict,  # noqa: E402
                      train_toy)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_manifest(out_dir, args_dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"timestamp: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for key in sorted(args_dict):
            fh.write(f"{key}: {args_dict[key]}\n")


def _load_split_config(path):
    """Split a config file into model keys and trainer keys."""
    try:
        with open(path) as fh:
            raw = parse_config_text(fh.read())
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_IO)
    model_raw = {k: v for k, v in raw.items() if k in _MODEL_KEYS}
    train_raw = {k: v for k, v in raw.items() if k not in _MODEL_KEYS}
    return model_raw, train_raw


def _merge_model_keys(train_raw: dict, model_raw: dict) -> dict:
    """Fold model-section keys into trainer-config key names."""
    merged = dict(train_raw)
    for k in ("variant", "attention", "channels", "coarse_channels",
              "fine_channels", "fusion_channels"):
        if k in model_raw:
            merged[k] = model_raw[k]
    if "pe" in model_raw:
        merged["patch_embed"] = model_raw["pe"]
    if "cross_flags" in model_raw:
        merged["schedule"] = model_raw["cross_flags"]
    return merged


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_selftest(args) -> int:
    if args.inject_fault:
        T.inject_fault(args.inject_fault)
    try:
        results = S.run_all(seed=args.seed)
    finally:
        T.clear_faults()
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if failed:
        print(f"FAILED groups: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} invariant groups passed")
    return EXIT_OK


def cmd_shapes(args) -> int:
    cfg = make_config(args.variant, args.attention)
    plan = stage_plan(cfg, args.height, args.width)
    (cc, hc, wc), (cf, hf, wf) = output_plan(cfg, args.height, args.width)
    print(f"{args.variant}-{args.attention} @ {args.height}x{args.width}")
    print(f"{'stage':<8}{'resolution':<16}{'channels':<10}{'attention'}")
    for i, ((c, h, w), st) in enumerate(zip(plan, cfg.stages)):
        extra = f"A={st.heads}" + (f", R={st.reduction}" if st.attention == "sea" else "")
        print(f"F{i + 1:<7}{f'{h}x{w}':<16}{c:<10}{st.attention.upper()} ({extra})")
    print(f"{'coarse':<8}{f'{hc}x{wc}':<16}{cc}")
    print(f"{'fine':<8}{f'{hf}x{wf}':<16}{cf}")
    return EXIT_OK


def cmd_match(args) -> int:
    try:
        img_a = D.read_pgm(args.image_a)
        img_b = D.read_pgm(args.image_b)
    except (OSError, D.ImageFormatError) as e:
        raise CliError(str(e), EXIT_IO)
    model_raw = {}
    train_raw = {}
    if args.config:
        model_raw, train_raw = _load_split_config(args.config)
    model = _model_from_args(args, model_raw, train_raw)
    if args.checkpoint:
        try:
            model.load(args.checkpoint)
        except (OSError, ValueError) as e:
            raise CliError(f"checkpoint: {e}", EXIT_IO)
    matches = M.match_pair(img_a, img_b, model, tau=args.tau, theta=args.theta,
                           window=args.window)
    os.makedirs(args.out, exist_ok=True)
    M.save_matches(os.path.join(args.out, "matches.tsv"), matches)
    D.write_ppm(os.path.join(args.out, "overlay.ppm"),
                render_overlay(img_a, img_b, matches))
    _write_manifest(args.out, {"command": "match", "image_a": args.image_a,
                               "image_b": args.image_b, "tau": args.tau,
                               "theta": args.theta, "window": args.window,
                               "checkpoint": args.checkpoint or "",
                               "matches": len(matches)})
    if len(matches) == 0:
        print("warning: no matches above threshold; wrote empty TSV")
    print(f"{len(matches)} matches -> {args.out}/matches.tsv")
    return EXIT_OK


def cmd_train(args) -> int:
    model_raw, train_raw = ({}, {})
    if args.config:
        model_raw, train_raw = _load_split_config(args.config)
    for key, value in (("steps", args.steps), ("seed", args.seed)):
        if value is not None:
            train_raw[key] = str(value)
    train_raw = _merge_model_keys(train_raw, model_raw)
    for key in ("variant", "attention"):
        if getattr(args, key, None):
            train_raw[key] = getattr(args, key)
    try:
        cfg = config_from_dict(train_raw)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE)
    os.makedirs(args.out, exist_ok=True)
    try:
        result = train_toy(cfg, log_path=os.path.join(args.out, "metrics.csv"),
                           checkpoint_path=os.path.join(args.out, "checkpoint.txt"),
                           progress=args.progress)
    except (T.NumericalError, TrainingDivergedError) as e:
        raise CliError(str(e), EXIT_NUMERIC)
    _write_manifest(args.out, {"command": "train", **_cfg_dict(cfg),
                               "holdout_precision": result.holdout_precision})
    print(f"holdout precision@1cell: {result.holdout_precision:.3f}")
    print(f"checkpoint -> {args.out}/checkpoint.txt")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        entries = D.load_manifest(args.manifest)
    except (OSError, ValueError) as e:
        raise CliError(str(e), EXIT_IO)
    fixed_matches = None
    model = None
    if args.matches:
        if len(entries) != 1:
            raise CliError("--matches needs a single-entry manifest", EXIT_USAGE)
        try:
            fixed_matches = M.load_matches(args.matches)
        except (OSError, ValueError) as e:
            raise CliError(str(e), EXIT_IO)
    else:
        model_raw, train_raw = ({}, {})
        if args.config:
            model_raw, train_raw = _load_split_config(args.config)
        model = _model_from_args(args, model_raw, train_raw)
        if args.checkpoint:
            try:
                model.load(args.checkpoint)
            except (OSError, ValueError) as e:
                raise CliError(f"checkpoint: {e}", EXIT_IO)
    size = (args.height, args.width)
    curves, corner_errs, counts, inlier_counts = [], [], [], []
    for seed, h_mat in entries:
        if fixed_matches is not None:
            matches = fixed_matches
        else:
            image_a = D.gen_pattern(seed, *size)
            image_b, _ = D.warp(image_a, h_mat)
            matches = M.match_pair(image_a, image_b, model, tau=args.tau,
                                   theta=args.theta, window=args.window)
        counts.append(len(matches))
        try:
            h_est, inl = E.ransac_homography(matches.points, args.ransac_thresh,
                                             args.ransac_iters, seed=seed)
            inlier_counts.append(len(inl))
            corner_errs.append(E.corner_error(h_est, h_mat, size[1], size[0]))
            curve, _ = E.mma(M.MatchSet(points=matches.points[inl]), h_mat)
        except (E.RansacError, ValueError):
            inlier_counts.append(0)
            corner_errs.append(float("inf"))
            curve = np.zeros(len(E.MMA_THRESHOLDS))
        curves.append(curve)
    errs = np.array(corner_errs)
    report = E.EvalReport(
        accuracy_1px=float((errs < 1).mean()), accuracy_3px=float((errs < 3).mean()),
        accuracy_5px=float((errs < 5).mean()),
        mma_curve=np.mean(curves, axis=0), mean_matches=float(np.mean(counts)),
        mean_inliers=float(np.mean(inlier_counts)), n_pairs=len(entries))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.csv"), "w") as fh:
        fh.write("metric,value\n")
        for key, value in report.rows():
            fh.write(f"{key},{value}\n")
    for key, value in report.rows():
        print(f"{key:>16}: {value}")
    _write_manifest(args.out, {"command": "eval", "manifest": args.manifest,
                               "pairs": len(entries), "tau": args.tau,
                               "theta": args.theta,
                               "checkpoint": args.checkpoint or "",
                               "matches_file": args.matches or ""})
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = make_config(args.variant, args.attention)
    bd = E.flops_count(cfg, args.height, args.width,
                       include_matcher=args.include_matcher)
    print(f"{args.variant}-{args.attention} @ {args.height}x{args.width} "
          f"(pair, 1 MAC = 2 FLOPs)")
    for stage, flops in bd.by_stage().items():
        print(f"  {stage:<10} {flops / 1e9:10.2f} GFLOPs")
    for kind, flops in bd.by_kind().items():
        print(f"  [{kind:<9}] {flops / 1e9:10.2f} GFLOPs")
    print(f"  module total (conv+linear, table convention): {bd.table_gflops:.1f} GFLOPs")
    print(f"  grand total (attention included): {bd.total_gflops:.1f} GFLOPs")
    if args.runtime:
        exps = E.complexity_exponents(measure_runtime=True)
        print("scaling exponents over N in {256..4096}:")
        for key, value in exps.items():
            print(f"  {key:<16} {value:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _cfg_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def _model_from_args(args, model_raw, train_raw) -> MatchModel:
    seed = args.seed if args.seed is not None else 0
    if model_raw or train_raw:
        merged = _merge_model_keys(train_raw, model_raw)
        if getattr(args, "variant", None):
            merged["variant"] = args.variant
        if getattr(args, "attention", None):
            merged["attention"] = args.attention
        merged["seed"] = str(seed)
        merged.setdefault("steps", "0")
        try:
            tcfg = config_from_dict(merged)
        except ValueError as e:
            raise CliError(str(e), EXIT_USAGE)
        return MatchModel(tcfg.model_config(), seed=seed)
    variant = getattr(args, "variant", None) or "lite"
    attention = getattr(args, "attention", None) or "la"
    return MatchModel(make_config(variant, attention), seed=seed)


def render_overlay(img_a: np.ndarray, img_b: np.ndarray, matches) -> np.ndarray:
    """Side-by-side grayscale pair with match lines colored by confidence
    (green high, red low)."""
    h = max(img_a.shape[0], img_b.shape[0])
    w = img_a.shape[1] + img_b.shape[1]
    canvas = np.zeros((h, w, 3))
    canvas[:img_a.shape[0], :img_a.shape[1]] = img_a[..., None]
    canvas[:img_b.shape[0], img_a.shape[1]:] = img_b[..., None]
    if len(matches) == 0:
        return canvas
    confs = matches.confidences
    lo, hi = confs.min(), confs.max()
    span = max(hi - lo, 1e-9)
    for x1, y1, x2, y2, conf in matches.points:
        t = (conf - lo) / span
        color = np.array([1.0 - t, t, 0.0])  # red at low confidence, green at high
        _draw_line(canvas, x1, y1, x2 + img_a.shape[1], y2, color)
    return canvas


def _draw_line(canvas, x1, y1, x2, y2, color) -> None:
    n = int(max(abs(x2 - x1), abs(y2 - y1))) + 1
    xs = np.clip(np.round(np.linspace(x1, x2, n)).astype(int), 0, canvas.shape[1] - 1)
    ys = np.clip(np.round(np.linspace(y1, y2, n)).astype(int), 0, canvas.shape[0] - 1)
    canvas[ys, xs] = color


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchformer",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_flags=True):
        p.add_argument("--seed", type=int, default=None)
        if model_flags:
            p.add_argument("--variant", choices=("lite", "large"))
            p.add_argument("--attention", choices=("la", "sea", "full"))
            p.add_argument("--tau", type=float, default=0.1)
            p.add_argument("--theta", type=float, default=0.2)
            p.add_argument("--window", type=int, default=5)
            p.add_argument("--config")

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("shapes", help="per-stage shape table")
    p.add_argument("--variant", choices=("lite", "large"), required=True)
    p.add_argument("--attention", choices=("la", "sea", "full"), default="sea")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_shapes)

    p = sub.add_parser("match", help="match a PGM image pair")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("train", help="toy training on synthetic pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--progress", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate matching on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--matches", help="evaluate a saved match file instead of a model")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--ransac-thresh", type=float, default=2.0)
    p.add_argument("--ransac-iters", type=int, default=2000)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="FLOPs breakdown and runtime scaling")
    p.add_argument("--variant", choices=("lite", "large"), required=True)
    p.add_argument("--attention", choices=("la", "sea"), default="sea")
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--include-matcher", action="store_true")
    p.add_argument("--runtime", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.fn(args)
        if code == EXIT_OK and getattr(args, "out", None) \
                and args.command in ("selftest", "shapes", "bench"):
            _write_manifest(args.out, {"command": args.command,
                                       **{k: v for k, v in vars(args).items()
                                          if k not in ("fn", "out") and v is not None}})
        return code
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except T.ShapeError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NumericalError, E.RansacError, E.GeometryError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, D.ImageFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
