"""Command-line front end: ``psfcenter <command> [flags]``.

Every command writes its outputs plus one ``<out>.manifest.json`` that
records the resolved parameters and can be replayed with
``psfcenter replay <manifest>``.  Exit codes: 0 success, 1 usage error,
2 computation error (a JSON document with an ``error`` field goes to stdout).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (DEFAULT_METHODS, Method, ScenarioConfig, corrupt, format_table,
                    generate_scene, replicate_rng, run_monte_carlo, scene_rng,
                    write_replicates_csv)
from .errors import PsfCenterError
from .formulations import build_system
from .geometry import read_observations, write_observations
from .kernels import BACKEND
from .prox import LOSS_GRAMMAR, BoxConstraint, LossSpec
from .psf import (ExtractionParams, extract_psfs, orientation_vs_distance,
                  planted_bead_scene, read_stack, synthesize_stack, write_stack)
from .solvers import SOLVERS, PrimalDualConfig, solve

SEED_ENV = "PSFCENTER_SEED"
EXIT_USAGE = 1
EXIT_COMPUTE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument types -------------------------------------------------------------

def _floats(count=None):
    def parse(text):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
        if count is not None and len(vals) != count:
            raise argparse.ArgumentTypeError(f"expected {count} values, got {len(vals)}")
        return vals
    return parse


def _ints(count):
    def parse(text):
        vals = _floats(count)(text)
        if any(v != int(v) for v in vals):
            raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
        return tuple(int(v) for v in vals)
    return parse


def _loss(text):
    try:
        return LossSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _methods(text):
    try:
        return tuple(Method.parse(m) for m in text.split(",") if m.strip())
    except ValueError as exc:
        msg = str(exc)
        if LOSS_GRAMMAR not in msg:
            msg += f"; valid loss grammar: {LOSS_GRAMMAR}"
        raise argparse.ArgumentTypeError(msg)


def _gamma(text):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--gamma takes 'auto' or a number, got {text!r}")


def _threshold(text):
    if text == "otsu":
        return "otsu"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold takes 'otsu' or a number, got {text!r}")


def _optional_fraction(text):
    if text == "none":
        return None
    return float(text)


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer")


# -- output helpers ---------------------------------------------------------------

def _clean(obj):
    """Make ``obj`` strict-JSON: numpy scalars to Python, NaN/inf to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def _write_json(path, obj) -> None:
    Path(path).write_text(_dumps(obj))


def _scenario(args, n=None) -> ScenarioConfig:
    s1, s2, s3, s4 = args.sigmas
    return ScenarioConfig(
        n=n if n is not None else args.n,
        lateral_range=tuple(args.lateral),
        layer_depths=tuple(args.layers),
        layer_weights=tuple(args.layer_weights) if args.layer_weights else None,
        true_center=tuple(args.center),
        outlier_probability=args.epsilon,
        sigma1=s1, sigma2=s2, sigma3=s3, sigma4=s4,
        seed=args.seed,
        renormalize_directions=args.renormalize,
    )


# -- commands -------------------------------------------------------------------------

def cmd_simulate(args):
    config = _scenario(args)
    scene = generate_scene(config, scene_rng(config.seed))
    write_observations(scene, args.out)
    return {"outputs": [args.out], "inputs": []}


def cmd_corrupt(args):
    scene = read_observations(args.input)
    if len(scene) == 0:
        write_observations(scene, args.out)
        return {"outputs": [args.out], "inputs": [args.input]}
    config = _scenario(args, n=len(scene))
    noisy = corrupt(scene, config, replicate_rng(config.seed, args.replicate))
    write_observations(noisy, args.out)
    return {"outputs": [args.out], "inputs": [args.input]}


def cmd_estimate(args):
    if args.solver == "wls" and args.model != 1:
        raise UsageError("--solver wls requires --model 1")
    obs = read_observations(args.input, normalize=not args.raw_directions)
    system = build_system(obs, args.model)
    constraint = BoxConstraint.field_of_view(*args.fov) if args.fov else None
    config = PrimalDualConfig(gamma=args.gamma, max_iterations=args.max_iter,
                              relative_tolerance=args.tol, constraint=constraint,
                              keep_trace=args.trace)
    sol = solve(system, args.solver, args.loss, config)
    doc = {"solver": args.solver, "model": args.model,
           "loss": str(args.loss) if args.solver == "pd" else None,
           "observations": len(obs), **sol.to_dict()}
    _write_json(args.out, doc)
    sys.stdout.write(_dumps(doc))
    return {"outputs": [args.out], "inputs": [args.input]}


def cmd_bench(args):
    methods = args.methods or DEFAULT_METHODS
    if args.huber_t is not None:
        methods = tuple(
            Method(m.solver, m.model, m.loss.with_threshold(args.huber_t))
            if m.loss is not None and m.loss.kind.is_huber and m.loss.huber_threshold is None
            else m for m in methods)
    config = _scenario(args)
    pd_config = PrimalDualConfig(max_iterations=args.max_iter, relative_tolerance=args.tol)
    progress = None
    if args.progress:
        done = [0]

        def progress(_r):
            done[0] += 1
            print(f"\rreplicate {done[0]}/{args.reps}", end="", file=sys.stderr, flush=True)

    reports, results = run_monte_carlo(config, methods, args.reps,
                                       redraw_scene=args.redraw_scene,
                                       threads=args.threads, pd_config=pd_config,
                                       progress=progress)
    if args.progress:
        print(file=sys.stderr)
    stem = Path(args.out)
    table = format_table(reports)
    json_path = stem.with_name(stem.name + ".json")
    table_path = stem.with_name(stem.name + ".txt")
    csv_path = stem.with_name(stem.name + ".replicates.csv")
    _write_json(json_path, {
        "scenario": {k: getattr(config, k) for k in config.__dataclass_fields__},
        "replications": args.reps,
        "redraw_scene": args.redraw_scene,
        "methods": [str(m) for m in methods],
        "reports": [r.to_dict() for r in reports],
    })
    table_path.write_text(table)
    write_replicates_csv(csv_path, methods, results, config.center)
    sys.stdout.write(table)
    return {"outputs": [json_path, table_path, csv_path], "inputs": []}


def cmd_synth_stack(args):
    root = np.random.SeedSequence(args.seed)
    scene_seq, noise_seq = root.spawn(2)
    scene = planted_bead_scene(args.center, dims=args.dims, layers=args.layers,
                               per_side=args.per_side, margin=args.margin,
                               jitter=args.jitter, rng=np.random.default_rng(scene_seq))
    stack = synthesize_stack(scene, bead_sigmas=args.bead_sigmas,
                             peak_intensity=args.peak, background_level=args.background,
                             noise_sigma=args.noise, dims=args.dims,
                             rng=np.random.default_rng(noise_seq))
    sidecar = write_stack(stack, args.out)
    outputs = [args.out, sidecar]
    if args.truth:
        write_observations(scene, args.truth)
        outputs.append(args.truth)
    return {"outputs": outputs, "inputs": []}


def cmd_extract(args):
    params = ExtractionParams(blur_sigmas=args.blur, tophat_half_sizes=args.tophat,
                              threshold=args.threshold, min_volume=args.min_volume,
                              max_extent=args.max_extent,
                              eigenvalue_ratio_filter=args.ratio_filter,
                              grow_fraction=args.grow_fraction)
    result = extract_psfs(read_stack(args.input), params)
    write_observations(result.observations, args.out)
    summary = {"components": result.components, "detections": len(result.detections),
               "rejected": len(result.rejected), "skipped": result.skipped,
               "threshold": result.threshold}
    sys.stdout.write(_dumps(summary))
    return {"outputs": [args.out], "inputs": [args.input]}


def cmd_analyze(args):
    obs = read_observations(args.input)
    if len(obs) and args.ratio_filter > 0:
        obs = obs.subset(obs.weights > args.ratio_filter)
    table = orientation_vs_distance(obs, args.center)
    table.to_csv(args.out)
    out = Path(args.out)
    fit_path = out.with_name(out.name + ".fit.json")
    fit = {"count": len(table.distance), "slope": table.slope,
           "intercept": table.intercept, "r_squared": table.r_squared,
           "max_angle": float(table.angle.max()) if len(table.angle) else None}
    _write_json(fit_path, fit)
    sys.stdout.write(_dumps(fit))
    return {"outputs": [args.out, fit_path], "inputs": [args.input]}


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = manifest.get("argv")
    if not isinstance(argv, list) or not argv:
        raise UsageError(f"{args.manifest}: no replayable argv")
    return argv


# -- parser -----------------------------------------------------------------------------

def _add_scenario_flags(p, need_center):
    d = ScenarioConfig()
    p.add_argument("--n", type=int, default=d.n, help="number of beads")
    p.add_argument("--center", type=_floats(3), required=need_center,
                   default=None if need_center else d.true_center, help="true center x,y,z")
    p.add_argument("--layers", type=_floats(), default=d.layer_depths,
                   help="comma-separated layer depths")
    p.add_argument("--layer-weights", type=_floats(), default=None,
                   help="relative bead share per layer (default: even split)")
    p.add_argument("--lateral", type=_floats(2), default=d.lateral_range,
                   help="lateral anchor range lo,hi")
    p.add_argument("--epsilon", type=float, default=d.outlier_probability,
                   help="outlier probability")
    p.add_argument("--sigmas", type=_floats(4),
                   default=(d.sigma1, d.sigma2, d.sigma3, d.sigma4),
                   help="inlier/outlier direction and anchor noise s1,s2,s3,s4")
    p.add_argument("--renormalize", action="store_true",
                   help="renormalize corrupted directions to unit length")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (default: ${SEED_ENV} or 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="psfcenter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"psfcenter {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="noiseless synthetic line bundle")
    _add_scenario_flags(p, need_center=True)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("corrupt", help="two-regime noise on an observation CSV")
    p.add_argument("--in", dest="input", required=True)
    _add_scenario_flags(p, need_center=False)
    _add_seed(p)
    p.add_argument("--replicate", type=int, default=0, help="noise stream index")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("estimate", help="estimate the center from an observation CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--solver", choices=SOLVERS, default="tls")
    p.add_argument("--model", type=int, choices=(1, 2), default=2)
    p.add_argument("--loss", type=_loss, default=LossSpec.parse("block-l2"),
                   help=f"data loss for --solver pd: {LOSS_GRAMMAR}")
    p.add_argument("--gamma", type=_gamma, default="auto")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20000)
    p.add_argument("--fov", type=_floats(2), default=None,
                   help="constrain the center to [0,W]x[0,H]x[0,inf)")
    p.add_argument("--raw-directions", action="store_true",
                   help="use directions as read instead of normalizing them")
    p.add_argument("--trace", action="store_true", help="include the objective trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="Monte Carlo comparison of estimators")
    _add_scenario_flags(p, need_center=False)
    _add_seed(p)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--methods", type=_methods, default=None,
                   help="comma list of wls:1, tls:<m>, pd:<m>:<loss> (default: all l1, block-l2 and huber cells plus tls)")
    p.add_argument("--redraw-scene", action="store_true",
                   help="draw a fresh scene for every replicate")
    p.add_argument("--huber-t", type=float, default=None,
                   help="Huber threshold for huber losses without an explicit t")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: all cores; results do not depend on it)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20000)
    p.add_argument("--progress", action="store_true", help="per-replicate counter on stderr")
    p.add_argument("--out", required=True,
                   help="output stem: <stem>.json, <stem>.txt, <stem>.replicates.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth-stack", help="synthetic bead volume with planted center")
    p.add_argument("--center", type=_floats(3), required=True)
    p.add_argument("--dims", type=_ints(3), default=(256, 256, 128), help="nx,ny,nz")
    p.add_argument("--layers", type=_floats(), default=(40.0, 88.0))
    p.add_argument("--per-side", type=int, default=5, help="beads per row on each layer")
    p.add_argument("--margin", type=float, default=30.0)
    p.add_argument("--jitter", type=float, default=3.0)
    p.add_argument("--bead-sigmas", type=_floats(2), default=(3.0, 1.2),
                   help="Gaussian widths along,across the bead axis")
    p.add_argument("--peak", type=float, default=1000.0)
    p.add_argument("--background", type=float, default=100.0)
    p.add_argument("--noise", type=float, default=10.0)
    _add_seed(p)
    p.add_argument("--truth", default=None, help="also write the planted lines as CSV")
    p.add_argument("--out", required=True, help="raw stack path (sidecar: <out>.json)")
    p.set_defaults(func=cmd_synth_stack)

    d = ExtractionParams()
    p = sub.add_parser("extract", help="detect PSFs in a stack and write line observations")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--blur", type=_floats(3), default=d.blur_sigmas)
    p.add_argument("--tophat", type=_ints(3), default=d.tophat_half_sizes)
    p.add_argument("--threshold", type=_threshold, default=d.threshold)
    p.add_argument("--grow-fraction", type=_optional_fraction, default=d.grow_fraction,
                   help="grow components down to this fraction of the threshold ('none' to skip)")
    p.add_argument("--min-volume", type=int, default=d.min_volume)
    p.add_argument("--max-extent", type=_ints(3), default=d.max_extent)
    p.add_argument("--ratio-filter", type=float, default=d.eigenvalue_ratio_filter)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("analyze", help="tilt angle vs lateral distance to a center")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--center", type=_floats(3), required=True)
    p.add_argument("--ratio-filter", type=float, default=0.0,
                   help="keep observations whose weight exceeds this ratio")
    p.add_argument("--out", required=True, help="dist,angle CSV (fit: <out>.fit.json)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def _resolved_argv(argv, args):
    argv = list(argv)
    if hasattr(args, "seed"):
        argv += ["--seed", str(args.seed)]
    return argv


def _manifest_path(args) -> Path:
    out = Path(args.out)
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            return main(cmd_replay(args))
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
    except (UsageError, OSError, ValueError) as exc:
        print(f"psfcenter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    start = time.perf_counter()
    status, info, error = 0, {"inputs": [], "outputs": []}, None
    try:
        info = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"psfcenter {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PsfCenterError, ValueError, OSError) as exc:
        status = EXIT_COMPUTE
        error = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "line", None) is not None:
            error["line"] = exc.line
        sys.stdout.write(_dumps(error))
        print(f"psfcenter {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)

    params = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    params = {k: (str(v) if isinstance(v, (LossSpec, Method)) else
                  [str(m) for m in v] if k == "methods" and v is not None else v)
              for k, v in params.items()}
    manifest = {
        "command": args.command,
        "argv": _resolved_argv(argv, args),
        "parameters": params,
        "seed": getattr(args, "seed", None),
        "inputs": info["inputs"],
        "outputs": info["outputs"],
        "version": __version__,
        "backend": BACKEND,
        "exit_code": status,
        "error": error,
        "duration_seconds": time.perf_counter() - start,
    }
    _write_json(_manifest_path(args), manifest)
    return status


if __name__ == "__main__":
    sys.exit(main())
