"""Command-line interface for the reconstruction benchmark.

Four subcommands: ``reconstruct`` (single solver run), ``compare``
(proximal Newton against FISTA on the same data), ``scale`` (iteration
counts across image sizes), and ``hessian`` (exact versus L-BFGS
curvature).  Options can also come from a key=value config file; flags
given on the command line override the file.
"""

import argparse
import sys

from .harness import (ExperimentConfig, SOLVER_NAMES,
                      experiment_hessian_variants, experiment_pn_vs_fista,
                      experiment_scalability, run_reconstruction)
from .solvers import SolverConfig

_DEFAULTS = {
    "size": 64,
    "angles": 90,
    "rays": 90,
    "fov": 512.0,
    "i0": 1e5,
    "lambda": None,
    "solver": "pn-exact",
    "seed": 0,
    "adaptive_stop": "on",
    "out": "pntomo_out",
    "sizes": None,
}

_PARSERS = {
    "size": int,
    "angles": int,
    "rays": int,
    "fov": float,
    "i0": float,
    "lambda": float,
    "solver": str,
    "seed": int,
    "adaptive_stop": str,
    "out": str,
    "sizes": str,
}


def _add_common(sp):
    sp.add_argument("--size", type=int, help="image width in pixels")
    sp.add_argument("--angles", type=int, help="number of view angles")
    sp.add_argument("--rays", type=int, help="detector bins per view")
    sp.add_argument("--fov", type=float, help="field of view in mm")
    sp.add_argument("--i0", type=float, help="mean photons per ray")
    sp.add_argument("--lambda", type=float, dest="lam",
                    help="TV weight (default scales with image size)")
    sp.add_argument("--solver", choices=SOLVER_NAMES)
    sp.add_argument("--seed", type=int, help="noise seed")
    sp.add_argument("--adaptive-stop", choices=("on", "off"),
                    dest="adaptive_stop",
                    help="adaptive inner stopping rule (default on)")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--config", help="key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pntomo",
        description="TV-regularized CT reconstruction benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "reconstruct": "run one solver on simulated data",
        "compare": "run proximal Newton and FISTA on the same data",
        "scale": "sweep image sizes and report iteration counts",
        "hessian": "compare exact and L-BFGS curvature",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        _add_common(sp)
        if name in ("scale", "hessian"):
            sp.add_argument("--sizes",
                            help="comma-separated image sizes")
    return parser


def read_config_file(path) -> dict:
    """Parse a key=value config file; blank lines and # comments skipped."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, "
                                 f"got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in _DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _PARSERS[key](value.strip())
    return values


def _merge_options(args) -> dict:
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    cli = {
        "size": args.size,
        "angles": args.angles,
        "rays": args.rays,
        "fov": args.fov,
        "i0": args.i0,
        "lambda": args.lam,
        "solver": args.solver,
        "seed": args.seed,
        "adaptive_stop": args.adaptive_stop,
        "out": args.out,
        "sizes": getattr(args, "sizes", None),
    }
    for key, value in cli.items():
        if value is not None:
            merged[key] = value
    return merged


def _experiment_config(opts) -> ExperimentConfig:
    if opts["adaptive_stop"] not in ("on", "off"):
        raise ValueError("adaptive_stop must be 'on' or 'off'")
    scfg = SolverConfig(adaptive_stop=opts["adaptive_stop"] == "on")
    return ExperimentConfig(
        n_pixels=opts["size"],
        fov_mm=opts["fov"],
        n_angles=opts["angles"],
        n_rays=opts["rays"],
        i0=opts["i0"],
        lam=opts["lambda"],
        seed=opts["seed"],
        solver=opts["solver"],
        solver_config=scfg,
        out_dir=opts["out"],
    )


def _parse_sizes(text, fallback):
    if text is None:
        return fallback
    sizes = tuple(int(part) for part in str(text).split(",") if part.strip())
    if not sizes:
        raise ValueError("--sizes needs at least one integer")
    return sizes


def _print_summary(report):
    print(f"wrote {report.config['out_dir']}/report.json")
    summary = report.summary
    if report.experiment == "reconstruct":
        print(f"{summary['solver']}: status={summary['status']} "
              f"outer={summary['outer_iterations']} "
              f"f={summary['terminal_objective']:.6e} "
              f"seconds={summary['wall_seconds']:.2f}")
    elif report.experiment == "compare":
        for key in ("pn", "fista"):
            s = summary[key]
            print(f"{s['solver']}: status={s['status']} "
                  f"outer={s['outer_iterations']} "
                  f"f={s['terminal_objective']:.6e} "
                  f"seconds={s['wall_seconds']:.2f}")
        match = summary["fista_iterations_to_match_pn"]
        if match is None:
            print("fista did not reach the pn objective within its budget")
        else:
            print(f"fista needed {match} iterations "
                  f"({summary['fista_seconds_to_match_pn']:.2f} s) "
                  f"to match pn")
    elif report.experiment == "scale":
        for run in summary["runs"]:
            print(f"size={run['size']}: outer={run['outer_iterations']} "
                  f"pixel={run['pixel_size_mm']:.3g} mm "
                  f"lam={run['lam']:.3g}")
        print(f"iteration spread: {summary['outer_iteration_spread']}")
    elif report.experiment == "hessian":
        for run in summary["runs"]:
            for key in ("pn-exact", "pn-lbfgs"):
                s = run[key]
                print(f"size={run['size']} {key}: "
                      f"outer={s['outer_iterations']} "
                      f"f={s['terminal_objective']:.6e} "
                      f"seconds={s['wall_seconds']:.2f}")
            print(f"size={run['size']} objective at "
                  f"{run['exact_seconds_at_probe']:.2f} s: "
                  f"exact={run['exact_objective_at_probe']:.6e} "
                  f"lbfgs={run['lbfgs_objective_at_probe']:.6e}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = _merge_options(args)
    cfg = _experiment_config(opts)
    if args.command == "reconstruct":
        report = run_reconstruction(cfg)
    elif args.command == "compare":
        report = experiment_pn_vs_fista(cfg)
    elif args.command == "scale":
        sizes = _parse_sizes(opts["sizes"], (32, 64, 128, 256))
        report = experiment_scalability(cfg, sizes)
    else:
        sizes = _parse_sizes(opts["sizes"], (256,))
        report = experiment_hessian_variants(cfg, sizes)
    _print_summary(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
