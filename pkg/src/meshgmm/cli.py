"""Command-line interface: fit, eval, sample, register, and bench.

Machine-readable numbers go to stdout at full precision; human-oriented
notes (including the resolved seed of every run) go to stderr so pipelines
stay parseable. Exit codes: 0 success, 1 runtime/numeric failure, 2 usage
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .em import FitConfig, fit
from .errors import MeshGmmError
from .geometry import load_mesh, load_points, sample_surface, save_points
from .harness import (
    FIT_MODES,
    TrialSpec,
    fit_mode_primitives,
    run_fidelity_sweep,
    run_registration_benchmark,
)
from .mixture import avg_loglik, load_model, save_model
from .registration import (
    RigidTransform,
    register_d2d,
    register_icp,
    register_p2d,
    rotation_error,
    translation_error,
)


def _positive_int(parser, value, name):
    if value < 1:
        parser.error(f"{name} must be >= 1, got {value}")
    return value


def _note(text: str) -> None:
    print(text, file=sys.stderr)


def _print_seed(seed: int) -> None:
    _note(f"seed: {seed}")


def _load_ground_truth(path) -> RigidTransform:
    payload = json.loads(Path(path).read_text())
    return RigidTransform(q=np.asarray(payload["q"]), t=np.asarray(payload["t"]))


def cmd_fit(args, parser) -> int:
    _positive_int(parser, args.k, "--k")
    if args.iters < 0:
        parser.error(f"--iters must be >= 0, got {args.iters}")
    if args.tol <= 0:
        parser.error(f"--tol must be > 0, got {args.tol}")
    _print_seed(args.seed)
    mesh = load_mesh(args.input)
    if mesh.n_faces == 0:
        # Point-cloud input: every mode degenerates to fitting the points.
        if args.mode != "points-vertex":
            _note(f"input has no faces; fitting its points (mode {args.mode!r} needs a mesh)")
        from .geometry import PointCloud, points_to_primitives

        primitives = points_to_primitives(PointCloud(points=mesh.vertices))
        em_mode = "exact"
    else:
        primitives, em_mode = fit_mode_primitives(mesh, args.mode)
    config = FitConfig(
        K=args.k, init=args.init, max_iters=args.iters, tol=args.tol,
        reg=args.reg, mode=em_mode, seed=args.seed,
    )
    report = fit(primitives, config)
    save_model(report.model, args.out)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "lower_bound", "jensen_bound"])
            for i, (lb, jb) in enumerate(zip(report.lower_bound_trace, report.jensen_trace), 1):
                writer.writerow([i, repr(lb), repr(jb)])
    _note(
        f"fit {len(primitives)} primitives with K={args.k} ({args.mode}/{args.init}): "
        f"{report.iterations_run} iterations, converged={report.converged}"
    )
    print(args.out)
    return 0


def cmd_eval(args, parser) -> int:
    _print_seed(args.seed)
    gmm = load_model(args.model)
    cloud = load_points(args.points)
    print(repr(avg_loglik(cloud, gmm)))
    return 0


def cmd_sample(args, parser) -> int:
    _positive_int(parser, args.n, "--n")
    _print_seed(args.seed)
    mesh = load_mesh(args.input)
    save_points(sample_surface(mesh, args.n, args.seed), args.out)
    print(args.out)
    return 0


def cmd_register(args, parser) -> int:
    _print_seed(args.seed)
    a_is_model = args.input_a.endswith(".json")
    b_is_model = args.input_b.endswith(".json")
    if args.method == "p2d" and not (a_is_model and not b_is_model):
        parser.error("p2d needs MODEL.json and a points file, in that order")
    if args.method == "d2d" and not (a_is_model and b_is_model):
        parser.error("d2d needs two model.json inputs")
    if args.method == "icp" and (a_is_model or b_is_model):
        parser.error("icp needs two point-cloud files")

    truth = _load_ground_truth(args.ground_truth) if args.ground_truth else None
    diag = args.diag
    if args.method == "p2d":
        gmm = load_model(args.input_a)
        cloud = load_points(args.input_b)
        if truth is not None and diag is None:
            from .geometry import bbox_diagonal

            diag = bbox_diagonal(cloud)
        result = register_p2d(cloud, gmm, ground_truth=truth, diag=diag)
    elif args.method == "d2d":
        result = register_d2d(load_model(args.input_a), load_model(args.input_b),
                              ground_truth=truth, diag=diag)
    else:
        source = load_points(args.input_a)
        target = load_points(args.input_b)
        result = register_icp(source, target)
        if truth is not None:
            result.rotation_error = rotation_error(result.transform, truth)
            if diag is None:
                from .geometry import bbox_diagonal

                diag = bbox_diagonal(target)
            result.translation_error = translation_error(result.transform, truth, diag)

    payload = {
        "method": args.method,
        "seed": args.seed,
        "quaternion": result.transform.q.tolist(),
        "translation": result.transform.t.tolist(),
        "objective": result.final_objective,
        "iterations": result.iterations,
        "converged": result.converged,
    }
    if result.rotation_error is not None:
        payload["rotation_error_rad"] = result.rotation_error
    if result.translation_error is not None:
        payload["translation_error_pct"] = result.translation_error
    print(json.dumps(payload))
    return 0


def cmd_bench(args, parser) -> int:
    _print_seed(args.seed)
    if args.task == "registration":
        _positive_int(parser, args.trials, "--trials")
        spec = TrialSpec(
            model_path=args.input,
            K=args.k,
            fit_mode=args.mode,
            init=args.init,
            n_points=args.n_points,
            max_angle=np.deg2rad(args.max_angle_deg),
            max_trans_frac=args.max_trans_frac,
            trials=args.trials,
            seed=args.seed,
            methods=tuple(args.methods.split(",")),
        )
        result = run_registration_benchmark(spec)
        if args.out:
            result.write_csv(args.out)
            _note(f"wrote {args.out}")
        if args.summary:
            result.write_summary(args.summary)
            _note(f"wrote {args.summary}")
        print(json.dumps(result.summary))
    else:
        mesh = load_mesh(args.input)
        k_list = [int(k) for k in args.k_list.split(",")]
        rows = run_fidelity_sweep(
            mesh,
            k_list,
            inits=tuple(args.inits.split(",")),
            modes=tuple(args.modes.split(",")),
            eval_n=args.eval_n,
            seed=args.seed,
            csv_path=args.out,
        )
        if args.out:
            _note(f"wrote {args.out}")
        print(json.dumps(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshgmm",
        description="Fit Gaussian mixtures directly to meshes, points, and "
        "measurement rectangles; register shapes with them.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="upper bound on internal parallelism (results never depend on it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a mixture to a mesh or point file")
    p.add_argument("input")
    p.add_argument("--k", type=int, required=True, help="number of mixture components")
    p.add_argument("--mode", choices=FIT_MODES, default="exact")
    p.add_argument("--init", choices=("kmeans++", "random"), default="kmeans++")
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--reg", type=float, default=None,
                   help="covariance floor; default 1e-6 * squared bbox diagonal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.json")
    p.add_argument("--trace", default=None, help="optional CSV of per-iteration bounds")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="print the average log-likelihood of points under a model")
    p.add_argument("model")
    p.add_argument("points")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample points uniformly from a mesh surface")
    p.add_argument("input")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples.ply")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("register", help="rigidly align two inputs")
    p.add_argument("--method", choices=("p2d", "d2d", "icp"), required=True)
    p.add_argument("input_a", help="model.json (p2d, d2d) or points file (icp)")
    p.add_argument("input_b", help="points file (p2d, icp) or model.json (d2d)")
    p.add_argument("--ground-truth", default=None,
                   help='JSON file {"q": [w,x,y,z], "t": [x,y,z]} to report errors against')
    p.add_argument("--diag", type=float, default=None,
                   help="reference diagonal for translation error percent")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("bench", help="run a registration benchmark or fidelity sweep")
    p.add_argument("task", choices=("registration", "fidelity"))
    p.add_argument("input", help="mesh file")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--k-list", default="10,50,100", help="fidelity: comma-separated K values")
    p.add_argument("--mode", choices=FIT_MODES, default="exact")
    p.add_argument("--modes", default=",".join(FIT_MODES), help="fidelity: modes to sweep")
    p.add_argument("--init", choices=("kmeans++", "random"), default="kmeans++")
    p.add_argument("--inits", default="kmeans++,random", help="fidelity: inits to sweep")
    p.add_argument("--n-points", type=int, default=453)
    p.add_argument("--eval-n", type=int, default=50_000)
    p.add_argument("--max-angle-deg", type=float, default=30.0)
    p.add_argument("--max-trans-frac", type=float, default=0.10)
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--methods", default="mesh,points,icp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--summary", default=None, help="registration: JSON summary path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error(f"--threads must be >= 1, got {args.threads}")
    try:
        return args.func(args, parser)
    except MeshGmmError as exc:
        _note(f"error: {exc}")
        return 1
    except OSError as exc:
        _note(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
