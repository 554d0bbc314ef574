from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from typing import Any, Iterator, TextIO

from . import __version__
from .bench import (
    MATVEC_COLUMNS,
    SOLVER_COLUMNS,
    SVM_COLUMNS,
    SWEEP_COLUMNS,
    make_cloud,
    resolve_kernel,
    run_convergence_sweep,
    run_matvec_bench,
    run_solver_bench,
    run_svm_bench,
    write_csv,
    write_stats_csv,
)
from .config import RunConfig, load_config, resolve_threads
from .errors import ConfigError, NNCAError
from .formatter import (
    format_done,
    format_h2_summary,
    format_header,
    format_kernel_list,
    format_tree_report,
    get_colors,
)
from .geometry import DISTRIBUTIONS, PointCloud, load_points_csv
from .kernels import list_kernels
from .krylov import FREDHOLM_NU
from .svm import (
    BACKENDS,
    SHAPES,
    Dataset,
    evaluate,
    load_model,
    predict_batch,
    save_model,
    synth_dataset,
    train,
)
from .tree import build_tree, tree_statistics

logger = logging.getLogger(__name__)

COMMANDS = (
    "tree-info",
    "matvec-bench",
    "convergence-sweep",
    "solve-ie",
    "svm-train",
    "svm-predict",
    "svm-bench",
    "list-kernels",
)
DEFAULT_EPS_SWEEP = [1e-4, 1e-6, 1e-8, 1e-10]


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        default=None,
        help="Path to config file (overrides auto-discovery)",
    )
    common.add_argument(
        "-o", "--output",
        default=None,
        metavar="FILE",
        help="Write CSV output to a file instead of stdout",
    )
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads (default: NNCA_THREADS or available cores)",
    )
    common.add_argument(
        "--reproducible",
        action="store_true",
        help="Force a single thread so repeated runs give identical results",
    )
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Random seed for point sets and test vectors",
    )
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="Print the resolved run configuration and exit",
    )
    common.add_argument(
        "--no-color",
        action="store_true",
        help="Disable colored terminal output",
    )
    common.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Show debug information",
    )
    return common


def _geometry_parser() -> argparse.ArgumentParser:
    geo = argparse.ArgumentParser(add_help=False)
    geo.add_argument("--dim", type=int, default=2, help="Spatial dimension (default: 2)")
    geo.add_argument(
        "--distribution",
        choices=DISTRIBUTIONS,
        default="uniform",
        help="Point distribution on [-1, 1]^d (default: uniform)",
    )
    geo.add_argument("--kernel", default=None, help="Kernel name (see list-kernels)")
    geo.add_argument("--reg-a", type=float, default=None, help="Regularization radius a")
    geo.add_argument("--eps-nca", type=float, default=None, help="Cross approximation tolerance")
    geo.add_argument("--nu", type=int, default=None, help="Leaf capacity")
    geo.add_argument("--eta", type=float, default=None, help="Admissibility parameter")
    return geo


def _svm_parser() -> argparse.ArgumentParser:
    svm = argparse.ArgumentParser(add_help=False)
    svm.add_argument("--lambda-box", type=float, default=None, help="Box constraint on alpha")
    svm.add_argument("--learn-rate", type=float, default=None, help="Gradient step size")
    svm.add_argument("--beta-penalty", type=float, default=None, help="Equality penalty weight")
    svm.add_argument("--grad-tol", type=float, default=None, help="Gradient stopping tolerance")
    svm.add_argument("--max-iter", type=int, default=None, help="Iteration cap")
    return svm


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnca",
        description="Nested cross approximation of kernel matrices in H2 format",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common, geo, svm = _common_parser(), _geometry_parser(), _svm_parser()

    p = sub.add_parser("tree-info", parents=[common, geo], help="Print the tree report")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--n", type=int, default=4096, help="Number of points (default: 4096)")
    src.add_argument("--points", default=None, metavar="CSV", help="Read points from a CSV file")

    p = sub.add_parser("matvec-bench", parents=[common, geo], help="Matvec sweep over N")
    p.add_argument("--n", type=int, nargs="+", required=True, help="Problem sizes")
    p.add_argument("--repeats", type=int, default=3, help="Matvec timing repetitions")
    p.add_argument("--oracle-cap", type=int, default=None, help="Largest N checked densely")
    p.add_argument("--stats", default=None, metavar="FILE", help="Write assembly statistics CSV")

    p = sub.add_parser("convergence-sweep", parents=[common, geo], help="Sweep eps_nca at fixed N")
    p.add_argument("--n", type=int, required=True, help="Problem size")
    p.add_argument("--eps", type=float, nargs="+", default=DEFAULT_EPS_SWEEP, help="Tolerances")
    p.add_argument("--repeats", type=int, default=3, help="Matvec timing repetitions")
    p.add_argument("--oracle-cap", type=int, default=None, help="Largest N checked densely")
    p.add_argument("--stats", default=None, metavar="FILE", help="Write assembly statistics CSV")

    p = sub.add_parser("solve-ie", parents=[common], help="Fredholm integral equation solve")
    p.add_argument("--n-per-axis", type=int, nargs="+", required=True, help="Grid points per axis")
    p.add_argument("--eps-nca", type=float, default=1e-7, help="Cross approximation tolerance")
    p.add_argument("--eps-gmres", type=float, default=1e-10, help="GMRES tolerance")
    p.add_argument("--nu", type=int, default=None, help="Leaf capacity")
    p.add_argument("--eta", type=float, default=None, help="Admissibility parameter")

    p = sub.add_parser("svm-train", parents=[common, geo, svm], help="Train a kernel SVM")
    p.add_argument("--backend", choices=BACKENDS, default="fast", help="Kernel product backend")
    data = p.add_mutually_exclusive_group(required=True)
    data.add_argument("--data", default=None, metavar="CSV", help="Labelled points (last column)")
    data.add_argument("--synth", choices=SHAPES, default=None, help="Synthetic dataset shape")
    p.add_argument("--m", type=int, default=5625, help="Synthetic dataset size")
    p.add_argument("--model", default=None, metavar="FILE", help="Save the trained model")

    p = sub.add_parser("svm-predict", parents=[common], help="Label points with a saved model")
    p.add_argument("--model", required=True, metavar="FILE", help="Model file from svm-train")
    p.add_argument("--points", required=True, metavar="CSV", help="Query points")

    p = sub.add_parser("svm-bench", parents=[common, geo, svm], help="Fast vs dense SVM sweep")
    p.add_argument("--m", type=int, nargs="+", required=True, help="Dataset sizes")
    p.add_argument("--backend", choices=BACKENDS, nargs="+", default=list(BACKENDS))
    p.add_argument("--synth", choices=SHAPES, default=None, help="Synthetic dataset shape")

    sub.add_parser("list-kernels", parents=[common], help="List available kernels")
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _print_err(msg: str, no_color: bool = False) -> None:
    c = get_colors(no_color)
    print(f"{c.RED}Error: {msg}{c.NC}", file=sys.stderr)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _arg(args: argparse.Namespace, name: str, fallback: Any) -> Any:
    value = getattr(args, name, None)
    return fallback if value is None else value


def build_run_config(args: argparse.Namespace, config: dict[str, Any]) -> RunConfig:
    """Layer command-line flags over the loaded configuration."""
    command = args.command
    dim = getattr(args, "dim", 2)
    if command == "solve-ie":
        dim = 3
    elif command in ("svm-train", "svm-bench") and getattr(args, "synth", None):
        dim = 2 if args.synth == "rings2d" else 4
    default_kernel = config["kernel"]
    default_nu = config["nu"].get(dim, 64)
    if command == "solve-ie":
        default_kernel = "coulomb-3d"
        default_nu = FREDHOLM_NU
    elif command in ("svm-train", "svm-bench"):
        default_kernel = "matern"

    threads = 1 if args.reproducible else resolve_threads(args.threads, config["threads"])
    svm = dict(config["svm"])
    for key in svm:
        value = getattr(args, key, None)
        if value is not None:
            svm[key] = value

    n_values: list[int] = []
    if command in ("matvec-bench", "convergence-sweep", "tree-info"):
        n = args.n
        n_values = list(n) if isinstance(n, list) else ([n] if n is not None else [])
    elif command == "svm-bench":
        n_values = list(args.m)
    elif command == "svm-train":
        n_values = [args.m]

    backends = [getattr(args, "backend", "fast")]
    if command == "svm-bench":
        backends = list(args.backend)

    run = RunConfig(
        command=command,
        dim=dim,
        distribution=getattr(args, "distribution", "uniform"),
        n_values=n_values,
        eps_values=list(getattr(args, "eps", None) or []),
        n_per_axis=list(getattr(args, "n_per_axis", None) or []),
        kernel=_arg(args, "kernel", default_kernel),
        reg_a=_arg(args, "reg_a", config["reg_a"]),
        eps_nca=_arg(args, "eps_nca", config["eps_nca"]),
        nu=_arg(args, "nu", default_nu),
        eta=_arg(args, "eta", config["eta"]),
        seed=_arg(args, "seed", config["seed"]),
        threads=threads,
        output=args.output,
        oracle_cap=_arg(args, "oracle_cap", config["oracle_cap"]),
        oracle_sample_rows=config["oracle_sample_rows"],
        repeats=getattr(args, "repeats", 3),
        eps_gmres=getattr(args, "eps_gmres", 1e-10),
        backends=backends,
        shape=getattr(args, "synth", None),
        data_path=getattr(args, "data", None),
        svm=svm,
    )
    return run.validate()


@contextmanager
def _output(path: str | None) -> Iterator[TextIO]:
    if path is None:
        yield sys.stdout
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        yield f


def _report_assembly(rows, stats_path: str | None, no_color: bool) -> None:
    for row in rows:
        print(format_h2_summary(row["stats"], no_color=no_color), file=sys.stderr)
    if stats_path:
        with open(stats_path, "w", encoding="utf-8", newline="") as f:
            write_stats_csv(rows, f)


def _run_tree_info(args, run: RunConfig, custom, no_color: bool) -> None:
    if args.points:
        points, _ = load_points_csv(args.points, dim=run.dim)
        cloud = PointCloud.from_points(points)
    else:
        cloud = make_cloud(run, run.n_values[0])
    tree = build_tree(cloud, nu=run.nu, eta=run.eta)
    with _output(run.output) as out:
        plain = no_color or out is not sys.stdout
        report = format_tree_report(tree_statistics(tree), no_color=plain)
        print(report, file=out)


def _run_svm_train(args, run: RunConfig, config: dict[str, Any], custom, no_color: bool) -> None:
    c = get_colors(no_color)
    if run.data_path:
        features, labels = load_points_csv(run.data_path, dim=None)
        if labels is None:
            features, labels = features[:, :-1], features[:, -1]
        data = Dataset.from_arrays(features, labels, seed=run.seed)
        run.dim = data.dim
        run.nu = _arg(args, "nu", config["nu"].get(run.dim, run.nu))
        logger.debug("Training data is %dD, leaf capacity %d", run.dim, run.nu)
    else:
        data = synth_dataset(run.shape, run.n_values[0], seed=run.seed)
    kernel = resolve_kernel(run, custom)
    model, report = train(
        data,
        kernel,
        lambda_box=run.svm["lambda_box"],
        learn_rate=run.svm["learn_rate"],
        beta_penalty=run.svm["beta_penalty"],
        max_iter=int(run.svm["max_iter"]),
        grad_tol=run.svm["grad_tol"],
        backend=run.backends[0],
        eps_nca=run.eps_nca,
        nu=run.nu,
        eta=run.eta,
        threads=run.threads,
    )
    acc = evaluate(model, data.test_x, data.test_y) if data.test_y.size else None
    tag = "F" if run.backends[0] == "fast" else "N"
    row = {
        "M": data.labels.size,
        **data.class_counts(),
        f"t_{tag}": report.wall_seconds,
        f"i_{tag}": report.per_iter_seconds,
        f"iter_{tag}": report.iterations,
        "A1": acc.a1 if acc else None,
        "A2": acc.a2 if acc else None,
        "OA": acc.oa if acc else None,
    }
    with _output(run.output) as out:
        write_csv([row], SVM_COLUMNS, out)
    if args.model:
        save_model(model, args.model)
        print(f"{c.GREEN}Model saved to {args.model}{c.NC}", file=sys.stderr)


def _run_svm_predict(args, custom) -> None:
    model = load_model(args.model, custom)
    points, _ = load_points_csv(args.points, dim=model.features.shape[1])
    labels, scores = predict_batch(model, points)
    rows = [{"label": int(lab), "score": float(s)} for lab, s in zip(labels, scores)]
    with _output(args.output) as out:
        write_csv(rows, ("label", "score"), out)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    _setup_logging(args.verbose)
    c = get_colors(args.no_color)

    try:
        config = load_config(args.config)
    except NNCAError as e:
        _print_err(str(e), no_color=args.no_color)
        return 1

    custom_kernels = config.get("custom_kernels")

    if args.command == "list-kernels":
        print(format_kernel_list(list_kernels(custom_kernels)))
        return 0

    try:
        if args.command == "svm-predict":
            _run_svm_predict(args, custom_kernels)
            return 0

        try:
            run = build_run_config(args, config)
        except ConfigError as e:
            _print_err(str(e), no_color=args.no_color)
            return 2

        if args.dry_run:
            print(f"{c.YELLOW}--- DRY RUN: resolved configuration ---{c.NC}", file=sys.stderr)
            print(run.to_yaml(), end="")
            return 0

        print(
            format_header(
                f"nnca {run.command}",
                {
                    "dim": run.dim,
                    "kernel": run.kernel,
                    "eps_nca": run.eps_nca,
                    "threads": run.threads,
                },
                no_color=args.no_color,
            ),
            file=sys.stderr,
        )

        if run.command == "tree-info":
            _run_tree_info(args, run, custom_kernels, args.no_color)
        elif run.command in ("matvec-bench", "convergence-sweep"):
            if run.command == "matvec-bench":
                rows, columns = run_matvec_bench(run, custom_kernels), MATVEC_COLUMNS
            else:
                rows, columns = run_convergence_sweep(run, custom_kernels), SWEEP_COLUMNS
            with _output(run.output) as out:
                write_csv(rows, columns, out)
            _report_assembly(rows, args.stats, args.no_color)
        elif run.command == "solve-ie":
            rows = run_solver_bench(run)
            with _output(run.output) as out:
                write_csv(rows, SOLVER_COLUMNS, out)
        elif run.command == "svm-train":
            _run_svm_train(args, run, config, custom_kernels, args.no_color)
        elif run.command == "svm-bench":
            rows = run_svm_bench(run, custom_kernels)
            with _output(run.output) as out:
                write_csv(rows, SVM_COLUMNS, out)

        print(format_done(f"{run.command} complete", no_color=args.no_color), file=sys.stderr)

    except NNCAError as e:
        _print_err(str(e), no_color=args.no_color)
        return 1
    except OSError as e:
        _print_err(str(e), no_color=args.no_color)
        return 1
    except KeyboardInterrupt:
        print(f"\n{c.RED}Run cancelled.{c.NC}", file=sys.stderr)
        return 130

    return 0


if __name__ == "__main__":
    sys.exit(main())
