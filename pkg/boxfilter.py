"""Space-variant elliptical box-spline filtering from the command line.

Usage:
    python boxfilter.py filter --input in.pfm --output out.pfm --shape 5,3,30 --method accurate
    python boxfilter.py filter --input in.pgm --output out.pgm --covmap map.svcm --method dual
    python boxfilter.py impulse --size 64x64 --shape 4,3,45 --basis theta-prime --output blob.pfm
    python boxfilter.py error-table > table.csv
    python boxfilter.py sigma-sweep
    python boxfilter.py bound-table
    python boxfilter.py demo-clt --n 4 --n 8 --n 16

Shapes are "size,elongation,orientation_deg": size is the covariance trace
in squared pixels, elongation the eigenvalue ratio.

Exit codes:
    0  success
    1  bad arguments, unreadable or malformed files
    2  a covariance the chosen basis cannot realize (under --infeasible reject)

Tables go to stdout as CSV; logs and errors go to stderr.
"""

import argparse
import logging
import math
import sys

import numpy as np
from pydantic import ValidationError

from svfilter.formats import FormatError, read_covmap, read_image, write_image
from svfilter.services import experiments
from svfilter.services.kernel_lab import impulse_moments
from svfilter.services.pipelines import PipelinePolicy, execute
from svfilter.services.shape_algebra import (
    CovarianceMap,
    InfeasibleError,
    InvalidArgument,
    ShapeParams,
    covariance_from_shape,
    elongation_bound,
    get_basis,
)

logger = logging.getLogger("boxfilter")


def parse_shape(text: str) -> ShapeParams:
    try:
        size, rho, degrees = (float(v) for v in text.split(","))
        return ShapeParams.from_degrees(size, rho, degrees)
    except (ValueError, InvalidArgument) as exc:
        raise argparse.ArgumentTypeError(f"expected size,elongation,orientation_deg: {exc}") from None


def parse_size(text: str) -> tuple[int, int]:
    try:
        width, height = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if width <= 0 or height <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return width, height


def _policy(args, infeasible: str) -> PipelinePolicy:
    fields = {"basis": args.basis, "edge": args.edge, "infeasible": infeasible, "threads": args.threads}
    if args.sigma_fraction is not None:
        fields["fraction"] = args.sigma_fraction
    return PipelinePolicy(**fields)


def _print_timings(timings: dict[str, float]) -> None:
    print("timing: " + ", ".join(f"{stage}={sec:.3f}s" for stage, sec in timings.items()))


# ── Commands ────────────────────────────────────────────────────────────────


def cmd_filter(args) -> int:
    image = read_image(args.input)
    if args.covmap:
        covmap = read_covmap(args.covmap)
    else:
        covmap = CovarianceMap.constant(image.height, image.width, covariance_from_shape(args.shape))
    result = execute(image.data, covmap, args.method, _policy(args, args.infeasible))

    fmt = "pgm" if args.output.lower().endswith(".pgm") else "pfm"
    write_image(args.output, result.output, fmt=fmt, maxval=image.maxval or 255)
    print(f"wrote {args.output} ({image.width}x{image.height}, {args.method})")
    print(f"report: {result.plan.report.summary()}")
    print(f"bases: {result.plan.bases_used}")
    _print_timings(result.timings)
    return 0


def cmd_impulse(args) -> int:
    width, height = args.size
    image, center = experiments.impulse_image(width, height)
    target = covariance_from_shape(args.shape)
    covmap = CovarianceMap.constant(height, width, target)
    policy = PipelinePolicy(basis=args.basis, edge="zero", infeasible="reject", threads=args.threads)
    try:
        result = execute(image, covmap, args.method, policy)
    except InfeasibleError as exc:
        routing = "dual" if args.method == "dual" else args.basis
        bases = ("theta", "theta-prime") if routing == "dual" else (routing,)
        bounds = ", ".join(f"{name} {elongation_bound(args.shape.orientation, get_basis(name)):.4g}"
                           for name in bases)
        raise InfeasibleError(f"{exc} (elongation bound at "
                              f"{math.degrees(args.shape.orientation):.2f} deg: {bounds})") from None

    write_image(args.output, result.output, fmt="pfm")
    moments = impulse_moments(result.output, center)
    got, want = moments.cov.as_matrix(), target.as_matrix()
    deviation = np.linalg.norm(got - want) / np.linalg.norm(want)
    print(f"target covariance:  c11={target.c11:.6f} c12={target.c12:.6f} c22={target.c22:.6f}")
    print(f"impulse covariance: c11={moments.cov.c11:.6f} c12={moments.cov.c12:.6f} c22={moments.cov.c22:.6f}")
    print(f"relative deviation (Frobenius): {100.0 * deviation:.3f}%")
    print(f"mass {moments.mass:.6f}, centroid offset ({moments.mean[0]:+.4f}, {moments.mean[1]:+.4f}) px")
    _print_timings(result.timings)
    return 0


def _emit(table) -> int:
    table.to_csv(sys.stdout, index=False, float_format="%.4f")
    return 0


def cmd_error_table(args) -> int:
    return _emit(experiments.error_table(pitch=args.pitch, fraction=args.sigma_fraction))


def cmd_sigma_sweep(args) -> int:
    return _emit(experiments.sigma_sweep(pitch=args.pitch))


def cmd_bound_table(args) -> int:
    return _emit(experiments.bound_table(empirical=not args.no_empirical))


def cmd_demo_clt(args) -> int:
    return _emit(experiments.clt_table(sizes=tuple(args.n) if args.n else experiments.CLT_SIZES))


# ── Parser ──────────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--verbose", "-v", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="filter an image with a covariance map or a constant shape")
    p.add_argument("--input", required=True, help="PGM (P5) or PFM (Pf) image")
    p.add_argument("--output", required=True, help="written as PGM when it ends in .pgm, else PFM")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--covmap", help="SVCM covariance map matching the image size")
    target.add_argument("--shape", type=parse_shape, help="constant shape size,elongation,orientation_deg")
    p.add_argument("--method", choices=["basic", "accurate", "dual"], default="basic")
    p.add_argument("--basis", choices=["theta", "theta-prime", "dual"], default="theta",
                   help="basis for basic, Stage-B basis for accurate; ignored by dual")
    p.add_argument("--sigma-fraction", type=float, default=None,
                   help="Stage-A variance as a fraction of its bound (default 0.5)")
    p.add_argument("--edge", choices=["zero", "replicate"], default="zero")
    p.add_argument("--infeasible", choices=["reject", "clamp"], default="clamp")
    p.add_argument("--threads", type=int, default=None, help="default: all cores")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("impulse", help="filter a centered impulse and report its covariance")
    p.add_argument("--size", type=parse_size, default=(64, 64), help="WxH (default 64x64)")
    p.add_argument("--shape", type=parse_shape, required=True)
    p.add_argument("--basis", choices=["theta", "theta-prime"], default="theta")
    p.add_argument("--method", choices=["basic", "accurate", "dual"], default="basic")
    p.add_argument("--output", required=True, help="PFM response")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_impulse)

    p = sub.add_parser("error-table", help="single- vs two-stage Gaussian approximation error (CSV)")
    p.add_argument("--pitch", type=float, default=None, help="integration pitch, px (default 0.02)")
    p.add_argument("--sigma-fraction", type=float, default=None)
    p.set_defaults(func=cmd_error_table)

    p = sub.add_parser("sigma-sweep", help="two-stage improvement vs Stage-A fraction (CSV)")
    p.add_argument("--pitch", type=float, default=None)
    p.set_defaults(func=cmd_sigma_sweep)

    p = sub.add_parser("bound-table", help="elongation bounds per orientation (CSV)")
    p.add_argument("--no-empirical", action="store_true", help="skip the bisection column")
    p.set_defaults(func=cmd_bound_table)

    p = sub.add_parser("demo-clt", help="max error of n-fold box convolutions vs the Gaussian (CSV)")
    p.add_argument("--n", type=int, action="append", help="number of boxes; repeatable (default 4 and 8)")
    p.set_defaults(func=cmd_demo_clt)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; 2 is reserved for infeasibility here
        return 0 if exc.code in (0, None) else 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        print(f"error: {problems}", file=sys.stderr)
        return 1
    except (InvalidArgument, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
