"""Command-line interface: ``nuq <subcommand> ...``.

Exit codes: 0 success, 2 usage or validation error, 3 quality gate failed
(``compare`` found the processed data worse than the raw data).  JSON goes
to standard output, diagnostics to standard error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .discrepancy import KERNELS, KernelSpec
from .errors import DatasetValidationError, NuqError
from .group import bayesian_t_map, load_cohort
from .io import (
    DEFAULT_B0_THRESHOLD,
    NiftiVolume,
    load_dataset,
    save_dataset,
    volume_like,
    write_nifti,
)
from .metric import (
    DEFAULT_DRAWS,
    DEFAULT_PAIRS,
    NuqConfig,
    Region,
    compare_datasets,
    default_kernel,
    parse_region,
    region_nuq_score,
    voxel_nuq_map,
)
from .phantom import NOISE_KINDS, PRESETS, PhantomSpec, default_gradient_table, simulate_signal
from .posterior import (
    RegularizerSpec,
    fit_volume,
    load_posterior,
    residual_variance_map,
    sample_property,
    save_posterior,
)

logger = logging.getLogger("nuq")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_GATE = 3


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2**64), got {value}")
    return value


def _dims(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 20,20,20, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _emit(payload, path=None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")


def _kernel_from_args(args, region):
    base = default_kernel(region) if args.kernel is None else KernelSpec(kind=args.kernel)
    return KernelSpec(kind=base.kind, degree=args.degree if args.degree is not None else base.degree,
                      scale=args.scale, offset=args.offset)


def _write_map(data, ref, path):
    vol = NiftiVolume(data=np.asarray(data, dtype=np.float64), affine=ref.affine,
                      voxel_size=ref.voxel_size)
    write_nifti(vol, path)


def cmd_phantom(args):
    gtab = default_gradient_table(args.n_dirs, args.n_b0, args.bval)
    spec = PhantomSpec(dims=args.dims, preset=args.preset, s0=args.s0, gradients=gtab,
                       noise=args.noise, sigma=args.sigma, seed=args.seed, axis=args.axis,
                       md=args.md)
    ds, truth = simulate_signal(spec)
    paths = save_dataset(ds, args.out)
    for name in ("fa", "md"):
        paths[f"truth_{name}"] = os.path.join(args.out, f"truth_{name}.nii.gz")
        write_nifti(volume_like(truth[name], ds.signal), paths[f"truth_{name}"])
    _emit({"files": paths, "dims": list(args.dims), "preset": args.preset, "noise": args.noise,
           "sigma": args.sigma, "seed": args.seed})
    return EXIT_OK


def cmd_fit(args):
    ds = load_dataset(args.dwi, args.bval, args.bvec, args.mask, args.b0_threshold)
    pv = fit_volume(ds, reg=RegularizerSpec(lam=args.lam), weighting=args.weighting,
                    threads=args.threads)
    save_posterior(pv, args.out)
    _, summary = residual_variance_map(pv)
    _emit({"out": args.out, "n_voxels": int(pv.indices.size), "n_valid": int(pv.valid.sum()),
           "invalid_counts": pv.invalid_counts(), "sigma2_median": summary["median"],
           "sigma2_iqr": summary["iqr"]})
    return EXIT_OK


def cmd_sample(args):
    pv = load_posterior(args.posterior)
    maps = sample_property(pv, args.property, args.draws, args.seed, threads=args.threads)
    write_nifti(NiftiVolume(data=np.moveaxis(maps, 0, -1), affine=pv.affine,
                            voxel_size=pv.voxel_size), args.out)
    _emit({"out": args.out, "property": args.property, "draws": args.draws, "seed": args.seed})
    return EXIT_OK


def cmd_map(args):
    pv = load_posterior(args.posterior)
    vmap = voxel_nuq_map(pv, args.property, args.pairs, args.seed, threads=args.threads)
    _write_map(vmap, pv, args.out)
    finite = vmap[np.isfinite(vmap)]
    _emit({"out": args.out, "property": args.property, "pairs": args.pairs, "seed": args.seed,
           "mean": float(finite.mean()) if finite.size else None})
    return EXIT_OK


def cmd_score(args):
    region = parse_region(args.region) if args.region else Region.subject()
    pv = load_posterior(args.posterior)
    report = region_nuq_score(pv, args.property, region, _kernel_from_args(args, region),
                              args.draws, args.seed, threads=args.threads)
    _emit(report.to_dict(), args.out)
    return EXIT_OK


def cmd_compare(args):
    raw = load_dataset(args.raw, args.bval, args.bvec, args.mask, args.b0_threshold)
    processed = load_dataset(args.processed, args.processed_bval or args.bval,
                             args.processed_bvec or args.bvec, args.mask, args.b0_threshold)
    kernel = None
    if args.kernel is not None:
        kernel = _kernel_from_args(args, Region.subject())
    cfg = NuqConfig(prop=args.property, kernel=kernel, m=args.draws, pairs=args.pairs,
                    seed=args.seed, reg=RegularizerSpec(lam=args.lam), weighting=args.weighting,
                    threads=args.threads)
    out = compare_datasets(raw, processed, cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_map(out.raw_map, raw.signal, os.path.join(args.out, "raw_nuq_map.nii.gz"))
    _write_map(out.processed_map, raw.signal, os.path.join(args.out, "processed_nuq_map.nii.gz"))
    _emit(out.to_dict(), os.path.join(args.out, "comparison.json"))
    return EXIT_GATE if out.worse else EXIT_OK


def cmd_group(args):
    cohort = load_cohort(args.manifest)
    report = bayesian_t_map(cohort, weighting=args.weighting, eps=args.eps)
    os.makedirs(args.out, exist_ok=True)
    ref = cohort.reference or NiftiVolume(data=np.zeros(0))
    _write_map(report.t_map, ref, os.path.join(args.out, "t_map.nii.gz"))
    _write_map(report.mean_diff_map, ref, os.path.join(args.out, "mean_diff.nii.gz"))
    summary = report.summary(args.threshold)
    summary.update({"n_subjects": len(cohort.labels), "n_A": cohort.labels.count("A"),
                    "n_B": cohort.labels.count("B"), "draws": cohort.draws,
                    "weighting": args.weighting})
    _emit(summary, os.path.join(args.out, "group_summary.json"))
    return EXIT_OK


def _add_threads(p):
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: $NUQ_THREADS, else CPU count)")


def _add_dataset(p, name="--dwi"):
    p.add_argument(name, required=True, help="4-D diffusion NIfTI (.nii or .nii.gz)")
    p.add_argument("--bval", required=True, help="FSL bval file")
    p.add_argument("--bvec", required=True, help="FSL bvec file")
    p.add_argument("--mask", default=None, help="optional 3-D brain mask NIfTI")
    p.add_argument("--b0-threshold", type=_nonneg_float, default=DEFAULT_B0_THRESHOLD,
                   help="b-values at or below this count as b=0 (s/mm^2)")


def _add_fit_options(p):
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, default=0.0,
                   help="ridge coefficient of the Tikhonov matrix lambda*I")
    p.add_argument("--weighting", choices=("wls", "ols"), default="wls",
                   help="least-squares weighting")


def _add_property(p):
    p.add_argument("--property", choices=("fa", "md"), default="fa",
                   help="scalar property sampled from the posterior")
    p.add_argument("--seed", type=_seed, default=0, help="RNG seed")


def _add_kernel(p):
    p.add_argument("--kernel", choices=KERNELS, default=None,
                   help="MMD kernel (default: polynomial for 2-D regions, else linear)")
    p.add_argument("--degree", type=int, default=None, help="polynomial degree (>= 2; default 2)")
    p.add_argument("--scale", type=float, default=None,
                   help="polynomial normalizer or RBF bandwidth "
                        "(default: vector dimension / median heuristic)")
    p.add_argument("--offset", type=float, default=1.0, help="polynomial kernel offset")
    p.add_argument("--draws", type=_positive_int, default=DEFAULT_DRAWS,
                   help="posterior draws per sample set")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="nuq", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=PRESETS, default="fa_gradient", help="tensor field")
    p.add_argument("--dims", type=_dims, default=(20, 20, 20), help="volume extents x,y,z")
    p.add_argument("--noise", choices=NOISE_KINDS, default="rician", help="noise model")
    p.add_argument("--sigma", type=float, default=0.0, help="noise std in signal units")
    p.add_argument("--s0", type=float, default=1.0, help="unweighted signal")
    p.add_argument("--seed", type=_seed, default=0, help="noise seed")
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=0,
                   help="axis along which fa_gradient varies")
    p.add_argument("--md", type=float, default=0.7e-3, help="mean diffusivity (mm^2/s)")
    p.add_argument("--n-dirs", type=_positive_int, default=32, help="diffusion directions")
    p.add_argument("--n-b0", type=_positive_int, default=4, help="b=0 measurements")
    p.add_argument("--bval", type=float, default=1000.0, help="b-value (s/mm^2)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="fit per-voxel posteriors", formatter_class=fmt)
    _add_dataset(p)
    _add_fit_options(p)
    p.add_argument("--out", required=True, help="posterior output directory")
    _add_threads(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="write posterior property draws as a 4-D NIfTI",
                       formatter_class=fmt)
    p.add_argument("--posterior", required=True, help="directory written by 'fit'")
    _add_property(p)
    p.add_argument("--draws", type=_positive_int, default=100, help="number of draws")
    p.add_argument("--out", required=True, help="output NIfTI path")
    _add_threads(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("map", help="voxel-level NUQ quality map", formatter_class=fmt)
    p.add_argument("--posterior", required=True, help="directory written by 'fit'")
    _add_property(p)
    p.add_argument("--pairs", type=_positive_int, default=DEFAULT_PAIRS,
                   help="draw pairs averaged per voxel")
    p.add_argument("--out", required=True, help="output NIfTI path")
    _add_threads(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("score", help="pooled NUQ score of a region", formatter_class=fmt)
    p.add_argument("--posterior", required=True, help="directory written by 'fit'")
    _add_property(p)
    _add_kernel(p)
    p.add_argument("--region", default=None,
                   help="inclusive box x0:x1,y0:y1,z0:z1 (default: whole subject)")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    _add_threads(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="score raw vs processed data; exit 3 if processed is worse",
                       formatter_class=fmt)
    _add_dataset(p, "--raw")
    p.add_argument("--processed", required=True, help="processed 4-D NIfTI, same geometry")
    p.add_argument("--processed-bval", default=None, help="bval of processed data (default: --bval)")
    p.add_argument("--processed-bvec", default=None, help="bvec of processed data (default: --bvec)")
    _add_fit_options(p)
    _add_property(p)
    _add_kernel(p)
    p.add_argument("--pairs", type=_positive_int, default=DEFAULT_PAIRS,
                   help="draw pairs for the voxel maps")
    p.add_argument("--out", required=True, help="output directory")
    _add_threads(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("group", help="Bayesian t-score map for two groups", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="cohort manifest JSON")
    p.add_argument("--weighting", choices=("voxel", "global"), default="voxel",
                   help="per-voxel or per-subject precision weights")
    p.add_argument("--eps", type=float, default=1e-8, help="floor on posterior std")
    p.add_argument("--threshold", type=float, default=2.0, help="|t| threshold for the summary")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_group)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DatasetValidationError as e:
        print("error: dataset validation failed:", file=sys.stderr)
        for line in e.report:
            print(f"  - {line}", file=sys.stderr)
        return EXIT_USAGE
    except (NuqError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
