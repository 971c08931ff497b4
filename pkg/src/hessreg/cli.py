"""Command-line interface.

Subcommands: register, map, bias, synth, mtre, trace-export.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import HessregError
from .evaluation import (
    compute_mtre,
    scatter_export,
    similarity_map,
    write_pgm_slices,
)
from .optimizer import DEConfig, read_trace_csv, write_trace_csv
from .registration import METRICS, RegistrationConfig, register
from .synthesis import KINDS, apply_bias_field, synthesize_pair
from .transform import (
    N_PARAMS,
    PARAM_NAMES,
    AffineTransform,
    build_transform,
    load_transform,
    save_transform,
)
from .volume_io import load_landmarks, load_volume, save_landmarks, save_volume

log = logging.getLogger("hessreg")


def _add_registration_flags(p: argparse.ArgumentParser) -> None:
    d = RegistrationConfig()
    de = DEConfig()
    p.add_argument("--metric", choices=METRICS, default=d.metric, help="similarity metric")
    p.add_argument("--sigma", type=float, default=d.sigma_mm, help="Gaussian derivative scale (mm)")
    p.add_argument("--samples", type=int, default=d.num_samples, help="number of random fixed-image samples N")
    p.add_argument("--max-translation", type=float, default=d.max_translation_mm, help="translation bound (mm)")
    p.add_argument("--max-rotation", type=float, default=d.max_rotation_deg, help="rotation bound per axis (degrees)")
    p.add_argument("--max-shear", type=float, default=d.max_shear, help="shear bound (absolute matrix entry)")
    p.add_argument("--max-scale", type=float, default=d.max_scale_change, help="scale bound: scale in [1-x, 1+x]")
    p.add_argument("--population", type=int, default=de.population_size, help="DE population size")
    p.add_argument("--iterations", type=int, default=de.max_iterations, help="DE maximum iterations")
    p.add_argument("--crossover", type=float, default=de.crossover_prob, help="DE crossover probability")
    p.add_argument("--weight-min", type=float, default=de.weight_range[0], help="DE differential weight lower limit")
    p.add_argument("--weight-max", type=float, default=de.weight_range[1], help="DE differential weight upper limit")
    p.add_argument(
        "--termination", type=float, default=de.termination_ratio,
        help="stop when std(population cost) < this * |mean(population cost)|",
    )
    p.add_argument("--sample-margin", type=float, default=d.sample_margin_mm, help="extra sampling margin (mm)")
    p.add_argument(
        "--min-valid-fraction", type=float, default=d.min_valid_fraction,
        help="minimum usable fraction of samples",
    )
    p.add_argument("--no-identity-seed", action="store_true", help="do not seed the identity into the population")
    p.add_argument("--no-normalize", action="store_true", help="skip zero-mean/unit-variance intensity normalisation")
    p.add_argument("--seed", type=int, default=d.seed, help="seed for sampling and DE")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="hessreg", description="Hessian-based multimodal affine registration", formatter_class=fmt
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1, help="worker threads (results do not depend on it)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="affine registration of moving onto fixed", formatter_class=fmt)
    p.add_argument("--fixed", required=True, help="fixed volume (.nii or .raw/.json)")
    p.add_argument("--moving", required=True, help="moving volume")
    p.add_argument("--out", required=True, help="output transform file (fixed -> moving world mm)")
    p.add_argument("--trace", help="optional trace CSV of every evaluated deformation")
    _add_registration_flags(p)

    p = sub.add_parser("map", help="voxel-wise similarity map of two aligned volumes", formatter_class=fmt)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--sigma", type=float, required=True, help="Gaussian derivative scale (mm)")
    p.add_argument("--metric", choices=METRICS, default="hessian")
    p.add_argument("--out", required=True, help="output map volume")
    p.add_argument("--pgm", help="prefix for central-slice PGM previews")

    p = sub.add_parser("bias", help="multiply a volume by a synthetic bias field", formatter_class=fmt)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--strength", type=float, required=True, help="field range is [1-s, 1+s]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixed/moving pair", formatter_class=fmt)
    p.add_argument("--kind", choices=KINDS, default="gaussian_blobs")
    p.add_argument("--dims", type=int, nargs="+", default=[64], help="1 or 3 voxel counts")
    p.add_argument("--spacing", type=float, nargs="+", default=[1.0], help="1 or 3 spacings (mm)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="noise std relative to moving-image std")
    p.add_argument(
        "--warp", type=float, nargs=N_PARAMS, metavar="P",
        help="deformation realigning moving onto fixed: " + " ".join(PARAM_NAMES),
    )
    p.add_argument("--bias", type=float, default=0.0, help="bias-field strength applied to both images")
    p.add_argument("--out-fixed", required=True)
    p.add_argument("--out-moving", required=True)
    p.add_argument("--out-lms", required=True, help="fixed-image landmarks")
    p.add_argument("--out-lms-moving", help="moving-image landmarks (ground truth)")

    p = sub.add_parser("mtre", help="mean target registration error", formatter_class=fmt)
    p.add_argument("--lms-fixed", required=True)
    p.add_argument("--lms-moving", required=True)
    p.add_argument("--transform", help="transform file (default: identity)")

    p = sub.add_parser("trace-export", help="similarity vs mTRE for every evaluated deformation", formatter_class=fmt)
    p.add_argument("--trace", required=True)
    p.add_argument("--transform", required=True, help="transform file written by register (gives the pivot)")
    p.add_argument("--lms-fixed", required=True)
    p.add_argument("--lms-moving", required=True)
    p.add_argument("--out", required=True)
    return parser


def _triple(values, name):
    if len(values) == 1:
        return tuple(values) * 3
    if len(values) == 3:
        return tuple(values)
    raise HessregError(f"{name} takes 1 or 3 values")


def _cmd_register(a) -> None:
    cfg = RegistrationConfig(
        sigma_mm=a.sigma,
        num_samples=a.samples,
        metric=a.metric,
        max_translation_mm=a.max_translation,
        max_rotation_deg=a.max_rotation,
        max_shear=a.max_shear,
        max_scale_change=a.max_scale,
        de=DEConfig(
            population_size=a.population,
            max_iterations=a.iterations,
            crossover_prob=a.crossover,
            weight_range=(a.weight_min, a.weight_max),
            termination_ratio=a.termination,
            seed=a.seed,
            seed_initial=not a.no_identity_seed,
        ),
        sample_margin_mm=a.sample_margin,
        seed=a.seed,
        min_valid_fraction=a.min_valid_fraction,
        normalize=not a.no_normalize,
        workers=max(1, a.threads),
    )
    t0 = time.perf_counter()
    fixed, moving = load_volume(a.fixed), load_volume(a.moving)
    load_s = time.perf_counter() - t0
    res = register(fixed, moving, cfg)
    save_transform(res.transform, a.out)
    if a.trace:
        write_trace_csv(res.trace, a.trace, PARAM_NAMES)
    tr = res.trace
    print(f"preprocess_time_s: {load_s + res.preprocess_seconds:.3f}")
    print(f"optimize_time_s: {res.optimize_seconds:.3f}")
    print(f"iterations: {tr.n_iterations} ({tr.termination_reason}), evaluations: {len(tr)}")
    print(f"best_similarity: {-tr.best_cost:.6f}")


def _cmd_map(a) -> None:
    sm = similarity_map(load_volume(a.fixed), load_volume(a.moving), a.metric, a.sigma)
    save_volume(sm.volume, a.out)
    if a.pgm:
        write_pgm_slices(sm.volume, a.pgm)
    vals = sm.volume.data[sm.valid]
    mean = float(vals.mean()) if vals.size else 0.0
    print(f"valid_voxels: {vals.size}, mean_similarity: {mean:.6f}")


def _cmd_bias(a) -> None:
    save_volume(apply_bias_field(load_volume(a.input), a.strength, a.seed), a.out)


def _cmd_synth(a) -> None:
    dims = _triple(a.dims, "--dims")
    spacing = _triple(a.spacing, "--spacing")
    deformation = None
    if a.warp is not None:
        center = (np.asarray(dims) - 1) * np.asarray(spacing) / 2.0
        deformation = build_transform(a.warp, center)
    pair = synthesize_pair(a.kind, dims, spacing, a.seed, noise=a.noise, deformation=deformation)
    fixed, moving = pair.fixed, pair.moving
    if a.bias > 0:
        fixed = apply_bias_field(fixed, a.bias, (a.seed, 2))
        moving = apply_bias_field(moving, a.bias, (a.seed, 3))
    save_volume(fixed, a.out_fixed)
    save_volume(moving, a.out_moving)
    save_landmarks(pair.fixed_landmarks, a.out_lms)
    if a.out_lms_moving:
        save_landmarks(pair.moving_landmarks, a.out_lms_moving)


def _cmd_mtre(a) -> None:
    t = load_transform(a.transform) if a.transform else AffineTransform.identity()
    rep = compute_mtre(load_landmarks(a.lms_fixed), load_landmarks(a.lms_moving), t)
    print(f"mean: {rep.mean:.4f}")
    print(f"min: {rep.min:.4f}")
    print(f"max: {rep.max:.4f}")


def _cmd_trace_export(a) -> None:
    t = load_transform(a.transform)
    rows = scatter_export(
        read_trace_csv(a.trace), load_landmarks(a.lms_fixed), load_landmarks(a.lms_moving), t.center, a.out
    )
    print(f"rows: {len(rows)}")


_COMMANDS = {
    "register": _cmd_register,
    "map": _cmd_map,
    "bias": _cmd_bias,
    "synth": _cmd_synth,
    "mtre": _cmd_mtre,
    "trace-export": _cmd_trace_export,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _COMMANDS[args.command](args)
    except (HessregError, OSError) as exc:
        print(f"hessreg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
