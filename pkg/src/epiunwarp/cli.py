"""
Command-line pipeline: load a reversed-PE image pair, estimate the field map,
correct the images and write results.

Usage::

    epiunwarp --in-plus up.nii.gz --in-minus down.nii.gz --pe-dim 2 --out run/sub01
    epiunwarp simulate --phantom 64x64x48 --field smooth-random --amplitude 3 --out fix/s0

Outputs of a correction run (``PREFIX`` from ``--out``):

* ``PREFIX_fieldmap.nii.gz``: displacement along PE at voxel centers, in
  voxels (or Hz with ``--fieldmap-units hz``), original axis order
* ``PREFIX_fieldmap_nodes.nii.gz``: the same field on the staggered grid
  (one extra sample along PE), in voxels
* ``PREFIX_corrected_plus.nii.gz`` / ``PREFIX_corrected_minus.nii.gz``
  (``--correction jacobian``) or ``PREFIX_corrected.nii.gz`` (``lsq``)
* ``PREFIX_metrics.txt``: flat ``key=value`` lines
* ``PREFIX_log.tsv``: one line per solver iteration
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import operators as ops
from .correction import (fieldmap_rel_error, jacobian_correction, least_squares_correction,
                         relative_improvement, simulate_pair)
from .errors import (BarrierError, ShapeError, UnsupportedError, ValidationError, VolumeFormatError)
from .image_model import Grid
from .objective import ALPHA_DEFAULT, BETA_DEFAULT, Objective
from .optim import IterationLogger, SolverOptions, solve
from .ot_init import init_field_map
from .simulation import FIELD_KINDS, make_phantom, synth_field_map
from .volume_io import PRECISIONS, Volume, permute_pe_last, read_volume, unpermute, write_volume

log = logging.getLogger("epiunwarp")

EXIT_OK = 0
EXIT_SHAPE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


@dataclass
class RunConfig:
    input_plus: str
    input_minus: str
    pe_dim: int
    alpha: float = ALPHA_DEFAULT
    beta: float = BETA_DEFAULT
    optimizer: str = "gn"
    precision: str = "double"
    init_blur: bool = True
    correction: str = "jacobian"
    out: str = "epiunwarp"
    seed: int = 0
    threads: int = 1
    verbose: bool = False
    fieldmap_units: str = "voxels"
    dwell_time: float | None = None
    true_field: str | None = None
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        if Path(self.input_plus).resolve() == Path(self.input_minus).resolve():
            raise ValueError("--in-plus and --in-minus must be different files")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.pe_dim not in (1, 2, 3):
            raise ValueError("pe_dim must be 1, 2 or 3")
        if self.optimizer not in ("gn", "admm", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.correction not in ("jacobian", "lsq"):
            raise ValueError(f"unknown correction {self.correction!r}")
        if self.fieldmap_units == "hz" and not (self.dwell_time and self.dwell_time > 0):
            raise ValueError("--fieldmap-units hz needs a positive --dwell-time")

    def options(self) -> SolverOptions:
        return SolverOptions(verbose=self.verbose, **self.solver)


# --------------------------------------------------------------------------- metrics file


def emit_metrics(metrics: dict, path) -> None:
    """Write ``key=value`` lines (sorted keys, floats in repr form)."""
    lines = []
    for key in sorted(metrics):
        val = metrics[key]
        if isinstance(val, (float, np.floating)):
            val = repr(float(val))
        lines.append(f"{key}={val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_metrics(path) -> dict:
    """Read a metrics file back; numeric values become floats or ints."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or "=" not in line:
            continue
        key, val = line.split("=", 1)
        for conv in (int, float):
            try:
                out[key] = conv(val)
                break
            except ValueError:
                continue
        else:
            out[key] = val
    return out


# --------------------------------------------------------------------------- field-map files


def _field_volume(b_vox, pe_volume: Volume, perm):
    return unpermute(Volume(b_vox, pe_volume.voxel_size, pe_volume.affine), perm)


def to_hz(b_vox, dwell_time, n_pe):
    """Voxel displacement to off-resonance in Hz (``voxels = Hz * dwell * n_pe``)."""
    return b_vox / (dwell_time * n_pe)


def _load_true_field(path, perm, grid: Grid):
    # staggered voxels file in original axis order -> PE-last, mm
    vol = read_volume(path)
    data = np.transpose(vol.data, perm.order)
    if data.shape != grid.staggered_shape:
        raise ShapeError(f"{path}: true field shape {data.shape} != {grid.staggered_shape}")
    return data * grid.h[2]


# --------------------------------------------------------------------------- pipeline


def run(config: RunConfig) -> int:
    """Run the correction pipeline; returns the process exit code."""
    t0 = time.perf_counter()
    ops.set_fft_workers(config.threads)
    prefix = Path(config.out)

    try:
        vp_raw = read_volume(config.input_plus, config.precision)
        vm_raw = read_volume(config.input_minus, config.precision)
    except FileNotFoundError as exc:
        print(f"error: cannot read input: {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except (OSError, VolumeFormatError, UnsupportedError, ValidationError) as exc:
        print(f"error: cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    if vp_raw.shape != vm_raw.shape:
        print(f"error: input dims differ: {vp_raw.shape} vs {vm_raw.shape}", file=sys.stderr)
        return EXIT_SHAPE

    vp, perm = permute_pe_last(vp_raw, config.pe_dim)
    vm, _ = permute_pe_last(vm_raw, config.pe_dim)
    grid = Grid.of(vp)
    h3 = grid.h[2]
    dtype = PRECISIONS[config.precision]
    pair = (vp.data, vm.data)

    b0 = init_field_map(vp, vm, blur=config.init_blur).astype(dtype)
    obj = Objective.from_volumes(vp, vm, config.alpha, config.beta)
    start = obj.evaluate(b0, do_derivative=False)
    if not start.feasible:
        print(f"error: initial field map infeasible (max |d_v b| = {start.max_abs_dpe:.4f})", file=sys.stderr)
        return EXIT_INFEASIBLE
    init_ri = relative_improvement(pair, jacobian_correction(b0, vp, vm))

    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        logger = IterationLogger(f"{prefix}_log.tsv", verbose=config.verbose)
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    with logger:
        logger.header(f"{config.optimizer} on {grid.dims}")
        try:
            b, report = solve(config.optimizer, obj, b0, config.options(), logger)
        except BarrierError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE

    final = obj.evaluate(b, do_derivative=False)
    corrected = jacobian_correction(b, vp, vm)
    metrics = {
        "relative_improvement": relative_improvement(pair, corrected),
        "init_relative_improvement": init_ri,
        "smoothness_value": final.S,
        "loss_value": final.J,
        "distance_value": final.D,
        "barrier_value": final.P,
        "max_abs_dpe": final.max_abs_dpe,
        "max_abs_dpe_seen": report.max_abs_dpe_seen,
        **report.totals(),
    }
    b_vox = b.astype(np.float64) / h3
    try:
        if config.true_field:
            bt = _load_true_field(config.true_field, perm, grid)
            metrics["fieldmap_rel_error"] = fieldmap_rel_error(b, bt)

        centers = ops.avg_pe(b_vox)
        if config.fieldmap_units == "hz":
            centers = to_hz(centers, config.dwell_time, grid.dims[2])
        out_dtype = dtype
        write_volume(_field_volume(centers.astype(out_dtype), vp, perm), f"{prefix}_fieldmap.nii.gz")
        write_volume(_field_volume(b_vox.astype(out_dtype), vp, perm), f"{prefix}_fieldmap_nodes.nii.gz")
        if config.correction == "jacobian":
            for tag, img in zip(("plus", "minus"), corrected):
                write_volume(unpermute(vp.with_data(img.astype(dtype)), perm), f"{prefix}_corrected_{tag}.nii.gz")
        else:
            lsq = least_squares_correction(b, vp, vm)
            metrics["lsq_converged"] = int(lsq.converged)
            write_volume(unpermute(vp.with_data(lsq.image), perm), f"{prefix}_corrected.nii.gz")

        metrics["wall_seconds"] = time.perf_counter() - t0
        for key, val in asdict(config).items():
            if key == "solver":
                for k, v in val.items():
                    metrics[f"config.solver.{k}"] = v
            else:
                metrics[f"config.{key}"] = val
        emit_metrics(metrics, f"{prefix}_metrics.txt")
    except (OSError, VolumeFormatError, ValidationError) as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    log.info("relative improvement %.2f%%", metrics["relative_improvement"])
    return EXIT_OK


def simulate(truth: Volume, kind, amplitude_vox, out, pe_dim=3, seed=0, noise=0.0):
    """
    Write a distorted pair and its true field map.

    Files: ``OUT_plus.nii.gz``, ``OUT_minus.nii.gz``, ``OUT_btrue.nii.gz``
    (voxel centers) and ``OUT_btrue_nodes.nii.gz`` (staggered), fields in
    voxels along PE, original axis order.
    """
    vol, perm = permute_pe_last(truth, pe_dim)
    grid = Grid.of(vol)
    h3 = grid.h[2]
    b_true = synth_field_map(grid, kind, amplitude_vox * h3, seed)
    vp, vm = simulate_pair(vol, b_true, noise=noise, seed=seed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(unpermute(vp, perm), f"{out}_plus.nii.gz")
    write_volume(unpermute(vm, perm), f"{out}_minus.nii.gz")
    b_vox = b_true / h3
    write_volume(_field_volume(ops.avg_pe(b_vox), vol, perm), f"{out}_btrue.nii.gz")
    write_volume(_field_volume(b_vox, vol, perm), f"{out}_btrue_nodes.nii.gz")
    return vp, vm, b_true


# --------------------------------------------------------------------------- argument parsing


def _dims(text):
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N1xN2xN3, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 2:
        raise argparse.ArgumentTypeError(f"expected three dims >= 2, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="epiunwarp",
        description="Estimate a field map from a reversed phase-encoding EPI pair and correct both images. "
                    "Use 'epiunwarp simulate -h' for the fixture generator.")
    p.add_argument("--in-plus", required=True, help="image acquired with +v phase encoding (NIfTI-1)")
    p.add_argument("--in-minus", required=True, help="image acquired with -v phase encoding (NIfTI-1)")
    p.add_argument("--pe-dim", type=int, choices=(1, 2, 3), required=True, help="phase-encoding axis (1-based)")
    p.add_argument("--alpha", type=float, default=ALPHA_DEFAULT, help="smoothness weight (default %(default)s)")
    p.add_argument("--beta", type=float, default=BETA_DEFAULT, help="barrier weight (default %(default)s)")
    p.add_argument("--optimizer", choices=("gn", "admm", "lbfgs"), default="gn")
    p.add_argument("--precision", choices=("single", "double"), default="double")
    p.add_argument("--no-init-blur", dest="init_blur", action="store_false", help="skip blurring the OT initialization")
    p.add_argument("--correction", choices=("jacobian", "lsq"), default="jacobian")
    p.add_argument("--out", default="epiunwarp", help="output prefix (default %(default)s)")
    p.add_argument("--threads", type=int, default=1, help="cap on kernel threads; 1 is deterministic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true", help="print the iteration log")
    p.add_argument("--fieldmap-units", choices=("voxels", "hz"), default="voxels")
    p.add_argument("--dwell-time", type=float, default=None, help="effective echo spacing in s (for Hz output)")
    p.add_argument("--true-field", default=None, help="staggered true field (voxels) to report fieldmap_rel_error")
    g = p.add_argument_group("solver overrides")
    g.add_argument("--max-iter", type=int, default=None)
    g.add_argument("--grad-tol", type=float, default=None)
    g.add_argument("--loss-tol", dest="loss_change_tol", type=float, default=None)
    g.add_argument("--fieldmap-tol", dest="fieldmap_change_tol", type=float, default=None)
    g.add_argument("--cg-max-iter", type=int, default=None)
    return p


def build_simulate_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epiunwarp simulate",
                                description="Distort a truth image with a synthetic field map.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--truth", help="undistorted image (NIfTI-1)")
    src.add_argument("--phantom", type=_dims, help="generate a phantom of size N1xN2xN3 instead")
    p.add_argument("--field", choices=FIELD_KINDS, default="smooth-random")
    p.add_argument("--amplitude", type=float, required=True, help="peak displacement in voxels")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--pe-dim", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="std of Gaussian noise added to each image")
    return p


_SOLVER_KEYS = ("max_iter", "grad_tol", "loss_change_tol", "fieldmap_change_tol", "cg_max_iter")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    if argv and argv[0] == "simulate":
        args = build_simulate_parser().parse_args(argv[1:])
        try:
            if args.truth:
                truth = read_volume(args.truth)
            else:
                truth = make_phantom(Grid(args.phantom), seed=args.seed)
            simulate(truth, args.field, args.amplitude, args.out, args.pe_dim, args.seed, args.noise)
        except FileNotFoundError as exc:
            print(f"error: cannot read input: {exc.filename}", file=sys.stderr)
            return EXIT_IO
        except (OSError, VolumeFormatError, UnsupportedError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SHAPE if isinstance(exc, ShapeError) else 1
        return EXIT_OK

    args = build_parser().parse_args(argv)
    if args.verbose:
        log.setLevel(logging.INFO)
    solver = {k: getattr(args, k) for k in _SOLVER_KEYS if getattr(args, k) is not None}
    try:
        config = RunConfig(
            input_plus=args.in_plus, input_minus=args.in_minus, pe_dim=args.pe_dim,
            alpha=args.alpha, beta=args.beta, optimizer=args.optimizer, precision=args.precision,
            init_blur=args.init_blur, correction=args.correction, out=args.out, seed=args.seed,
            threads=args.threads, verbose=args.verbose, fieldmap_units=args.fieldmap_units,
            dwell_time=args.dwell_time, true_field=args.true_field, solver=solver)
        config.options()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
