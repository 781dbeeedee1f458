"""Command-line interface: alignment runs, dense MI map dumps, benchmark
sweeps, and synthetic evaluation.

Exit codes: 0 ok, 1 I/O failure, 2 degenerate input / usage error,
3 numerical-health failure, 4 map mismatch (diff-maps).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import synth, xcorr
from .align import AlignmentConfig, align_and_refine, result_to_dict, warp_nn
from .cmif import cmif_map, read_cmif_map, write_cmif_csv, write_cmif_map
from .core import DegenerateInputError, LabelImage, make_circular_mask
from .oracle import direct_cmif_map
from .quantize import fit_kmeans, quantize
from .xcorr import NumericalHealthError


# ---------------------------------------------------------------------------
# raster I/O

def load_image(path) -> np.ndarray:
    """Read an 8/16-bit grayscale or RGB raster into float64 in [0, 1]."""
    with Image.open(path) as img:
        mode = img.mode
        if mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(img, dtype=np.float64) / 65535.0
        if mode in ("L", "P"):
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        if mode in ("RGB", "RGBA"):
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        if mode == "I":
            arr = np.asarray(img, dtype=np.float64)
            top = arr.max()
            return arr / top if top > 0 else arr
        if mode == "F":
            return np.asarray(img, dtype=np.float64)
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_mask(path, shape) -> np.ndarray:
    arr = load_image(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    if arr.shape != tuple(shape):
        raise ValueError(f"mask {path} shape {arr.shape} != image shape {tuple(shape)}")
    return arr > 0.5


def _gray(image: np.ndarray) -> np.ndarray:
    return image if image.ndim == 2 else image.mean(axis=-1)


def write_overlay(path, image_a, image_b, transform) -> None:
    """Red/green overlay of the reference and the warped floating image."""
    ga = _gray(image_a)
    gb = _gray(image_b)
    k = 256
    levels_b = LabelImage(labels=np.clip(gb * (k - 1), 0, k - 1).astype(np.int32), k=k)
    warped, wmask = warp_nn(levels_b, np.ones(gb.shape, bool), transform, ga.shape)
    gw = np.where(wmask, warped.labels / (k - 1.0), 0.0)
    rgb = np.stack([ga, gw, ga * 0.5], axis=-1)
    Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# config file (key=value lines; flags take precedence)

def _read_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (expected key=value): {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip().strip('"')
    return out


def _resolve(args, cfg: dict, name: str, cast, default):
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return flag
    if name in cfg:
        return cast(cfg[name])
    return default


def _build_config(args) -> AlignmentConfig:
    cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    return AlignmentConfig(
        k=_resolve(args, cfg, "k", int, 16),
        gamma=_resolve(args, cfg, "gamma", float, 0.5),
        angle_count=_resolve(args, cfg, "angles", int, 200),
        refinement_count=_resolve(args, cfg, "refine", int, 32),
        seed=_resolve(args, cfg, "seed", int, 0),
        batch_size=_resolve(args, cfg, "batch-size", int, 1000),
        max_iter=_resolve(args, cfg, "max-iter", int, 25),
        workers=_resolve(args, cfg, "threads", int, 1),
    )


# ---------------------------------------------------------------------------
# subcommands

def cmd_align(args) -> int:
    config = _build_config(args)
    image_a = load_image(args.reference)
    image_b = load_image(args.floating)
    mask_a = (
        load_mask(args.mask_a, image_a.shape[:2])
        if args.mask_a
        else (make_circular_mask(image_a.shape[:2]) if args.circular_mask else np.ones(image_a.shape[:2], bool))
    )
    mask_b = (
        load_mask(args.mask_b, image_b.shape[:2])
        if args.mask_b
        else (make_circular_mask(image_b.shape[:2]) if args.circular_mask else np.ones(image_b.shape[:2], bool))
    )
    result = align_and_refine(image_a, mask_a, image_b, mask_b, config)
    doc = result_to_dict(result, config)
    with open(args.output, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    if args.overlay:
        write_overlay(args.overlay, image_a, image_b, result.transform)
    print(f"mi={result.mi:.6f} bits  angle={result.angle:.6f} rad  "
          f"displacement=({result.displacement[0]}, {result.displacement[1]})  stage={result.stage}")
    return 0


def _quantized_pair_from_files(args):
    image_a = load_image(args.reference)
    image_b = load_image(args.floating)
    shape_a, shape_b = image_a.shape[:2], image_b.shape[:2]
    mask_a = make_circular_mask(shape_a) if args.circular_mask else np.ones(shape_a, bool)
    mask_b = make_circular_mask(shape_b) if args.circular_mask else np.ones(shape_b, bool)
    model_a = fit_kmeans(image_a, mask_a, args.k, seed=args.seed)
    model_b = fit_kmeans(image_b, mask_b, args.k, seed=args.seed)
    return quantize(image_a, model_a), mask_a, quantize(image_b, model_b), mask_b


def cmd_cmif_map(args) -> int:
    labels_a, mask_a, labels_b, mask_b = _quantized_pair_from_files(args)
    if args.method == "fft":
        cmap = cmif_map(labels_a, mask_a, labels_b, mask_b, workers=args.threads)
    else:
        cmap = direct_cmif_map(labels_a, mask_a, labels_b, mask_b, with_counts=False).map
    if args.output:
        write_cmif_map(cmap, args.output)
    if args.csv:
        write_cmif_csv(cmap, args.csv)
    print(f"extent={cmap.shape[0]}x{cmap.shape[1]}  valid={int(cmap.valid.sum())}  "
          f"max_mi={cmap.mi[cmap.valid].max() if cmap.valid.any() else 0.0:.6f}")
    return 0


def cmd_diff_maps(args) -> int:
    a = read_cmif_map(args.first)
    b = read_cmif_map(args.second)
    problems = []
    if a.domain != b.domain:
        problems.append(f"domains differ: {a.domain} vs {b.domain}")
    else:
        if not np.array_equal(a.n, b.n):
            problems.append(f"overlap planes differ in {int((a.n != b.n).sum())} cells")
        if not np.array_equal(a.valid, b.valid):
            problems.append("validity planes differ")
        mi_diff = float(np.abs(a.mi - b.mi).max()) if a.mi.size else 0.0
        if mi_diff > args.mi_tol:
            problems.append(f"max MI difference {mi_diff:.3e} > {args.mi_tol:.1e}")
        else:
            print(f"max MI difference {mi_diff:.3e}")
    if problems:
        for p in problems:
            print(f"MISMATCH: {p}")
        return 4
    print("maps match")
    return 0


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchRecord:
    method: str
    ref_size: int
    float_size: int
    k: int
    wall_time: float
    transforms_count: int
    checksum: str
    status: str  # "ok" or "budget-exceeded"


def _map_checksum(cmap) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<IIii", *cmap.shape, *cmap.domain.origin))
    h.update(np.ascontiguousarray(cmap.n, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(cmap.valid, dtype="u1").tobytes())
    return h.hexdigest()[:16]


def _direct_cost_model(size: int, k: int) -> float:
    """Growth model for the direct method: overlap work plus histogram work
    per displacement."""
    extent = (size + size // 2 - 1) ** 2
    return (size // 2) ** 2 * extent + (2 * k + k * k) * extent


def bench_inputs(size: int, k: int, seed: int):
    field = synth.smooth_field((size, size), seed=seed, sigma=max(3.0, size / 64.0))
    labels = synth.quantile_labels(field, k)
    q = size // 4
    flt = labels[q : q + size // 2, q : q + size // 2]
    ref_img = LabelImage(labels=labels, k=k)
    flt_img = LabelImage(labels=flt, k=k)
    return ref_img, np.ones(ref_img.shape, bool), flt_img, np.ones(flt_img.shape, bool)


def run_bench(sizes, ks, methods, budget: float, seed: int = 0, timing: str = "map",
              workers: int = 1, angles: int = 100, refine: int = 32) -> list[BenchRecord]:
    records = []
    last_direct: dict[int, tuple[int, float]] = {}  # k -> (size, wall_time)
    for size in sizes:
        for k in ks:
            ref, mask_a, flt, mask_b = bench_inputs(size, k, seed)
            if timing == "pipeline":
                spec = synth.TrialSpec(size=size, seed=seed, k=k, angle_count=angles,
                                       refinement_count=refine)
                xcorr.stats.reset()
                t0 = time.perf_counter()
                synth.run_trial(spec, workers=workers)
                wall = time.perf_counter() - t0
                records.append(BenchRecord("fft", size, size // 2, k, wall,
                                           xcorr.stats.total_grids, "", "ok"))
                continue
            for method in methods:
                if method == "direct":
                    prev = last_direct.get(k)
                    if prev is not None:
                        projected = prev[1] * _direct_cost_model(size, k) / _direct_cost_model(prev[0], k)
                        if projected > budget:
                            records.append(BenchRecord(method, size, size // 2, k,
                                                       float("nan"), 0, "", "budget-exceeded"))
                            continue
                    t0 = time.perf_counter()
                    cmap = direct_cmif_map(ref, mask_a, flt, mask_b, with_counts=False).map
                    wall = time.perf_counter() - t0
                    last_direct[k] = (size, wall)
                    records.append(BenchRecord(method, size, size // 2, k, wall, 0,
                                               _map_checksum(cmap), "ok"))
                else:
                    xcorr.stats.reset()
                    t0 = time.perf_counter()
                    cmap = cmif_map(ref, mask_a, flt, mask_b, joint_chunk=1, workers=workers)
                    wall = time.perf_counter() - t0
                    records.append(BenchRecord(method, size, size // 2, k, wall,
                                               xcorr.stats.total_grids,
                                               _map_checksum(cmap), "ok"))
    return records


def write_bench_csv(records, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["method", "ref_size", "float_size", "k", "wall_time",
                     "transforms_count", "checksum", "status"])
    for r in records:
        writer.writerow([r.method, r.ref_size, r.float_size, r.k,
                         f"{r.wall_time:.6f}" if math.isfinite(r.wall_time) else "",
                         r.transforms_count, r.checksum, r.status])


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    ks = [int(s) for s in args.ks.split(",")]
    methods = args.methods.split(",")
    for m in methods:
        if m not in ("fft", "direct"):
            raise ValueError(f"unknown method {m!r}")
    records = run_bench(sizes, ks, methods, budget=args.budget, seed=args.seed,
                        timing=args.timing, workers=args.threads,
                        angles=args.angles, refine=args.refine)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            write_bench_csv(records, fh)
    write_bench_csv(records, sys.stdout)
    # hard failure on checksum mismatch between methods on equal inputs
    seen: dict[tuple[int, int], str] = {}
    for r in records:
        if r.status != "ok" or not r.checksum:
            continue
        key = (r.ref_size, r.k)
        if key in seen and seen[key] != r.checksum:
            print(f"CHECKSUM MISMATCH at size={r.ref_size} k={r.k}", file=sys.stderr)
            return 4
        seen.setdefault(key, r.checksum)
    return 0


# ---------------------------------------------------------------------------
# synthetic evaluation

def cmd_eval(args) -> int:
    h, _, w = args.size.partition("x")
    size = int(h)
    if w and int(w) != size:
        raise ValueError("only square sizes are supported")
    specs = [
        synth.TrialSpec(
            size=size,
            seed=args.seed + i,
            modality=args.modality_sim,
            noise=args.noise,
            angle_range=args.angle_range,
            k=args.k,
            angle_count=args.angles,
            refinement_count=args.refine,
            gamma=args.gamma,
        )
        for i in range(args.trials)
    ]
    trials = synth.run_trials(specs, processes=args.threads)
    errors = np.array([t["corner_error"] for t in trials])
    times = np.array([t["wall_time"] for t in trials])
    report = {
        "params": {
            "trials": args.trials, "seed": args.seed, "size": size,
            "modality_sim": args.modality_sim, "noise": args.noise,
            "angle_range": args.angle_range, "k": args.k, "angles": args.angles,
            "refine": args.refine, "gamma": args.gamma,
        },
        "success_rate": float(np.mean([t["success"] for t in trials])),
        "mean_corner_error": float(errors.mean()),
        "median_corner_error": float(np.median(errors)),
        "time_p50": float(np.percentile(times, 50)),
        "time_p90": float(np.percentile(times, 90)),
        "trials": trials,
    }
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(trials[0].keys()))
            writer.writeheader()
            for t in trials:
                writer.writerow(t)
    print(f"success_rate={report['success_rate']:.3f}  "
          f"mean_corner_error={report['mean_corner_error']:.3f}px  "
          f"time_p50={report['time_p50']:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# parser

def _k_at_least_2(value: str) -> int:
    k = int(value)
    if k < 2:
        raise argparse.ArgumentTypeError(f"k must be >= 2, got {k}")
    return k


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mialign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="globally align two images by MI maximization")
    p.add_argument("reference")
    p.add_argument("floating")
    p.add_argument("--k", type=_k_at_least_2, default=None)
    p.add_argument("--angles", type=int, default=None)
    p.add_argument("--refine", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--mask-a", default=None)
    p.add_argument("--mask-b", default=None)
    p.add_argument("--circular-mask", action="store_true")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--overlay", default=None, help="write an RGB overlay PNG")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("cmif-map", help="dense MI map between two images at angle 0")
    p.add_argument("reference")
    p.add_argument("floating")
    p.add_argument("--k", type=_k_at_least_2, default=16)
    p.add_argument("--method", choices=("fft", "direct"), default="fft")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--circular-mask", action="store_true")
    p.add_argument("-o", "--output", default=None, help="binary .cmif output")
    p.add_argument("--csv", default=None, help="CSV export (chi_row,chi_col,mi,n,valid)")
    p.set_defaults(func=cmd_cmif_map)

    p = sub.add_parser("diff-maps", help="compare two .cmif files")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--mi-tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_diff_maps)

    p = sub.add_parser("bench", help="time fft vs direct map computation")
    p.add_argument("--sizes", default="128,256,512")
    p.add_argument("--ks", default="2,4,8,16,32,64")
    p.add_argument("--methods", default="fft,direct")
    p.add_argument("--budget", type=float, default=600.0, help="direct-method budget (s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", choices=("map", "pipeline"), default="map")
    p.add_argument("--angles", type=int, default=100)
    p.add_argument("--refine", type=int, default=32)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="synthetic recovery evaluation")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="256x256")
    p.add_argument("--angle-range", type=float, default=math.pi)
    p.add_argument("--modality-sim", choices=synth.MODALITIES, default="gamma-remap")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--k", type=_k_at_least_2, default=16)
    p.add_argument("--angles", type=int, default=100)
    p.add_argument("--refine", type=int, default=32)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, UnidentifiedImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DegenerateInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalHealthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
