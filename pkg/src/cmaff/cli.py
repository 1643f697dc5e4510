"""Command-line front end.

Machine-readable key/value output goes to stdout, diagnostics and progress to
stderr, so runs can be diffed byte-exactly.  Every subcommand is deterministic
given its flags; all randomness is seeded (``--seed`` flags fall back to the
``CMAFF_SEED`` environment variable, then to 0).  On failure, files the
command had started writing are removed and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import annotations, augment, fusion, images, metrics
from .ften import read_ften, write_ften
from .tensor import FeatureMap

GRAD_TOLERANCE = 1e-5
# published parameter budget of the original three-block deployment, for
# side-by-side comparison in bench reports (not a pass/fail target)
REFERENCE_PARAMS_M = 0.55

_ARRANGEMENT_NAMES = [a.value for a in fusion.Arrangement]


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("CMAFF_SEED")
    if env is not None:
        return int(env)
    return 0


def _emit(line: str) -> None:
    sys.stdout.write(line + "\n")


def _note(line: str) -> None:
    sys.stderr.write(line + "\n")


# ---------------------------------------------------------------------------
# subcommand bodies; each registers outputs before writing them
# ---------------------------------------------------------------------------


def _cmd_fuse(args, created: list[Path]) -> int:
    rgb = read_ften(args.rgb)
    ir = read_ften(args.ir)
    if rgb.ndim != 3 or ir.ndim != 3:
        raise ValueError("fuse inputs must be C,H,W tensors")
    fr = FeatureMap(rgb)
    ft = FeatureMap(ir)
    arrangement = fusion.Arrangement(args.arrangement)
    if args.params:
        params = fusion.load_params(args.params)
    else:
        seed = _resolve_seed(args.seed)
        params = fusion.init_params(
            fr.channels,
            r_dem=args.r_dem,
            seed=seed,
            use_concat=arrangement is fusion.Arrangement.PARALLEL_CONCAT,
        )
    fused, masks = fusion.fuse_with_masks(fr, ft, params, arrangement)

    out = Path(args.out)
    created.append(out)
    write_ften(out, fused.data)
    _emit(f"out.file={out}")
    _emit(f"out.shape={fused.channels}x{fused.height}x{fused.width}")
    _emit(f"arrangement={arrangement.value}")

    if args.viz:
        for name, mask in (
            ("diff_mask", masks.diff),
            ("rgb_mask", masks.rgb),
            ("ir_mask", masks.ir),
        ):
            ften_path = Path(f"{args.viz}.{name}.ften")
            pgm_path = Path(f"{args.viz}.{name}.pgm")
            created.extend([ften_path, pgm_path])
            write_ften(ften_path, mask.data)
            images.write_pgm(pgm_path, images.render_gray(mask.data))
            _emit(f"viz.{name}={ften_path}")
    return 0


def _cmd_gradcheck(args, created: list[Path]) -> int:
    if args.channels < 1 or args.hw < 1 or args.seeds < 1:
        raise ValueError("channels, hw, and seeds must all be >= 1")
    if args.arrangement == "all":
        arrangements = list(fusion.Arrangement)
    else:
        arrangements = [fusion.Arrangement(args.arrangement)]
    seeds = list(range(args.seeds))
    per_arrangement: dict[str, list[float]] = {}
    for arr in arrangements:
        per_arrangement[arr.value] = fusion.check_gradients(
            args.channels, args.hw, args.hw, arr, seeds, r_dem=args.r_dem
        )
    for idx, seed in enumerate(seeds):
        cells = " ".join(
            f"{arr.value}={per_arrangement[arr.value][idx]:.3e}" for arr in arrangements
        )
        _emit(f"seed.{seed} {cells}")
    worst = 0.0
    for arr in arrangements:
        peak = max(per_arrangement[arr.value])
        worst = max(worst, peak)
        _emit(f"max.{arr.value}={peak:.3e}")
    _emit(f"tolerance={GRAD_TOLERANCE:.1e}")
    ok = worst <= GRAD_TOLERANCE
    _emit(f"result={'pass' if ok else 'fail'}")
    return 0 if ok else 1


def _cmd_eval(args, created: list[Path]) -> int:
    gts = metrics.parse_ground_truth(Path(args.gt).read_text())
    dets = metrics.parse_detections(Path(args.det).read_text())
    report = metrics.evaluate(dets, gts, num_classes=args.classes, threads=args.threads)
    sys.stdout.write(metrics.format_report(report))
    sys.stderr.write(metrics.format_table(report, annotations.VEDAI_CLASS_NAMES))
    return 0


def _cmd_convert(args, created: list[Path]) -> int:
    labels = annotations.convert_vedai_text(
        Path(args.input).read_text(), image_size=args.image_size
    )
    out = Path(args.out)
    created.append(out)
    lines = [annotations.write_label(box, class_id) for class_id, box in labels]
    out.write_text("\n".join(lines) + ("\n" if lines else ""))
    _emit(f"out.file={out}")
    _emit(f"converted={len(labels)}")
    return 0


def _cmd_stats(args, created: list[Path]) -> int:
    labels: list[tuple[int, metrics.Box]] = []
    for path in args.labels:
        labels.extend(annotations.read_labels(path))
    stats = annotations.dataset_stats(labels, grid_n=args.grid_n)
    for class_id in sorted(stats.class_counts):
        _emit(f"class.{class_id}.count={stats.class_counts[class_id]}")
    _emit(f"total={stats.total}")
    for name, hist in (("center", stats.center_hist), ("size", stats.size_hist)):
        for iy, ix in zip(*np.nonzero(hist)):
            _emit(f"{name}.{iy}.{ix}={hist[iy, ix]}")
    if args.heatmap:
        for path in annotations.write_stats_heatmaps(stats, args.heatmap):
            created.append(path)
            _emit(f"heatmap={path}")
    return 0


def _cmd_bench(args, created: list[Path]) -> int:
    if args.iters < 1:
        raise ValueError("iters must be >= 1")
    channel_list = [int(v) for v in args.channels.split(",") if v]
    if not channel_list:
        raise ValueError("no channel widths given")
    seed = _resolve_seed(args.seed)
    total = 0
    for channels in channel_list:
        params = fusion.init_params(channels, r_dem=args.r_dem, seed=seed)
        audited = int(fusion.params_to_vector(params).size)
        total += audited
        _emit(f"block.c{channels}.params={audited}")

        rng = np.random.default_rng(seed)
        fr = FeatureMap(rng.standard_normal((channels, args.hw, args.hw)).astype(np.float32))
        ft = FeatureMap(rng.standard_normal((channels, args.hw, args.hw)).astype(np.float32))
        times = []
        for _ in range(args.iters):
            start = time.perf_counter()
            fusion.fuse(fr, ft, params, fusion.Arrangement.PARALLEL)
            times.append(time.perf_counter() - start)
        times.sort()
        median = times[len(times) // 2]
        _note(
            f"# c={channels} fuse median_ms={median * 1e3:.3f} "
            f"min_ms={times[0] * 1e3:.3f} iters={args.iters}"
        )
    _emit(f"total.params={total}")
    _emit(f"total.params_m={total / 1e6:.6f}")
    _emit(f"reference.params_m={REFERENCE_PARAMS_M:.6f}")
    return 0


def _cmd_mosaic(args, created: list[Path]) -> int:
    if len(args.pair) != 4:
        raise ValueError(f"mosaic needs exactly 4 --pair entries, got {len(args.pair)}")
    tiles = []
    for rgb_path, ir_path, label_path in args.pair:
        tiles.append(
            augment.ImagePair(
                rgb=images.read_ppm(rgb_path),
                ir=images.read_pgm(ir_path),
                labels=tuple(annotations.read_labels(label_path)),
            )
        )
    cfg = augment.MosaicConfig(
        out_size=args.size, center_jitter=args.jitter, seed=_resolve_seed(args.seed)
    )
    result = augment.mosaic_pair(tiles, cfg)
    rgb_out = Path(f"{args.out}.ppm")
    ir_out = Path(f"{args.out}.pgm")
    labels_out = Path(f"{args.out}.txt")
    created.extend([rgb_out, ir_out, labels_out])
    images.write_ppm(rgb_out, result.rgb)
    images.write_pgm(ir_out, result.ir)
    lines = [annotations.write_label(box, class_id) for class_id, box in result.labels]
    labels_out.write_text("\n".join(lines) + ("\n" if lines else ""))
    _emit(f"out.rgb={rgb_out}")
    _emit(f"out.ir={ir_out}")
    _emit(f"out.labels={labels_out}")
    _emit(f"labels={len(result.labels)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmaff",
        description="Cross-modality attentive fusion toolkit: fuse feature-map "
        "pairs, verify gradients, evaluate detections, convert annotations, "
        "build aligned mosaics, and audit parameters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse an RGB/IR feature-map pair")
    p.add_argument("rgb", help="RGB feature map (FTEN, C,H,W)")
    p.add_argument("ir", help="IR feature map (FTEN, C,H,W)")
    p.add_argument("--out", required=True, help="output FTEN path")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--params", help="parameter manifest to load")
    src.add_argument("--seed", type=int, default=None, help="seed for fresh parameters")
    p.add_argument("--arrangement", choices=_ARRANGEMENT_NAMES, default="parallel")
    p.add_argument("--r-dem", type=int, default=16, help="differential bottleneck ratio")
    p.add_argument("--viz", help="prefix for attention-mask FTEN and PGM renders")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--hw", type=int, default=5, help="spatial side length")
    p.add_argument("--arrangement", choices=_ARRANGEMENT_NAMES + ["all"], default="all")
    p.add_argument("--seeds", type=int, default=5, help="check seeds 0..N-1")
    p.add_argument("--r-dem", type=int, default=16)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("gt", help="ground-truth file: image_id class_id xc yc w h")
    p.add_argument("det", help="detections file: image_id class_id score xc yc w h")
    p.add_argument("--classes", type=int, default=None, help="number of classes")
    p.add_argument("--threads", type=int, default=1, help="per-class worker threads")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("convert", help="convert rotated four-corner annotations")
    p.add_argument("input", help="file of x1 y1 x2 y2 x3 y3 x4 y4 class_id lines")
    p.add_argument("--out", required=True, help="output label file")
    p.add_argument("--image-size", type=int, default=1024)
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("stats", help="dataset statistics from label files")
    p.add_argument("labels", nargs="+", help="label files: class xc yc w h")
    p.add_argument("--grid-n", type=int, default=8)
    p.add_argument("--heatmap", help="prefix for PGM heatmap renders")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("bench", help="parameter audit and fuse timing")
    p.add_argument("--channels", default="128,256,512", help="comma-separated widths")
    p.add_argument("--hw", type=int, default=20)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--r-dem", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("mosaic", help="compose four aligned pairs into one")
    p.add_argument(
        "--pair",
        nargs=3,
        action="append",
        metavar=("RGB", "IR", "LABELS"),
        required=True,
        help="one tile: PPM image, PGM image, label file (give four times)",
    )
    p.add_argument("--out", required=True, help="output prefix (.ppm/.pgm/.txt)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=640, help="canvas side length")
    p.add_argument("--jitter", type=float, default=0.25, help="split-point jitter")
    p.set_defaults(func=_cmd_mosaic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    created: list[Path] = []
    try:
        return args.func(args, created)
    except (ValueError, OSError) as exc:
        for path in created:
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass
        _note(f"error: {exc}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
