"""Command-line frontend: ``sweepnet <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Camera files are
looked up as ``<cams>/<image stem>_cam.txt``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fusion, geometry, io, network, refine, synth, training
from .gradcheck import gradcheck_suite

log = logging.getLogger("sweepnet")

IMAGE_SUFFIXES = (".ppm",)


class UsageError(Exception):
    pass


def job_count(requested: int) -> int:
    """Worker cap; ``SWEEPNET_THREADS`` wins over ``--jobs``."""
    env = os.environ.get("SWEEPNET_THREADS")
    if env:
        try:
            requested = int(env)
        except ValueError:
            raise UsageError(f"SWEEPNET_THREADS must be an integer, got {env!r}") from None
    return max(1, requested)


def camera_for(image_path: Path, cams_dir: Path, width: int, height: int) -> tuple[geometry.Camera, geometry.DepthRange | None]:
    path = cams_dir / f"{image_path.stem}_cam.txt"
    if not path.exists():
        raise FileNotFoundError(f"no camera file {path} for image {image_path}")
    return io.read_camera(path, width, height)


def write_csv(path: Path | None, header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    text = ",".join(header) + "\n" + "".join(",".join(str(v) for v in row) + "\n" for row in rows)
    if path is not None:
        path.write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# commands


def cmd_infer(args) -> int:
    if args.d is not None and args.auto_d:
        raise UsageError("--d and --auto-d are mutually exclusive")
    paths = [Path(args.ref), *map(Path, args.src)]
    images = [io.read_image(p) for p in paths]
    cams_dir = Path(args.cams)
    loaded = [camera_for(p, cams_dir, img.shape[1], img.shape[0]) for p, img in zip(paths, images)]
    cams = [c for c, _ in loaded]
    file_range = loaded[0][1]
    d_min = args.dmin if args.dmin is not None else (file_range.d_min if file_range else None)
    d_max = args.dmax if args.dmax is not None else (file_range.d_max if file_range else None)
    if d_min is None or d_max is None:
        raise UsageError("depth range unknown: pass --dmin/--dmax or use a camera file with a depth line")
    if args.auto_d:
        count = geometry.depth_sample_count(d_min, d_max, cams[0], args.pixel_scale)
    elif args.d is not None:
        count = args.d
    elif file_range is not None:
        count = file_range.count
    else:
        raise UsageError("sample count unknown: pass --d N or --auto-d")
    weights = io.load_network(args.weights)
    result = network.infer_depth(images[0], images[1:], cams, geometry.DepthRange(d_min, d_max, count), weights, args.direction)
    io.write_depth_pfm(args.out, result.depth)
    if args.prob:
        io.write_pfm(args.prob, result.probability)
    log.info("depth samples %d, wrote %s", count, args.out)
    return 0


def cmd_refine(args) -> int:
    paths = [Path(args.ref), *map(Path, args.src)]
    images = [io.read_image(p) for p in paths]
    cams_dir = Path(args.cams)
    cams = [camera_for(p, cams_dir, img.shape[1], img.shape[0])[0] for p, img in zip(paths, images)]
    depth = io.read_depth_pfm(args.depth)
    cfg = refine.RefineConfig(
        iterations=args.iters,
        initial_step=args.step,
        step_decay=args.decay,
        zncc_window=args.window,
        smoothness_weight=args.smoothness,
    )
    energies: list[float] = []
    out = refine.refine_depth_map(depth, images[0], images[1:], cams, cfg, energies)
    io.write_depth_pfm(args.out, out)
    if args.report:
        write_csv(Path(args.report), ["iteration", "energy"], list(enumerate(energies)))
    return 0


def _stems(directory: Path, suffix: str) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob(f"*{suffix}"))}


def cmd_fuse(args) -> int:
    depths_dir, cams_dir, images_dir = Path(args.depths), Path(args.cams), Path(args.images)
    depth_files = _stems(depths_dir, ".pfm")
    if not depth_files:
        raise FileNotFoundError(f"no .pfm depth maps in {depths_dir}")
    image_files = {}
    for suffix in IMAGE_SUFFIXES:
        image_files.update(_stems(images_dir, suffix))
    stems = sorted(depth_files)
    depths, probs, images, cams = [], [], [], []
    for stem in stems:
        if stem not in image_files:
            raise FileNotFoundError(f"no image for depth map {stem} in {images_dir}")
        img = io.read_image(image_files[stem])
        depth = io.read_depth_pfm(depth_files[stem])
        if args.probs:
            prob = io.read_pfm(Path(args.probs) / f"{stem}.pfm")
        else:
            prob = np.ones_like(depth)
        depths.append(depth)
        probs.append(prob)
        images.append(img)
        cams.append(camera_for(image_files[stem], cams_dir, img.shape[1], img.shape[0])[0])
    photo = [fusion.photometric_filter(d, p, args.prob_th) for d, p in zip(depths, probs)]
    geo = fusion.geometric_filter(depths, cams, args.min_views, args.px_tol, args.rel_tol, masks=photo)
    cloud = fusion.fuse(depths, geo, cams, images, args.min_views, args.px_tol, args.rel_tol)
    io.write_ply(args.out, cloud)
    rows = [(s, int((d > 0).sum()), int(p.sum()), int(g.sum())) for s, d, p, g in zip(stems, depths, photo, geo)]
    report = write_csv(Path(args.report) if args.report else None, ["view", "valid", "photometric_kept", "geometric_kept"], rows)
    if not args.report:
        sys.stdout.write(report)
    log.info("fused %d points", len(cloud))
    return 0


DATASET_KEYS = {"dataset": str, "dataset_seed": int, "scenes": int, "scene_views": int, "noise_sigma": float}


def load_train_config(path: Path) -> tuple[training.TrainConfig, dict]:
    values = training.parse_config_text(path.read_text(encoding="utf-8"))
    data = {k: DATASET_KEYS[k](values.pop(k)) for k in list(values) if k in DATASET_KEYS}
    return training.TrainConfig.from_mapping(values), data


def dataset_from_options(data: dict, cfg: training.TrainConfig, base: Path) -> synth.Dataset:
    if "dataset" in data:
        return synth.read_manifest(base / data["dataset"])
    params = synth.RigParams(width=cfg.width, height=cfg.height, count=cfg.depth_count)
    return synth.make_dataset(data.get("dataset_seed", 0), data.get("scenes", 5), data.get("scene_views", 5), params, data.get("noise_sigma", 0.0))


def cmd_train_toy(args) -> int:
    config_path = Path(args.config)
    cfg, data = load_train_config(config_path)
    dataset = dataset_from_options(data, cfg, config_path.parent)
    result = training.train_toy(dataset, cfg)
    io.save_network(args.out, result.weights)
    if args.curve:
        result.write_curve(args.curve)
    return 0


def _ablate_one(job) -> tuple:
    manifest, mode, cfg_values, views, depth_count = job
    dataset = synth.read_manifest(manifest)
    cfg = training.TrainConfig.from_mapping({**cfg_values, "mode": mode})
    result = training.train_toy(dataset, cfg)
    scores = training.evaluate(result.weights, dataset.val(), views, depth_count)
    smoothed = result.smoothed(cfg.smoothing)
    return (mode, scores["mean_abs"], scores["median_abs"], scores["median_samples"], float(smoothed[-1]))


def cmd_ablate(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = [m for m in modes if m not in network.MODES]
    if unknown or not modes:
        raise UsageError(f"--modes must be a comma list of {','.join(network.MODES)}")
    values = training.parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.iterations is not None:
        values["iterations"] = str(args.iterations)
    values.pop("mode", None)
    cfg = training.TrainConfig.from_mapping({**values, "mode": modes[0]})
    jobs = [(str(Path(args.dataset)), m, values, cfg.views, cfg.depth_count) for m in modes]
    workers = min(job_count(args.jobs), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        rows = [_ablate_one(j) for j in jobs]
    rows = [(m, repr(a), repr(b), repr(c), repr(d)) for m, a, b, c, d in rows]
    write_csv(Path(args.out), ["mode", "mean_abs_error", "median_abs_error", "median_sample_error", "final_smoothed_loss"], rows)
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(args.seed)
    text = report.to_csv()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    log.info("gradcheck %s in %.1fs", "passed" if report.passed else "FAILED", report.elapsed)
    return 0 if report.passed else 1


def cmd_synth(args) -> int:
    out = Path(args.out)
    params = synth.RigParams(width=args.width, height=args.height)
    dataset = synth.make_dataset(args.seed, args.scenes, args.views, params, args.noise)
    for sub in ("images", "depths"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    synth.write_manifest(dataset, out / "manifest.txt")
    for rec in dataset.scenes:
        for k, rend in enumerate(rec.renderings):
            stem = f"scene{rec.scene_id:03d}_view{k:02d}"
            io.write_ppm(out / "images" / f"{stem}.ppm", io.to_uint8(rend.image))
            io.write_depth_pfm(out / "depths" / f"{stem}.pfm", rend.depth)
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _sample_count(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 depth samples, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _unit_float(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sweepnet", description="Recurrent plane-sweep multi-view stereo.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="estimate a depth map for one reference view")
    p.add_argument("--ref", required=True)
    p.add_argument("--src", required=True, nargs="+")
    p.add_argument("--cams", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--dmin", type=_positive_float)
    p.add_argument("--dmax", type=_positive_float)
    p.add_argument("--d", type=_sample_count, help="number of depth samples")
    p.add_argument("--auto-d", action="store_true", help="derive the sample count from the reference camera")
    p.add_argument("--pixel-scale", type=_positive_float, default=1.0)
    p.add_argument("--direction", choices=("forward", "backward"), default="forward")
    p.add_argument("--out", required=True)
    p.add_argument("--prob")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("refine", help="refine a depth map by photo-consistency")
    p.add_argument("--depth", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", required=True, nargs="+")
    p.add_argument("--cams", required=True)
    p.add_argument("--iters", type=_nonneg_int, default=20)
    p.add_argument("--step", type=_positive_float, default=10.0, help="initial step (depth units squared)")
    p.add_argument("--decay", type=_positive_float, default=0.9)
    p.add_argument("--window", type=_positive_int, default=7)
    p.add_argument("--smoothness", type=float, default=refine.RefineConfig.smoothness_weight)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="CSV of the energy per iteration")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("fuse", help="filter depth maps and fuse them into a PLY cloud")
    p.add_argument("--depths", required=True)
    p.add_argument("--probs")
    p.add_argument("--cams", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--prob-th", type=_unit_float, default=0.3)
    p.add_argument("--min-views", type=_positive_int, default=3)
    p.add_argument("--px-tol", type=_positive_float, default=1.0)
    p.add_argument("--rel-tol", type=_positive_float, default=0.01)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="CSV of per-view filter counts (default: stdout)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train-toy", help="train on a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate", help="train and score several regularizers")
    p.add_argument("--dataset", required=True, help="dataset manifest")
    p.add_argument("--modes", default=",".join(network.MODES))
    p.add_argument("--config")
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=_positive_int, default=5)
    p.add_argument("--views", type=_positive_int, default=5)
    p.add_argument("--width", type=_positive_int, default=64)
    p.add_argument("--height", type=_positive_int, default=48)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sweepnet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, training.TrainingDiverged) as exc:
        print(f"sweepnet: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
