"""Regenerate the bundled 3-view fixture and toy weights.

Trains the recurrent regularizer on the seed-pinned synthetic dataset and
writes, under ``src/sweepnet/data``:

- ``toy_weights.bin``: the trained network,
- ``fixture/``: one validation view plus its two neighbours as PPM images,
  their camera files (with the depth range line) and the reference
  ground-truth depth map ``ref_gt.pfm``.

Usage: python3 scripts/make_fixture.py [--iterations 500]
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from sweepnet import io, synth, training
from sweepnet.geometry import DepthRange

DATA = Path(__file__).resolve().parents[1] / "src" / "sweepnet" / "data"
REF_VIEW = 2
SOURCE_VIEWS = (1, 3)
DEPTH_COUNT = 16


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--iterations", type=int, default=500)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    dataset = synth.make_dataset(0, 5, 5)
    result = training.train_toy(dataset, training.TrainConfig(iterations=args.iterations))
    DATA.mkdir(parents=True, exist_ok=True)
    io.save_network(DATA / "toy_weights.bin", result.weights)

    rec = dataset.val()[0]
    r = rec.spec.depth_range
    depth_range = DepthRange(r.d_min, r.d_max, DEPTH_COUNT)
    out = DATA / "fixture"
    (out / "cams").mkdir(parents=True, exist_ok=True)
    names = {REF_VIEW: "ref", SOURCE_VIEWS[0]: "src1", SOURCE_VIEWS[1]: "src2"}
    for view, name in names.items():
        io.write_ppm(out / f"{name}.ppm", io.to_uint8(rec.renderings[view].image))
        io.write_camera(out / "cams" / f"{name}_cam.txt", rec.cameras[view], depth_range)
    io.write_depth_pfm(out / "ref_gt.pfm", rec.renderings[REF_VIEW].depth)
    print("final smoothed loss", result.smoothed(25)[-1])


if __name__ == "__main__":
    main()
