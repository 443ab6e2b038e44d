"""Depth-map filtering and fusion into a colored point cloud.

Depth maps may be given at a lower resolution than the cameras; the
cameras are rescaled to match (pixel-center aligned, like the network's
feature maps).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BilinearSampler, Camera
from .io import FusedCloud, to_uint8


def photometric_filter(depth: np.ndarray, probability: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Keep valid pixels whose confidence is at least ``threshold``."""
    if depth.shape != probability.shape:
        raise ValueError(f"depth {depth.shape} and probability {probability.shape} differ")
    return (depth > 0) & (probability >= threshold)


def depth_camera(cam: Camera, depth_shape: tuple[int, int]) -> Camera:
    """``cam`` resampled to the resolution of a depth map."""
    factor = cam.width / depth_shape[1]
    if factor == 1.0:
        return cam
    return cam.scaled(factor)


def sample_depth(depth: np.ndarray, uv: np.ndarray, expected: np.ndarray) -> np.ndarray:
    """Read ``depth`` at ``uv``; 0 where no valid value is available.

    Bilinear where the four surrounding pixels are valid and agree within
    10%; otherwise the surrounding valid pixel closest to ``expected``, so
    values never blend across a discontinuity.
    """
    h, w = depth.shape
    sampler = BilinearSampler.from_coords(uv, h, w)
    flat = depth.reshape(-1)
    corners = np.stack([flat[sampler.index[k]] for k in range(4)]).reshape((4,) + sampler.out_shape)
    inside = sampler.valid
    good = corners > 0
    lo = np.where(good, corners, np.inf).min(axis=0)
    hi = np.where(good, corners, 0.0).max(axis=0)
    smooth = good.all(axis=0) & (hi <= 1.1 * lo)
    bilinear = sampler.apply(depth)
    gap = np.where(good, np.abs(corners - expected), np.inf)
    nearest = np.take_along_axis(corners, gap.argmin(axis=0)[None], axis=0)[0]
    nearest = np.where(good.any(axis=0), nearest, 0.0)
    return np.where(inside, np.where(smooth, bilinear, nearest), 0.0)


@dataclass
class PairCheck:
    """Cross-check of view ``a``'s depths against view ``b``."""

    consistent: np.ndarray  # (h_a, w_a) bool
    depth: np.ndarray  # b's estimate re-expressed as depth in a
    pixel: np.ndarray  # (h_a, w_a, 2) int, matched pixel in b (col, row)
    uv: np.ndarray  # (h_a, w_a, 2) float, continuous match in b


def check_pair(
    depth_a: np.ndarray, depth_b: np.ndarray, cam_a: Camera, cam_b: Camera, px_tol: float = 1.0, rel_depth_tol: float = 0.01
) -> PairCheck:
    """Project a's pixels into b, read b's depth, project back and compare.

    Cameras must already match the depth-map resolutions.
    """
    valid = depth_a > 0
    grid = cam_a.pixel_grid()
    d = np.where(valid, depth_a, 1.0)
    X = cam_a.backproject(grid, d)
    q, zb = cam_b.project(X)
    q = np.where((zb > 0)[..., None], q, np.nan)
    db = sample_depth(depth_b, q, zb)
    found = valid & (db > 0)
    Y = cam_b.backproject(np.nan_to_num(q), np.where(found, db, 1.0))
    p2, za = cam_a.project(Y)
    with np.errstate(invalid="ignore"):
        px_err = np.linalg.norm(p2 - grid, axis=-1)
        rel = np.abs(za - depth_a) / d
        consistent = found & (px_err < px_tol) & (rel < rel_depth_tol)
    hb, wb = depth_b.shape
    pix = np.stack([np.clip(np.rint(np.nan_to_num(q[..., 0])), 0, wb - 1), np.clip(np.rint(np.nan_to_num(q[..., 1])), 0, hb - 1)], axis=-1)
    return PairCheck(consistent, np.where(consistent, za, 0.0), pix.astype(np.int64), q)


def _check_inputs(depths: Sequence[np.ndarray], cameras: Sequence[Camera]) -> list[Camera]:
    if len(depths) != len(cameras):
        raise ValueError(f"{len(depths)} depth maps but {len(cameras)} cameras")
    return [depth_camera(c, d.shape) for c, d in zip(cameras, depths)]


def support_counts(
    depths: Sequence[np.ndarray], cameras: Sequence[Camera], px_tol: float = 1.0, rel_depth_tol: float = 0.01, masks: Sequence[np.ndarray] | None = None
) -> list[np.ndarray]:
    """Number of other views consistent with each pixel."""
    cams = _check_inputs(depths, cameras)
    use = [np.where(m, d, 0.0) for d, m in zip(depths, masks)] if masks is not None else list(depths)
    counts = []
    for a in range(len(use)):
        n = np.zeros(use[a].shape, dtype=np.int64)
        for b in range(len(use)):
            if b != a:
                n += check_pair(use[a], use[b], cams[a], cams[b], px_tol, rel_depth_tol).consistent
        counts.append(n)
    return counts


def geometric_filter(
    depths: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    min_views: int = 3,
    px_tol: float = 1.0,
    rel_depth_tol: float = 0.01,
    masks: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Keep pixels that are consistent with at least ``min_views - 1`` other views.

    Optional ``masks`` (e.g. from the photometric filter) remove pixels
    before cross-checking, both as candidates and as supporters.
    """
    if min_views < 1:
        raise ValueError("min_views must be >= 1")
    base = [d > 0 for d in depths] if masks is None else [(d > 0) & m for d, m in zip(depths, masks)]
    if min_views == 1:
        _check_inputs(depths, cameras)
        return base
    counts = support_counts(depths, cameras, px_tol, rel_depth_tol, base)
    return [m & (c >= min_views - 1) for m, c in zip(base, counts)]


def _colors_at(image: np.ndarray, cam: Camera, depth_cam: Camera, uv: np.ndarray) -> np.ndarray:
    """Image colors at depth-map coordinates ``uv``."""
    factor = cam.width / depth_cam.width
    img_uv = uv * factor + (factor - 1) / 2.0
    img_uv = np.clip(img_uv, 0, [image.shape[1] - 1, image.shape[0] - 1])
    return BilinearSampler.from_coords(img_uv, image.shape[0], image.shape[1]).apply(image)


def fuse(
    depths: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    min_views: int = 3,
    px_tol: float = 1.0,
    rel_depth_tol: float = 0.01,
) -> FusedCloud:
    """Merge filtered depth maps into one point per consistent support set.

    Views are visited in index order. Each kept, unclaimed pixel gathers
    the views that agree with it; the mean of its own depth and theirs
    (re-expressed along its ray) is back-projected, colors are averaged,
    and the matched pixels in the other views are claimed so they do not
    emit the same surface point again.
    """
    cams = _check_inputs(depths, cameras)
    if not (len(masks) == len(images) == len(depths)):
        raise ValueError("depths, masks and images must have the same length")
    n = len(depths)
    use = [np.where(m, d, 0.0) for d, m in zip(depths, masks)]
    claimed = [np.zeros(d.shape, dtype=bool) for d in depths]
    points, colors, support = [], [], []
    for a in range(n):
        alive = (use[a] > 0) & ~claimed[a]
        if not alive.any():
            continue
        grid = cams[a].pixel_grid()
        depth_sum = np.where(alive, use[a], 0.0)
        color_sum = np.where(alive[..., None], _colors_at(images[a], cameras[a], cams[a], grid), 0.0)
        count = alive.astype(np.int64)
        checks = {}
        for b in range(n):
            if b == a:
                continue
            chk = check_pair(use[a], use[b], cams[a], cams[b], px_tol, rel_depth_tol)
            ok = chk.consistent & alive
            checks[b] = (chk, ok)
            depth_sum += np.where(ok, chk.depth, 0.0)
            color_sum += np.where(ok[..., None], _colors_at(images[b], cameras[b], cams[b], np.nan_to_num(chk.uv)), 0.0)
            count += ok
        emit = alive & (count >= min_views)
        if not emit.any():
            continue
        for b, (chk, ok) in checks.items():
            sel = ok & emit
            claimed[b][chk.pixel[sel][:, 1], chk.pixel[sel][:, 0]] = True
        mean_depth = depth_sum[emit] / count[emit]
        points.append(cams[a].backproject(grid[emit], mean_depth))
        colors.append(color_sum[emit] / count[emit][:, None])
        support.append(count[emit])
    if not points:
        return FusedCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), np.zeros(0, dtype=np.int64))
    return FusedCloud(np.concatenate(points), to_uint8(np.concatenate(colors)), np.concatenate(support))
