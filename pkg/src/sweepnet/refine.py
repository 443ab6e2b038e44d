"""Variational depth refinement by multi-view photo-consistency.

The energy for a depth map ``D`` of the reference view is

    E(D) = photo_weight * sum_src sum_p (1 - ZNCC_src(p; D(p)))
         + smoothness_weight * sum_{edges p~q} w(p, q) * (D(p) - D(q))**2

where ZNCC compares the reference window around ``p`` with the source
window obtained by mapping each window pixel through the fronto-parallel
plane at depth ``D(p)``, and ``w(p, q) = exp(-(I(p) - I(q))**2 / 10)``
on 0..255 gray values. It is minimized by plain gradient descent with a
geometrically decaying step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BilinearSampler, Camera

VARIANCE_FLOOR = 1e-8


@dataclass
class RefineConfig:
    iterations: int = 20
    initial_step: float = 10.0
    step_decay: float = 0.9
    zncc_window: int = 7
    smoothness_weight: float = 0.01
    photo_weight: float = 1.0
    neighborhood: int = 4

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.zncc_window < 3 or self.zncc_window % 2 == 0:
            raise ValueError("zncc_window must be odd and >= 3")
        if self.neighborhood != 4:
            raise ValueError("only the 4-connected neighborhood is supported")


def to_gray(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=-1) if image.ndim == 3 else image


def zncc_with_grad(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """ZNCC over the last axis and its derivative w.r.t. ``b``.

    With a ``mask`` only the selected samples take part. Windows whose
    variance is below ``VARIANCE_FLOOR`` score 0 with zero gradient.
    """
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    m = mask.astype(np.float64)
    n = np.maximum(m.sum(axis=-1), 1.0)
    a0 = (a - np.sum(a * m, axis=-1, keepdims=True) / n[..., None]) * m
    b0 = (b - np.sum(b * m, axis=-1, keepdims=True) / n[..., None]) * m
    saa = np.sum(a0 * a0, axis=-1)
    sbb = np.sum(b0 * b0, axis=-1)
    sab = np.sum(a0 * b0, axis=-1)
    ok = (saa / n >= VARIANCE_FLOOR) & (sbb / n >= VARIANCE_FLOOR)
    denom = np.sqrt(np.where(ok, saa * sbb, 1.0))
    rho = np.where(ok, sab / denom, 0.0)
    safe_sbb = np.where(ok, sbb, 1.0)
    grad = (a0 / denom[..., None] - rho[..., None] * b0 / safe_sbb[..., None]) * ok[..., None]
    return rho, grad


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equal-size windows."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"window sizes differ: {a.size} vs {b.size}")
    return float(zncc_with_grad(a, b)[0])


def window_offsets(size: int) -> np.ndarray:
    r = size // 2
    dv, du = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    return np.stack([du.ravel(), dv.ravel()], axis=-1)


def depth_pixel_centers(depth_shape: tuple[int, int], image_shape: tuple[int, int]) -> np.ndarray:
    """Image coordinates of the depth-map pixel centers, (h, w, 2)."""
    h, w = depth_shape
    s = image_shape[1] / w
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([u * s + (s - 1) / 2.0, v * s + (s - 1) / 2.0], axis=-1)


class PhotoTerm:
    """Photo-consistency cost and depth derivative against one source view.

    ``centers`` are reference image coordinates (..., 2); the reference
    windows around them are sampled once and mapped to the source through
    the fronto-parallel plane at the center's depth. Only samples that land
    inside both images take part; a pair is usable when at least half the
    window does.
    """

    def __init__(self, ref: Camera, src: Camera, ref_gray: np.ndarray, src_gray: np.ndarray, centers: np.ndarray, window: int = 7):
        self.ref, self.src = ref, src
        self.src_gray = src_gray
        uv = centers[..., None, :] + window_offsets(window)
        ref_sampler = BilinearSampler.from_coords(uv, *ref_gray.shape)
        self.ref_windows = ref_sampler.apply(ref_gray)
        self.ref_valid = ref_sampler.valid
        self.rays = ref.rays(uv)
        # d(K (R X + t)) / d(sample depth)
        self.dh = self.rays @ src.R.T @ src.K.T

    def evaluate(self, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (cost, d cost / d depth, ok) per center.

        Pairs that are not ok (window mostly outside an image, behind the
        source camera, non-positive depth) get cost 1 and gradient 0.
        """
        depth = np.asarray(depth, dtype=np.float64)
        d = np.where(depth > 0, depth, 1.0)
        X = self.ref.center + self.rays * d[..., None, None]
        h = (X @ self.src.R.T + self.src.t) @ self.src.K.T
        z = h[..., 2]
        front = z > 1e-12
        zs = np.where(front, z, 1.0)
        q = h[..., :2] / zs[..., None]
        sampler = BilinearSampler.from_coords(np.where(front[..., None], q, np.nan), *self.src_gray.shape)
        b = sampler.apply(self.src_gray)
        gu, gv = sampler.gradient(self.src_gray)
        mask = self.ref_valid & sampler.valid & front
        ok = (2 * mask.sum(axis=-1) >= mask.shape[-1]) & (depth > 0)
        rho, drho_db = zncc_with_grad(self.ref_windows, np.where(mask, b, 0.0), mask)
        dq = (self.dh[..., :2] - q * self.dh[..., 2:3]) / zs[..., None]
        db_dd = np.where(mask, gu * dq[..., 0] + gv * dq[..., 1], 0.0)
        grad = -np.sum(drho_db * db_dd, axis=-1)
        cost = np.where(ok, 1.0 - rho, 1.0)
        return cost, np.where(ok, grad, 0.0), ok


def photo_gradient(
    p: tuple[float, float], d: float, ref: Camera, src: Camera, ref_image: np.ndarray, src_image: np.ndarray, window: int = 7
) -> float:
    """d(1 - ZNCC)/d depth at reference image point ``p = (u, v)``."""
    term = PhotoTerm(ref, src, to_gray(ref_image), to_gray(src_image), np.asarray([p], dtype=np.float64), window)
    _, grad, _ = term.evaluate(np.array([float(d)]))
    return float(grad[0])


def photo_cost(
    p: tuple[float, float], d: float, ref: Camera, src: Camera, ref_image: np.ndarray, src_image: np.ndarray, window: int = 7
) -> float:
    term = PhotoTerm(ref, src, to_gray(ref_image), to_gray(src_image), np.asarray([p], dtype=np.float64), window)
    cost, _, _ = term.evaluate(np.array([float(d)]))
    return float(cost[0])


def bilateral_weights(intensity: np.ndarray, valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Edge weights to the right and downward neighbours; intensity on 0..255."""
    wx = np.exp(-((intensity[:, 1:] - intensity[:, :-1]) ** 2) / 10.0)
    wy = np.exp(-((intensity[1:, :] - intensity[:-1, :]) ** 2) / 10.0)
    if valid is not None:
        wx = wx * (valid[:, 1:] & valid[:, :-1])
        wy = wy * (valid[1:, :] & valid[:-1, :])
    return wx, wy


def smooth_energy(depth: np.ndarray, wx: np.ndarray, wy: np.ndarray) -> float:
    return float(np.sum(wx * (depth[:, 1:] - depth[:, :-1]) ** 2) + np.sum(wy * (depth[1:, :] - depth[:-1, :]) ** 2))


def smooth_gradient_map(depth: np.ndarray, wx: np.ndarray, wy: np.ndarray) -> np.ndarray:
    """Sum over 4-neighbours of ``2 w (D(p) - D(q))``."""
    g = np.zeros_like(depth)
    ex = 2.0 * wx * (depth[:, :-1] - depth[:, 1:])
    ey = 2.0 * wy * (depth[:-1, :] - depth[1:, :])
    g[:, :-1] += ex
    g[:, 1:] -= ex
    g[:-1, :] += ey
    g[1:, :] -= ey
    return g


def reference_intensity(ref_image: np.ndarray, depth_shape: tuple[int, int]) -> np.ndarray:
    """0..255 gray of the reference image at the depth-pixel centers."""
    gray = to_gray(ref_image)
    centers = depth_pixel_centers(depth_shape, gray.shape)
    return 255.0 * BilinearSampler.from_coords(centers, *gray.shape).apply(gray)


def smooth_gradient(p: tuple[int, int], depth: np.ndarray, ref_image: np.ndarray) -> float:
    """Smoothness derivative at depth pixel ``p = (row, col)``."""
    wx, wy = bilateral_weights(reference_intensity(ref_image, depth.shape), depth > 0)
    return float(smooth_gradient_map(depth, wx, wy)[p])


class ReprojectionEnergy:
    """Total refinement energy and its gradient for a fixed set of views."""

    def __init__(self, ref_image: np.ndarray, src_images: Sequence[np.ndarray], cameras: Sequence[Camera], depth_shape: tuple[int, int], valid: np.ndarray, cfg: RefineConfig):
        ref_gray = to_gray(ref_image)
        centers = depth_pixel_centers(depth_shape, ref_gray.shape)
        self.terms = [PhotoTerm(cameras[0], cam, ref_gray, to_gray(img), centers, cfg.zncc_window) for img, cam in zip(src_images, cameras[1:])]
        self.valid = valid
        self.wx, self.wy = bilateral_weights(reference_intensity(ref_image, depth_shape), valid)
        self.cfg = cfg

    def __call__(self, depth: np.ndarray) -> tuple[float, np.ndarray]:
        cfg = self.cfg
        energy = 0.0
        grad = np.zeros_like(depth)
        if cfg.photo_weight:
            safe = np.where(self.valid, depth, 1.0)
            for term in self.terms:
                cost, g, _ = term.evaluate(safe)
                energy += cfg.photo_weight * float(np.sum(cost[self.valid]))
                grad += cfg.photo_weight * g
        if cfg.smoothness_weight:
            energy += cfg.smoothness_weight * smooth_energy(depth, self.wx, self.wy)
            grad += cfg.smoothness_weight * smooth_gradient_map(depth, self.wx, self.wy)
        return energy, np.where(self.valid, grad, 0.0)


def refine_depth_map(
    depth: np.ndarray,
    ref_image: np.ndarray,
    src_images: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    cfg: RefineConfig = RefineConfig(),
    energies: list[float] | None = None,
) -> np.ndarray:
    """Gradient descent on the reprojection energy; invalid pixels (<= 0) are left alone.

    ``cameras[0]`` is the reference at full image resolution. If
    ``energies`` is given, the energy before each step and after the last
    one is appended to it.
    """
    valid = depth > 0
    out = np.array(depth, dtype=np.float64)
    if cfg.iterations == 0:
        return out
    energy_fn = ReprojectionEnergy(ref_image, src_images, cameras, depth.shape, valid, cfg)
    step = cfg.initial_step
    for _ in range(cfg.iterations):
        e, g = energy_fn(out)
        if energies is not None:
            energies.append(e)
        out = np.where(valid, np.maximum(out - step * g, 1e-6), out)
        step *= cfg.step_decay
    if energies is not None:
        energies.append(energy_fn(out)[0])
    return out


def stair_pixel_count(depth: np.ndarray, samples: np.ndarray, valid: np.ndarray | None = None) -> int:
    """Valid pixels whose depth is exactly one of the sampled hypotheses."""
    if valid is None:
        valid = depth > 0
    return int(np.sum(np.isin(depth, samples) & valid))
