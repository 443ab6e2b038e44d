"""Pinhole cameras, plane-sweep homographies, warping and depth sampling.

Pixel coordinates put integer values at pixel centers: column ``u`` and
row ``v`` of an image sample the point ``(u, v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class Camera:
    """Intrinsics ``K`` and world-to-camera pose ``x_cam = R x_world + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) != 0.0 or K[2, 2] != 1.0:
            raise ValueError("K must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("K must have a positive diagonal")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a rotation matrix")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def principal_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.R[2]

    @property
    def P(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resampled by ``1/factor`` (pixel-center aligned).

        A pixel of the downsampled grid at index ``j`` covers the original
        pixels ``factor*j .. factor*(j+1)-1``.
        """
        S = np.array([[1.0 / factor, 0.0, 0.5 / factor - 0.5], [0.0, 1.0 / factor, 0.5 / factor - 0.5], [0.0, 0.0, 1.0]])
        return Camera(S @ self.K, self.R, self.t, int(round(self.width / factor)), int(round(self.height / factor)))

    def project(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (..., 3) to pixels (..., 2) and camera depths (...)."""
        Xc = X @ self.R.T + self.t
        z = Xc[..., 2]
        uvw = Xc @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = uvw[..., :2] / uvw[..., 2:3]
        return uv, z

    def rays(self, uv: np.ndarray) -> np.ndarray:
        """World-frame directions whose camera depth component is 1."""
        uv = np.asarray(uv, dtype=np.float64)
        hom = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        cam = hom @ np.linalg.inv(self.K).T
        return cam @ self.R

    def backproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World points at camera depth ``depth`` along the pixel rays."""
        return self.center + self.rays(uv) * np.asarray(depth, dtype=np.float64)[..., None]

    def pixel_grid(self) -> np.ndarray:
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class DepthRange:
    d_min: float
    d_max: float
    count: int

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.count < 2:
            raise ValueError(f"depth sample count must be >= 2, got {self.count}")

    @property
    def inverse_spacing(self) -> float:
        return (1.0 / self.d_min - 1.0 / self.d_max) / (self.count - 1)


@dataclass
class SparseCloud:
    points: np.ndarray
    visibility: list[list[int]] = field(default_factory=list)

    def validate(self, n_cameras: int) -> None:
        if len(self.visibility) != len(self.points):
            raise ValueError("one visibility list per point is required")
        for i, vis in enumerate(self.visibility):
            for c in vis:
                if not 0 <= c < n_cameras:
                    raise ValueError(f"point {i} references camera {c}, only {n_cameras} exist")


def plane_sweep_homography(ref: Camera, src: Camera, depth: float) -> np.ndarray:
    """Homography taking reference pixels to source pixels via the plane at ``depth``.

    The plane is fronto-parallel to the reference camera.
    """
    if depth <= 0:
        raise ValueError("plane depth must be positive")
    try:
        K_ref_inv = np.linalg.inv(ref.K)
    except np.linalg.LinAlgError as exc:
        raise ValueError("reference intrinsics are not invertible") from exc
    n = ref.principal_axis
    c_ref, c_src = ref.center, src.center
    # X = c_ref + R_ref^T K_ref^-1 p * depth for points on the plane n.(X - c_ref) = depth
    M = np.eye(3) - np.outer(c_src - c_ref, n) / depth
    return src.K @ src.R @ M @ ref.R.T @ K_ref_inv


def apply_homography(H: np.ndarray, uv: np.ndarray) -> np.ndarray:
    hom = uv @ H[:, :2].T + H[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return hom[..., :2] / hom[..., 2:3]


@dataclass
class BilinearSampler:
    """Precomputed bilinear gather for a fixed set of sample coordinates.

    ``apply`` reads a map at the coordinates; ``adjoint`` scatters a
    gradient back onto the map. Out-of-bounds samples read zero.
    """

    shape: tuple[int, int]
    index: np.ndarray  # (4, n) flat indices
    weight: np.ndarray  # (4, n)
    valid: np.ndarray  # (n,)
    out_shape: tuple[int, ...]

    @classmethod
    def from_coords(cls, uv: np.ndarray, height: int, width: int) -> "BilinearSampler":
        out_shape = uv.shape[:-1]
        u = uv[..., 0].reshape(-1)
        v = uv[..., 1].reshape(-1)
        finite = np.isfinite(u) & np.isfinite(v)
        valid = finite & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
        u = np.where(valid, u, 0.0)
        v = np.where(valid, v, 0.0)
        u0 = np.clip(np.floor(u), 0, max(width - 2, 0)).astype(np.int64)
        v0 = np.clip(np.floor(v), 0, max(height - 2, 0)).astype(np.int64)
        u1 = np.minimum(u0 + 1, width - 1)
        v1 = np.minimum(v0 + 1, height - 1)
        fu = u - u0
        fv = v - v0
        index = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1])
        weight = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]) * valid
        return cls((height, width), index, weight, valid.reshape(out_shape), out_shape)

    def apply(self, image: Tensor) -> Tensor:
        h, w = self.shape
        flat = image.reshape(h * w, -1)
        out = sum(self.weight[k][:, None] * flat[self.index[k]] for k in range(4))
        return out.reshape(self.out_shape + image.shape[2:])

    def adjoint(self, grad: Tensor, channels_shape: tuple[int, ...] = ()) -> Tensor:
        h, w = self.shape
        g = grad.reshape(-1, int(np.prod(channels_shape, dtype=np.int64)) if channels_shape else 1)
        out = np.zeros((h * w, g.shape[1]), dtype=grad.dtype)
        for k in range(4):
            np.add.at(out, self.index[k], self.weight[k][:, None] * g)
        return out.reshape((h, w) + tuple(channels_shape))

    def gradient(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Derivatives of the bilinear interpolant w.r.t. u and v at the samples."""
        h, w = self.shape
        flat = image.reshape(h * w, -1)
        # weights as a function of (fu, fv): recover fu, fv from the stored weights
        f00, f01, f10, f11 = (flat[self.index[k]] for k in range(4))
        wsum = self.weight.sum(axis=0)
        fv = np.where(wsum > 0, self.weight[2] + self.weight[3], 0.0)[:, None]
        fu = np.where(wsum > 0, self.weight[1] + self.weight[3], 0.0)[:, None]
        valid = self.valid.reshape(-1)[:, None]
        du = ((1 - fv) * (f01 - f00) + fv * (f11 - f10)) * valid
        dv = ((1 - fu) * (f10 - f00) + fu * (f11 - f01)) * valid
        shape = self.out_shape + image.shape[2:]
        return du.reshape(shape), dv.reshape(shape)


def warp_map(src: Tensor, H: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Bilinearly resample ``src`` at ``H``-mapped pixel coordinates.

    Returns the warped map (zero where the sample leaves ``src``) and the
    validity mask.
    """
    h, w = src.shape[:2]
    grid = np.stack(np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)), axis=-1)
    sampler = BilinearSampler.from_coords(apply_homography(H, grid), h, w)
    return sampler.apply(src), sampler.valid


def inverse_depth_samples(depth_range: DepthRange) -> np.ndarray:
    """D depths equally spaced in inverse depth, from d_min up to d_max."""
    D = depth_range.count
    inv_min, inv_max = 1.0 / depth_range.d_min, 1.0 / depth_range.d_max
    t = np.arange(D, dtype=np.float64)
    inv = inv_min + t / (D - 1) * (inv_max - inv_min)
    depths = 1.0 / inv
    depths[0] = depth_range.d_min
    depths[-1] = depth_range.d_max
    return depths


def depth_sample_count(d_min: float, d_max: float, ref: Camera, pixel_scale: float = 1.0) -> int:
    """Sample count that matches depth resolution to image resolution at d_min.

    ``pixel_scale`` is the neighbour offset in pixels (4 measures at the
    quarter-resolution network output).
    """
    if not (0 < d_min < d_max):
        raise ValueError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    c = np.array([ref.width / 2.0, ref.height / 2.0])
    X1 = ref.backproject(c, d_min)
    X2 = ref.backproject(c + np.array([pixel_scale, 0.0]), d_min)
    rho = float(np.linalg.norm(X2 - X1))
    D = (1.0 / d_min - 1.0 / d_max) / (1.0 / d_min - 1.0 / (d_min + rho))
    return max(2, math.ceil(D))


@dataclass(frozen=True)
class ViewScoreParams:
    theta0: float = 5.0
    sigma1: float = 1.0
    sigma2: float = 10.0


def piecewise_gaussian(theta_deg: np.ndarray, params: ViewScoreParams = ViewScoreParams()) -> np.ndarray:
    theta = np.asarray(theta_deg, dtype=np.float64)
    sigma = np.where(theta <= params.theta0, params.sigma1, params.sigma2)
    return np.exp(-((theta - params.theta0) ** 2) / (2.0 * sigma**2))


def baseline_angle(point: np.ndarray, c_a: np.ndarray, c_b: np.ndarray) -> np.ndarray:
    """Angle in degrees at ``point`` between the rays to two camera centers."""
    a = c_a - point
    b = c_b - point
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def view_pair_score(i: int, j: int, cameras: Sequence[Camera], cloud: SparseCloud, params: ViewScoreParams = ViewScoreParams()) -> float:
    c_i, c_j = cameras[i].center, cameras[j].center
    score = 0.0
    for X, vis in zip(cloud.points, cloud.visibility):
        if i in vis and j in vis:
            score += float(piecewise_gaussian(baseline_angle(np.asarray(X), c_i, c_j), params))
    return score


def select_source_views(
    ref_index: int,
    cameras: Sequence[Camera],
    cloud: SparseCloud,
    count: int,
    params: ViewScoreParams = ViewScoreParams(),
) -> list[int]:
    """Indices of the ``count`` best-scoring partners of the reference view.

    Ties go to the lower camera index.
    """
    if count < 1:
        raise ValueError("at least one source view must be requested")
    if len(cloud.points) == 0:
        raise ValueError("sparse cloud is empty")
    cloud.validate(len(cameras))
    others = [j for j in range(len(cameras)) if j != ref_index]
    if len(others) < count:
        raise ValueError(f"requested {count} source views but only {len(others)} other cameras exist")
    scored = [(-view_pair_score(ref_index, j, cameras, cloud, params), j) for j in others]
    scored.sort()
    return [j for _, j in scored[:count]]


def look_at(center: np.ndarray, target: np.ndarray, up: np.ndarray = np.array([0.0, -1.0, 0.0])) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation of a camera at ``center`` looking at ``target``.

    Camera axes: x right, y down, z forward. ``up`` is the world direction
    that should appear upward in the image.
    """
    z = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ np.asarray(center, dtype=np.float64)
