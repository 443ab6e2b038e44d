"""Ray-cast renderer for textured planar scenes.

Ground truth for every desk-scale test: images, quarter-resolution depth
maps and cameras, all reproducible from a seed or a text manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, DepthRange, SparseCloud, look_at
from .io import read_camera, write_camera
from .network import FEATURE_STRIDE

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Texture:
    """Band-limited noise: sums of cosines with bounded spatial frequency.

    Two noise fields are mixed per color channel and squashed into (0, 1).
    """

    seed: int
    max_frequency: float  # cycles per world unit
    components: int = 16
    contrast: float = 0.45

    def _waves(self):
        rng = np.random.default_rng(self.seed)
        waves = []
        for _ in range(2):
            theta = rng.uniform(0.0, 2.0 * np.pi, self.components)
            freq = rng.uniform(0.25, 1.0, self.components) * self.max_frequency
            phase = rng.uniform(0.0, 2.0 * np.pi, self.components)
            amp = rng.uniform(0.5, 1.0, self.components)
            amp *= np.sqrt(2.0 / np.sum(amp**2))
            k = 2.0 * np.pi * freq[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
            waves.append((k, phase, amp))
        mix = rng.uniform(-1.0, 1.0, (3, 2))
        mix[:, 0] = np.abs(mix[:, 0]) + 0.5
        return waves, mix

    def __call__(self, ab: np.ndarray) -> np.ndarray:
        """Colors (..., 3) at in-plane coordinates (..., 2)."""
        waves, mix = self._waves()
        fields = []
        for k, phase, amp in waves:
            fields.append(np.cos(ab @ k.T + phase) @ amp)
        s = np.stack(fields, axis=-1) @ mix.T
        return 0.5 + self.contrast * np.tanh(0.5 * s)


@dataclass(frozen=True)
class PlanarPatch:
    """Rectangle ``origin + a*axis_u + b*axis_v`` with ``|a|<=half_u``, ``|b|<=half_v``."""

    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    texture_seed: int

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)

    def intersect(self, center: np.ndarray, rays: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray parameter of the hit (inf on miss) and in-plane coordinates."""
        n = self.normal
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - center) @ n) / denom
        X = center + rays * t[..., None]
        rel = X - self.origin
        a = rel @ self.axis_u
        b = rel @ self.axis_v
        hit = np.isfinite(t) & (t > 0) & (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        return np.where(hit, t, np.inf), np.stack([a, b], axis=-1)


@dataclass
class SceneSpec:
    patches: list[PlanarPatch]
    depth_range: DepthRange
    max_frequency: float
    background: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def texture(self, k: int) -> Texture:
        return Texture(self.patches[k].texture_seed, self.max_frequency)


@dataclass
class Rendering:
    image: np.ndarray  # H x W x 3 in [0, 1] (plus optional noise)
    depth: np.ndarray  # H/4 x W/4, 0 where invalid
    valid: np.ndarray  # H/4 x W/4 bool


def ray_depth(scene: SceneSpec, cam: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Camera depth of the nearest surface along pixel rays, and the patch index (-1 on miss)."""
    rays = cam.rays(uv)
    best = np.full(uv.shape[:-1], np.inf)
    owner = np.full(uv.shape[:-1], -1, dtype=np.int64)
    for k, patch in enumerate(scene.patches):
        t, _ = patch.intersect(cam.center, rays)
        closer = t < best
        best = np.where(closer, t, best)
        owner = np.where(closer, k, owner)
    return best, owner


def shade(scene: SceneSpec, cam: Camera, uv: np.ndarray) -> np.ndarray:
    rays = cam.rays(uv)
    depth, owner = ray_depth(scene, cam, uv)
    color = np.full(uv.shape[:-1] + (3,), float(scene.background))
    for k, patch in enumerate(scene.patches):
        sel = owner == k
        if not np.any(sel):
            continue
        X = cam.center + rays[sel] * depth[sel][:, None]
        rel = X - patch.origin
        ab = np.stack([rel @ patch.axis_u, rel @ patch.axis_v], axis=-1)
        color[sel] = scene.texture(k)(ab)
    return color


def render(scene: SceneSpec, cam: Camera, view_seed: int = 0) -> Rendering:
    """Ray-cast the scene; depth is sampled at feature-pixel centers."""
    image = shade(scene, cam, cam.pixel_grid())
    if scene.noise_sigma > 0:
        rng = np.random.default_rng([scene.noise_seed, view_seed])
        image = image + rng.normal(0.0, scene.noise_sigma, image.shape)
    fcam = cam.scaled(FEATURE_STRIDE)
    uv = fcam.pixel_grid() * FEATURE_STRIDE + (FEATURE_STRIDE - 1) / 2.0
    depth, owner = ray_depth(scene, cam, uv)
    valid = owner >= 0
    return Rendering(image, np.where(valid, depth, 0.0), valid)


# ---------------------------------------------------------------------------
# scene and rig generation


@dataclass(frozen=True)
class RigParams:
    width: int = 64
    height: int = 48
    focal: float = 80.0
    distance: float = 100.0
    arc_step_deg: float = 16.0
    d_min: float = 60.0
    d_max: float = 160.0
    count: int = 16


def make_rig(params: RigParams, views: int, rng: np.random.Generator) -> list[Camera]:
    """Cameras on a horizontal arc around the origin, looking at it.

    The middle view sits on the -z axis.
    """
    K = np.array([[params.focal, 0.0, (params.width - 1) / 2.0], [0.0, params.focal, (params.height - 1) / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    jitter = rng.uniform(-0.05, 0.05, (views, 2)) * params.distance
    for k in range(views):
        phi = np.radians((k - (views - 1) / 2.0) * params.arc_step_deg)
        center = params.distance * np.array([np.sin(phi), 0.0, -np.cos(phi)])
        center[1] += jitter[k, 0] * 0.2
        target = np.array([0.0, jitter[k, 1] * 0.1, 0.0])
        R, t = look_at(center, target)
        cams.append(Camera(K, R, t, params.width, params.height))
    return cams


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _patch(rng, origin, normal_tilt_deg, half_u, half_v) -> PlanarPatch:
    tilt_axis = np.array([np.cos(a := rng.uniform(0, 2 * np.pi)), np.sin(a), 0.0])
    Rt = _rotation(tilt_axis, np.radians(normal_tilt_deg))
    spin = _rotation(np.array([0.0, 0.0, 1.0]), rng.uniform(0, 2 * np.pi))
    axes = Rt @ spin
    # normal of the untilted patch is -z (towards the cameras)
    u, v = axes[:, 0], -axes[:, 1]
    return PlanarPatch(np.asarray(origin, float), u, v, float(half_u), float(half_v), int(rng.integers(0, 2**31)))


def random_scene(rng: np.random.Generator, params: RigParams, noise_sigma: float = 0.0) -> SceneSpec:
    r = params.distance
    patches = [
        _patch(rng, [0.0, 0.0, rng.uniform(0.0, 0.25) * r], rng.uniform(0, 25), 3 * r, 3 * r),
    ]
    for _ in range(int(rng.integers(1, 3))):
        origin = [rng.uniform(-0.2, 0.2) * r, rng.uniform(-0.12, 0.12) * r, -rng.uniform(0.1, 0.25) * r]
        patches.append(_patch(rng, origin, rng.uniform(0, 20), rng.uniform(0.1, 0.2) * r, rng.uniform(0.08, 0.15) * r))
    # image-space frequency grows with depth: bound it at the far end of the range
    max_freq = 0.2 * params.focal / params.d_max
    return SceneSpec(patches, DepthRange(params.d_min, params.d_max, params.count), max_freq, 0.0, noise_sigma, int(rng.integers(0, 2**31)))


@dataclass
class SceneRecord:
    scene_id: int
    spec: SceneSpec
    cameras: list[Camera]
    renderings: list[Rendering] = field(default_factory=list)


@dataclass
class Dataset:
    scenes: list[SceneRecord]
    train_ids: list[int]
    val_ids: list[int]
    params: RigParams
    seed: int

    def train(self) -> list[SceneRecord]:
        return [s for s in self.scenes if s.scene_id in self.train_ids]

    def val(self) -> list[SceneRecord]:
        return [s for s in self.scenes if s.scene_id in self.val_ids]


def _scene_fits(spec: SceneSpec, cams: list[Camera], renders: list[Rendering]) -> bool:
    r = spec.depth_range
    for cam, rend in zip(cams, renders):
        d = rend.depth[rend.valid]
        if d.size == 0 or d.min() < r.d_min or d.max() > r.d_max:
            return False
        if rend.valid.mean() < 0.98:
            return False
        full, owner = ray_depth(spec, cam, cam.pixel_grid())
        if np.any(owner < 0) or full.min() < r.d_min or full.max() > r.d_max:
            return False
        for p in spec.patches:
            if np.dot(p.normal, cam.center - p.origin) <= 0:
                return False
    return True


def make_scene(seed: int, scene_id: int, views: int, params: RigParams, noise_sigma: float = 0.0) -> SceneRecord:
    rng = np.random.default_rng([seed, scene_id])
    for _ in range(100):
        cams = make_rig(params, views, rng)
        spec = random_scene(rng, params, noise_sigma)
        renders = [render(spec, cam, k) for k, cam in enumerate(cams)]
        if _scene_fits(spec, cams, renders):
            return SceneRecord(scene_id, spec, cams, renders)
    raise RuntimeError(f"could not draw a scene inside the depth range for seed {seed}, scene {scene_id}")


def split_ids(n_scenes: int) -> tuple[list[int], list[int]]:
    n_val = max(1, round(0.2 * n_scenes)) if n_scenes > 1 else 0
    ids = list(range(n_scenes))
    return ids[: n_scenes - n_val], ids[n_scenes - n_val :]


def make_dataset(
    seed: int = 0,
    n_scenes: int = 5,
    views_per_scene: int = 5,
    params: RigParams = RigParams(),
    noise_sigma: float = 0.0,
) -> Dataset:
    """Reproducible scenes with camera arcs; the last 20% of scene ids are validation."""
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    scenes = [make_scene(seed, k, views_per_scene, params, noise_sigma) for k in range(n_scenes)]
    train, val = split_ids(n_scenes)
    return Dataset(scenes, train, val, params, seed)


def sparse_cloud(record: SceneRecord, stride: int = 2) -> SparseCloud:
    """Surface points sampled from each view's ground truth, with ray-cast visibility."""
    points, vis = [], []
    for a, (cam, rend) in enumerate(zip(record.cameras, record.renderings)):
        fcam = cam.scaled(FEATURE_STRIDE)
        grid = fcam.pixel_grid()[::stride, ::stride]
        valid = rend.valid[::stride, ::stride]
        X = fcam.backproject(grid[valid], rend.depth[::stride, ::stride][valid])
        seen = [[a] for _ in range(len(X))]
        for b, other in enumerate(record.cameras):
            if b == a:
                continue
            uv, z = other.project(X)
            inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= other.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= other.height - 1)
            d, _ = ray_depth(record.spec, other, uv)
            ok = inside & (np.abs(d - z) <= 1e-6 * z)
            for i in np.flatnonzero(ok):
                seen[i].append(b)
        points.extend(X)
        vis.extend(sorted(s) for s in seen)
    return SparseCloud(np.array(points), vis)


# ---------------------------------------------------------------------------
# manifest


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def write_manifest(dataset: Dataset, path: str | Path, camera_dir: str = "cams") -> None:
    """Text manifest that fully determines the dataset.

    Camera files are written next to it under ``camera_dir``.
    """
    path = Path(path)
    root = path.parent
    p = dataset.params
    lines = [
        f"sweepnet-manifest {MANIFEST_VERSION}",
        f"seed {dataset.seed}",
        f"rig {p.width} {p.height} {p.focal!r} {p.distance!r} {p.arc_step_deg!r} {p.d_min!r} {p.d_max!r} {p.count}",
        "train " + " ".join(map(str, dataset.train_ids)),
        "val " + " ".join(map(str, dataset.val_ids)),
        f"scenes {len(dataset.scenes)}",
    ]
    for rec in dataset.scenes:
        s = rec.spec
        r = s.depth_range
        lines.append(
            f"scene {rec.scene_id} patches {len(s.patches)} views {len(rec.cameras)} "
            f"range {r.d_min!r} {r.d_max!r} {r.count} freq {s.max_frequency!r} "
            f"background {s.background!r} noise {s.noise_sigma!r} {s.noise_seed}"
        )
        for patch in s.patches:
            lines.append(
                f"patch {_fmt(patch.origin)} {_fmt(patch.axis_u)} {_fmt(patch.axis_v)} "
                f"{patch.half_u!r} {patch.half_v!r} {patch.texture_seed}"
            )
        for k, cam in enumerate(rec.cameras):
            rel = f"{camera_dir}/scene{rec.scene_id:03d}_view{k:02d}_cam.txt"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            write_camera(root / rel, cam, r)
            lines.append(f"camera {rel}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Dataset:
    """Rebuild a dataset (re-rendering every view) from a manifest."""
    path = Path(path)
    lines = [ln.split() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0][0] != "sweepnet-manifest":
        raise ValueError(f"{path}: not a sweepnet manifest")
    if lines[0][1:] != [str(MANIFEST_VERSION)]:
        raise ValueError(f"{path}: unsupported manifest version {' '.join(lines[0][1:])}")
    try:
        return _parse_manifest(iter(lines[1:]), path.parent)
    except (StopIteration, IndexError) as exc:
        raise ValueError(f"{path}: manifest is truncated") from exc


def _parse_manifest(it, root: Path) -> Dataset:
    seed = int(next(it)[1])
    rig = next(it)
    params = RigParams(int(rig[1]), int(rig[2]), float(rig[3]), float(rig[4]), float(rig[5]), float(rig[6]), float(rig[7]), int(rig[8]))
    train_ids = [int(x) for x in next(it)[1:]]
    val_ids = [int(x) for x in next(it)[1:]]
    n = int(next(it)[1])
    scenes = []
    for _ in range(n):
        hdr = next(it)
        scene_id, n_patches, n_views = int(hdr[1]), int(hdr[3]), int(hdr[5])
        depth_range = DepthRange(float(hdr[7]), float(hdr[8]), int(hdr[9]))
        freq, background = float(hdr[11]), float(hdr[13])
        noise, noise_seed = float(hdr[15]), int(hdr[16])
        patches = []
        for _ in range(n_patches):
            f = next(it)
            vals = [float(x) for x in f[1:12]]
            patches.append(PlanarPatch(np.array(vals[0:3]), np.array(vals[3:6]), np.array(vals[6:9]), vals[9], vals[10], int(f[12])))
        spec = SceneSpec(patches, depth_range, freq, background, noise, noise_seed)
        cams = [read_camera(root / next(it)[1])[0] for _ in range(n_views)]
        renders = [render(spec, cam, k) for k, cam in enumerate(cams)]
        scenes.append(SceneRecord(scene_id, spec, cams, renders))
    return Dataset(scenes, train_ids, val_ids, params, seed)
