import numpy as np
import pytest

from sweepnet import network as N
from sweepnet import synth


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        gf[i] = (up - down) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return synth.make_scene(0, 0, 5, synth.RigParams())


@pytest.fixture(scope="session")
def toy_dataset():
    return synth.make_dataset(0, 5, 5)


@pytest.fixture(scope="session")
def gru_weights():
    return N.NetworkWeights.init(3, "gru")


def random_rotation(r):
    q, rr = np.linalg.qr(r.normal(size=(3, 3)))
    q = q * np.sign(np.diag(rr))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(r, width=64, height=48):
    from sweepnet.geometry import Camera

    f = r.uniform(40, 200)
    K = np.array([[f, 0, r.uniform(0.3, 0.7) * width], [0, f * r.uniform(0.9, 1.1), r.uniform(0.3, 0.7) * height], [0, 0, 1]])
    return Camera(K, random_rotation(r), r.normal(size=3) * 5, width, height)


def random_pair(r):
    """Reference camera and a nearby source camera."""
    from sweepnet.geometry import Camera

    ref = random_camera(r)
    # small perturbation of the reference pose
    axis = r.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = r.uniform(-0.2, 0.2)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    dR = np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
    R = dR @ ref.R
    c = ref.center + r.normal(size=3)
    src = Camera(ref.K.copy(), R, -R @ c, ref.width, ref.height)
    return ref, src


def covisible_masks(record, min_other=2):
    """Pixels whose surface point is seen, unoccluded, by ``min_other`` other views.

    Visibility is decided by ray casting the scene, independently of the
    fusion code; projections must land on each view's depth-map grid.
    """
    from sweepnet.synth import ray_depth

    cams = record.cameras
    out = []
    for a, rend in enumerate(record.renderings):
        fa = cams[a].scaled(4)
        d = rend.depth
        X = fa.backproject(fa.pixel_grid(), np.where(d > 0, d, 1.0))
        n = np.zeros(d.shape, dtype=int)
        for b, cam in enumerate(cams):
            if b == a:
                continue
            fb = cam.scaled(4)
            uv, z = fb.project(X)
            inside = (uv[..., 0] >= 0) & (uv[..., 0] <= fb.width - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= fb.height - 1)
            hit, _ = ray_depth(record.spec, cam, np.nan_to_num(uv) * 4 + 1.5)
            n += inside & (np.abs(hit - z) < 1e-6 * z)
        out.append((d > 0) & (n >= min_other))
    return out
