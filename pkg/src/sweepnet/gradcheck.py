"""Finite-difference verification of every hand-written gradient.

Each check compares an analytic gradient with 64-bit central differences
and reports the worst relative error ``|a - n| / max(|a|, |n|, floor)``.
Backward functions are looked up through ``BACKWARD`` so a test can swap
one for a deliberately broken version (see ``mutated``) and confirm the
suite notices.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import network as N
from . import refine as RF
from . import tensor as T
from .geometry import Camera, DepthRange, inverse_depth_samples, look_at
from .synth import RigParams, make_scene
from .training import Sample, cross_entropy_loss, network_loss_and_grads

TOLERANCE = 1e-4
EPS = 1e-5
FLOOR = 1e-5

BACKWARD: dict[str, Callable] = {
    "conv2d": T.conv2d_backward,
    "activation": T.activation_backward,
    "gru_cell": N.gru_cell_backward,
    "variance_cost": N.variance_cost_backward,
    "smoothness": RF.smooth_gradient_map,
}


@contextlib.contextmanager
def mutated(op: str, wrap: Callable[[Callable], Callable]) -> Iterator[None]:
    """Temporarily replace ``BACKWARD[op]`` with ``wrap(original)``."""
    original = BACKWARD[op]
    BACKWARD[op] = wrap(original)
    try:
        yield
    finally:
        BACKWARD[op] = original


@dataclass
class CheckResult:
    op: str
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def ops(self) -> set[str]:
        return {r.op for r in self.results}

    def worst(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.op] = max(out.get(r.op, 0.0), r.max_rel_error)
        return out

    def to_csv(self) -> str:
        lines = ["op,check,max_rel_error,passed"]
        lines += [f"{r.op},{r.name},{r.max_rel_error:.3e},{int(r.passed)}" for r in self.results]
        return "\n".join(lines) + "\n"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS, entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``x`` (perturbed in place).

    With ``entries`` only those flat indices are evaluated; the rest are 0.
    """
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(x.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(x.shape)


# ---------------------------------------------------------------------------
# individual checks


def check_conv2d(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    for stride, (h, w) in ((1, (5, 6)), (2, (7, 6))):
        x = rng.normal(size=(h, w, 3))
        k = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        spec = T.ConvSpec.for_kernel(k, stride)
        y = T.conv2d_forward(x, k, b, spec)
        R = rng.normal(size=y.shape)

        def f():
            return float(np.sum(T.conv2d_forward(x, k, b, spec) * R))

        gx, gk, gb = BACKWARD["conv2d"](R, x, k, spec)
        out.append(CheckResult("conv2d", f"input_stride{stride}", rel_error(gx, numeric_grad(f, x))))
        out.append(CheckResult("conv2d", f"kernel_stride{stride}", rel_error(gk, numeric_grad(f, k))))
        out.append(CheckResult("conv2d", f"bias_stride{stride}", rel_error(gb, numeric_grad(f, b))))
    return out


def check_activation(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    for kind in T.ACTIVATIONS:
        x = rng.normal(size=(4, 5, 3))
        # keep relu away from its kink
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
        R = rng.normal(size=x.shape)
        y = T.activation(x, kind)

        def f():
            return float(np.sum(T.activation(x, kind) * R))

        out.append(CheckResult("activation", kind, rel_error(BACKWARD["activation"](R, y, kind), numeric_grad(f, x))))
    return out


def check_gru_cell(rng: np.random.Generator) -> list[CheckResult]:
    p = N.GruLayerParams.init(rng, 3, 2)
    for name in ("b_r", "b_u", "b_c"):
        setattr(p, name, rng.normal(scale=0.3, size=2))
    x = rng.normal(size=(5, 4, 3))
    h = rng.normal(size=(5, 4, 2))
    y, cache = N.gru_cell_forward(x, h, p)
    R = rng.normal(size=y.shape)

    def f():
        return float(np.sum(N.gru_cell(x, h, p) * R))

    grads: dict[str, np.ndarray] = {}
    dx, dh = BACKWARD["gru_cell"](R, p, cache, grads, "cell")
    out = [
        CheckResult("gru_cell", "input", rel_error(dx, numeric_grad(f, x))),
        CheckResult("gru_cell", "state", rel_error(dh, numeric_grad(f, h))),
    ]
    for name, value in p.named_parameters("cell"):
        out.append(CheckResult("gru_cell", name.split(".")[1], rel_error(grads[name], numeric_grad(f, value))))
    return out


def check_softmax_cross_entropy(rng: np.random.Generator) -> list[CheckResult]:
    logits = rng.normal(size=(6, 3, 4))
    gt = rng.integers(0, 6, size=(3, 4))
    gt[0, 0] = -1

    def f():
        return cross_entropy_loss(logits, gt).loss

    res = cross_entropy_loss(logits, gt)
    return [CheckResult("softmax_cross_entropy", "logits", rel_error(res.grad, numeric_grad(f, logits)))]


def check_variance_cost(rng: np.random.Generator) -> list[CheckResult]:
    warped = [rng.normal(size=(3, 4, 5)) for _ in range(3)]
    R = rng.normal(size=(3, 4, 5))

    def f():
        return float(np.sum(N.variance_cost(warped) * R))

    grads = BACKWARD["variance_cost"](R, warped)
    return [CheckResult("variance_cost", f"view{i}", rel_error(g, numeric_grad(f, v))) for i, (g, v) in enumerate(zip(grads, warped))]


def check_zncc(rng: np.random.Generator) -> list[CheckResult]:
    a = rng.normal(size=(5, 49))
    b = rng.normal(size=(5, 49))
    mask = rng.random((5, 49)) > 0.2
    out = []
    for label, m in (("full", None), ("masked", mask)):
        R = rng.normal(size=5)

        def f():
            return float(np.sum(RF.zncc_with_grad(a, b, m)[0] * R))

        _, g = RF.zncc_with_grad(a, b, m)
        out.append(CheckResult("zncc", label, rel_error(g * R[:, None], numeric_grad(f, b))))
    return out


def _frozen_photo_cost(term: RF.PhotoTerm, depth: np.ndarray, base: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """1 - ZNCC with every source sample interpolated in a fixed pixel cell."""
    X = term.ref.center + term.rays * depth[..., None, None]
    q, _ = term.src.project(X)
    img = term.src_gray
    u0, v0 = base[..., 0], base[..., 1]
    fu, fv = q[..., 0] - u0, q[..., 1] - v0
    h, w = img.shape
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    b = (1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u1] + (1 - fu) * fv * img[v1, u0] + fu * fv * img[v1, u1]
    rho, _ = RF.zncc_with_grad(term.ref_windows, np.where(mask, b, 0.0), mask)
    return 1.0 - rho


def photo_reference(term: RF.PhotoTerm, depth: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(analytic gradient, central difference, ok) with the bilinear cells frozen at ``depth``.

    Bilinear interpolation is only piecewise smooth; freezing the cell
    makes the difference quotient differentiate the same polynomial the
    analytic gradient describes.
    """
    _, grad, ok = term.evaluate(depth)
    X = term.ref.center + term.rays * depth[..., None, None]
    q, z = term.src.project(X)
    h, w = term.src_gray.shape
    base = np.stack([np.clip(np.floor(q[..., 0]), 0, w - 2), np.clip(np.floor(q[..., 1]), 0, h - 2)], axis=-1)
    base = np.nan_to_num(base).astype(np.int64)
    inside = (q[..., 0] >= 0) & (q[..., 0] <= w - 1) & (q[..., 1] >= 0) & (q[..., 1] <= h - 1) & (z > 0)
    mask = term.ref_valid & inside
    step = eps * depth
    fd = (_frozen_photo_cost(term, depth + step, base, mask) - _frozen_photo_cost(term, depth - step, base, mask)) / (2 * step)
    return grad, fd, ok


def _photo_fixture(rng: np.random.Generator):

    rec = make_scene(int(rng.integers(0, 2**31)), 0, 3, RigParams())
    gt = rec.renderings[1].depth
    img = rec.renderings[1].image
    centers = RF.depth_pixel_centers(gt.shape, img.shape[:2])
    terms = [RF.PhotoTerm(rec.cameras[1], rec.cameras[k], RF.to_gray(img), RF.to_gray(rec.renderings[k].image), centers, 7) for k in (0, 2)]
    depth = np.where(gt > 0, gt + rng.uniform(-2.0, 2.0, gt.shape), 1.0)
    return terms, depth


def check_photo(rng: np.random.Generator) -> list[CheckResult]:
    terms, depth = _photo_fixture(rng)
    out = []
    for k, term in enumerate(terms):
        grad, fd, ok = photo_reference(term, depth, 1e-7)
        out.append(CheckResult("photo", f"source{k}", rel_error(grad[ok], fd[ok], floor=1e-4)))
    return out


def check_smoothness(rng: np.random.Generator) -> list[CheckResult]:
    depth = rng.uniform(50.0, 60.0, size=(5, 6))
    intensity = rng.uniform(0.0, 8.0, size=(5, 6))
    wx, wy = RF.bilateral_weights(intensity, rng.random((5, 6)) > 0.1)

    def f():
        return RF.smooth_energy(depth, wx, wy)

    return [CheckResult("smoothness", "depth", rel_error(BACKWARD["smoothness"](depth, wx, wy), numeric_grad(f, depth)))]


def check_network(rng: np.random.Generator) -> list[CheckResult]:
    """End-to-end loss gradient on a tiny sample, a few entries per tensor."""
    size = 16
    K = np.array([[20.0, 0, 7.5], [0, 20.0, 7.5], [0, 0, 1]])
    cams = []
    for x in (0.0, 2.0):
        R, t = look_at(np.array([x, 0.0, -20.0]), np.array([0.0, 0.0, 0.0]))
        cams.append(Camera(K, R, t, size, size))
    images = [rng.uniform(0, 1, size=(size, size, 3)) for _ in cams]
    depths = inverse_depth_samples(DepthRange(15.0, 25.0, 4))
    gt = rng.uniform(15.0, 25.0, size=(size // 4, size // 4))
    sample = Sample(images, cams, gt, np.ones(gt.shape, dtype=bool), depths)
    out = []
    for mode in N.MODES:
        w = N.NetworkWeights.init(int(rng.integers(0, 2**31)), mode)
        params = w.named_parameters()
        for p in params.values():
            if not np.any(p):
                p += rng.normal(scale=0.1, size=p.shape)
        _, grads = network_loss_and_grads(w, sample)

        def f():
            return network_loss_and_grads(w, sample)[0]

        worst = 0.0
        for name, p in params.items():
            entries = rng.choice(p.size, size=min(2, p.size), replace=False)
            # small steps keep the feature ReLUs on one side of their kinks
            num = numeric_grad(f, p, eps=1e-6, entries=entries)
            worst = max(worst, rel_error(grads[name].reshape(-1)[entries], num.reshape(-1)[entries], floor=1e-4))
        out.append(CheckResult("network", mode, worst))
    return out


CHECKS: dict[str, Callable[[np.random.Generator], list[CheckResult]]] = {
    "conv2d": check_conv2d,
    "activation": check_activation,
    "gru_cell": check_gru_cell,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "variance_cost": check_variance_cost,
    "zncc": check_zncc,
    "photo": check_photo,
    "smoothness": check_smoothness,
    "network": check_network,
}

# every differentiable op with a hand-written backward
REGISTERED_OPS = tuple(CHECKS)


def gradcheck_suite(seed: int = 0, ops: tuple[str, ...] | None = None) -> GradcheckReport:
    """Run the finite-difference checks; ``report.passed`` is the verdict."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    start = time.perf_counter()
    for op in ops or REGISTERED_OPS:
        report.results.extend(CHECKS[op](rng))
    report.elapsed = time.perf_counter() - start
    return report
