"""Classification loss, RMSProp and the toy-scale trainer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network as N
from . import tensor as T
from .geometry import Camera, DepthRange, inverse_depth_samples, select_source_views
from .network import NetworkWeights
from .synth import Dataset, SceneRecord, sparse_cloud

log = logging.getLogger(__name__)

CE_EPSILON = 1e-12


@dataclass
class TrainConfig:
    iterations: int = 500
    learning_rate: float = 0.001
    decay_factor: float = 0.9
    decay_every: int = 100
    rng_seed: int = 0
    width: int = 64
    height: int = 48
    depth_count: int = 16
    views: int = 3
    bidirectional_augmentation: bool = True
    mode: str = "gru"
    rho: float = 0.9
    epsilon: float = 1e-8
    smoothing: int = 25

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.views < 2:
            raise ValueError("training needs at least one source view")
        if self.mode not in N.MODES:
            raise ValueError(f"mode must be one of {N.MODES}")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind == "bool":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        return cls(**kwargs)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# loss


def one_hot_volume(gt_depth: np.ndarray, samples: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Index of the nearest sample in inverse depth per pixel; -1 where invalid.

    Exact midpoints go to the smaller index.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if valid is None:
        valid = gt_depth > 0
    inv_gt = np.where(valid, 1.0 / np.where(valid, gt_depth, 1.0), 0.0)
    dist = np.abs(inv_gt[None] - 1.0 / samples[:, None, None])
    index = np.argmin(dist, axis=0)
    return np.where(valid, index, -1)


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray  # d loss / d logits, shape D x H x W
    prob: np.ndarray
    clamped: int


def cross_entropy_loss(logits: np.ndarray, gt_index: np.ndarray) -> LossResult:
    """Mean over valid pixels of -log P(gt) with P = softmax over depth (axis 0).

    The gradient w.r.t. the logits is ``(P - onehot) / n_valid``.
    """
    prob = T.softmax(logits, axis=0)
    valid = gt_index >= 0
    n = int(valid.sum())
    grad = np.zeros_like(prob)
    if n == 0:
        return LossResult(0.0, grad, prob, 0)
    idx = np.where(valid, gt_index, 0)
    p_gt = np.take_along_axis(prob, idx[None], 0)[0][valid]
    clamped = int(np.sum(p_gt < CE_EPSILON))
    loss = float(-np.sum(np.log(np.maximum(p_gt, CE_EPSILON))) / n)
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, idx[None], 1.0, 0)
    grad = (prob - onehot) * valid[None] / n
    return LossResult(loss, grad, prob, clamped)


def cross_entropy_from_prob(prob: np.ndarray, gt_index: np.ndarray) -> float:
    valid = gt_index >= 0
    if not valid.any():
        return 0.0
    idx = np.where(valid, gt_index, 0)
    p_gt = np.take_along_axis(prob, idx[None], 0)[0][valid]
    return float(-np.sum(np.log(np.maximum(p_gt, CE_EPSILON))) / valid.sum())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    mean_square: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    rho: float = 0.9,
    eps: float = 1e-8,
) -> None:
    """In-place RMSProp update of every parameter that has a gradient."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.mean_square.get(name)
        if v is None:
            v = state.mean_square[name] = np.zeros_like(p)
        v *= rho
        v += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(v) + eps)
    state.step += 1


# ---------------------------------------------------------------------------
# forward/backward through the whole network


@dataclass
class Sample:
    images: list[np.ndarray]  # reference first
    cameras: list[Camera]
    gt_depth: np.ndarray
    valid: np.ndarray
    depths: np.ndarray


def network_loss_and_grads(
    w: NetworkWeights,
    sample: Sample,
    directions: Sequence[str] = ("forward", "backward"),
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the requested sweep directions and its gradient."""
    reg = w.regularizer
    grads: dict[str, np.ndarray] = {}
    feats, fcaches = [], []
    for img in sample.images:
        f, c = N.extract_features_forward(img, w.features)
        feats.append(f)
        fcaches.append(c)
    fcams = [N.scaled_camera(c) for c in sample.cameras]
    h, wd = feats[0].shape[:2]
    D = len(sample.depths)
    samplers, warped, costs = [], [], []
    for t in range(D):
        s = N.depth_samplers(fcams[0], fcams[1:], float(sample.depths[t]), h, wd)
        v = [feats[0]] + [sm.apply(f) for sm, f in zip(s, feats[1:])]
        samplers.append(s)
        warped.append(v)
        costs.append(N.variance_cost(v))
    gt = one_hot_volume(sample.gt_depth, sample.depths, sample.valid)
    dcosts = [np.zeros_like(c) for c in costs]
    scale = reg.logit_scale[0]
    total = 0.0
    weight = 1.0 / len(directions)
    for direction in directions:
        order = list(range(D)) if direction == "forward" else list(range(D - 1, -1, -1))
        state = N.initial_state(reg, h, wd)
        outs, caches = {}, {}
        for t in order:
            out, state, cache = N.regularize_step_forward(costs[t], state, reg)
            outs[t] = out[..., 0]
            caches[t] = cache
        logits = scale * np.stack([outs[t] for t in range(D)])
        res = cross_entropy_loss(logits, gt)
        total += weight * res.loss
        dlogits = weight * res.grad
        N._accumulate(grads, "reg.logit_scale", np.array([np.sum(dlogits * logits) / scale]))
        dstate = None
        for t in reversed(order):
            dout = (scale * dlogits[t])[..., None]
            dcost, dstate = N.regularize_step_backward(dout, dstate, reg, caches[t], grads)
            dcosts[t] += dcost
    dfeats = [np.zeros_like(f) for f in feats]
    for t in range(D):
        dv = N.variance_cost_backward(dcosts[t], warped[t])
        dfeats[0] += dv[0]
        for k, sm in enumerate(samplers[t]):
            dfeats[k + 1] += sm.adjoint(dv[k + 1], (dv[k + 1].shape[2],))
    for f, dfeat, cache in zip(feats, dfeats, fcaches):
        N.extract_features_backward(dfeat, w.features, cache, grads)
    return total, grads


def samples_from_record(record: SceneRecord, views: int, depth_count: int) -> list[Sample]:
    """One training sample per view, sources picked by view selection."""
    cloud = sparse_cloud(record)
    out = []
    r = record.spec.depth_range
    depths = inverse_depth_samples(DepthRange(r.d_min, r.d_max, depth_count))
    for ref in range(len(record.cameras)):
        srcs = select_source_views(ref, record.cameras, cloud, views - 1)
        ids = [ref, *srcs]
        rend = record.renderings[ref]
        out.append(
            Sample(
                [record.renderings[i].image for i in ids],
                [record.cameras[i] for i in ids],
                rend.depth,
                rend.valid,
                depths,
            )
        )
    return out


@dataclass
class TrainResult:
    weights: NetworkWeights
    losses: list[float]
    learning_rates: list[float]

    def smoothed(self, window: int) -> np.ndarray:
        x = np.asarray(self.losses)
        window = max(1, min(window, len(x)))
        return np.convolve(x, np.ones(window) / window, mode="valid")

    def write_curve(self, path: str | Path) -> None:
        lines = ["iteration,loss,learning_rate"]
        lines += [f"{i},{loss!r},{lr!r}" for i, (loss, lr) in enumerate(zip(self.losses, self.learning_rates))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class TrainingDiverged(RuntimeError):
    pass


def train_toy(dataset: Dataset, cfg: TrainConfig, weights: NetworkWeights | None = None) -> TrainResult:
    """RMSProp training on the dataset's training scenes, one sample per iteration."""
    records = dataset.train()
    if not records:
        raise ValueError("dataset has no training scenes")
    samples = [s for rec in records for s in samples_from_record(rec, cfg.views, cfg.depth_count)]
    w = weights if weights is not None else NetworkWeights.init(cfg.rng_seed, cfg.mode)
    params = w.named_parameters()
    state = OptimizerState()
    rng = np.random.default_rng([cfg.rng_seed, 1])
    directions = ("forward", "backward") if cfg.bidirectional_augmentation else ("forward",)
    losses, lrs = [], []
    order: list[int] = []
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(samples)))
        sample = samples[order.pop()]
        lr = cfg.learning_rate * cfg.decay_factor ** (it // cfg.decay_every)
        loss, grads = network_loss_and_grads(w, sample, directions)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        rmsprop_step(params, grads, state, lr, cfg.rho, cfg.epsilon)
        losses.append(loss)
        lrs.append(lr)
        if it % 50 == 0:
            log.info("iter %d loss %.4f lr %.2e", it, loss, lr)
    return TrainResult(w, losses, lrs)


def evaluate(weights: NetworkWeights, records: Sequence[SceneRecord], views: int, depth_count: int, ref_views: Sequence[int] | None = None) -> dict[str, float]:
    """Depth errors of WTA inference on the given scenes.

    Reports mean and median absolute depth error and the median error in
    units of the local inverse-depth sample spacing.
    """
    abs_err, sample_err = [], []
    for rec in records:
        samples = samples_from_record(rec, views, depth_count)
        chosen = ref_views if ref_views is not None else range(len(samples))
        for k in chosen:
            s = samples[k]
            res = N.infer_depth(s.images[0], s.images[1:], s.cameras, DepthRange(s.depths[0], s.depths[-1], len(s.depths)), weights)
            gt = s.gt_depth[s.valid]
            est = res.depth[s.valid]
            abs_err.append(np.abs(est - gt))
            spacing = (1.0 / s.depths[0] - 1.0 / s.depths[-1]) / (len(s.depths) - 1)
            sample_err.append(np.abs(1.0 / est - 1.0 / gt) / spacing)
    a = np.concatenate(abs_err)
    e = np.concatenate(sample_err)
    return {"mean_abs": float(a.mean()), "median_abs": float(np.median(a)), "median_samples": float(np.median(e)), "mean_samples": float(e.mean())}


def gradcheck_suite(seed: int = 0):
    """Finite-difference checks of every hand-written gradient (see ``sweepnet.gradcheck``)."""
    from .gradcheck import gradcheck_suite as run

    return run(seed)
