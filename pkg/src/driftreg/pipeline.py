"""Registration methods on synthetic cases, pretraining and end-to-end fine-tuning.

Network inputs and CPD run on per-set normalised coordinates (zero mean,
unit RMS radius); displacements are mapped back to millimetres and carried
to landmark positions with a thin-plate spline.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cpd, graphnet, tps
from .evaluation import target_registration_error
from .pointcloud import center_align, farthest_point_sample, pairwise_sq_dists

log = logging.getLogger(__name__)

METHODS = ("initial", "center", "knn", "cpd", "feat-cpd")
TPS_REG = 1e-6


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    scale: float

    @classmethod
    def of(cls, points):
        mean = points.mean(axis=0)
        scale = float(np.sqrt(((points - mean) ** 2).sum(axis=1).mean()))
        return cls(mean, scale if scale > 0 else 1.0)

    def apply(self, points):
        return (points - self.mean) / self.scale

    def invert(self, points):
        return points * self.scale + self.mean


@dataclass
class Sample:
    """FPS subsets of a case in millimetres and in normalised coordinates."""

    fixed: np.ndarray
    moving: np.ndarray
    fixed_norm: Normalization
    moving_norm: Normalization

    @property
    def X(self):
        return self.fixed_norm.apply(self.fixed)

    @property
    def Y(self):
        return self.moving_norm.apply(self.moving)

    def to_mm_displacements(self, disp_norm):
        """Normalised-frame displacements of Y -> millimetre displacements of the moving sample."""
        return (self.Y + disp_norm) * self.fixed_norm.scale + self.fixed_norm.mean - self.moving


def sample_case(case, count, seed):
    n_f, n_m = len(case.fixed), len(case.moving)
    fi = farthest_point_sample(case.fixed, min(count, n_f), seed=seed)
    mi = farthest_point_sample(case.moving, min(count, n_m), seed=seed + 1)
    fixed, moving = case.fixed[fi], case.moving[mi]
    return Sample(fixed, moving, Normalization.of(fixed), Normalization.of(moving))


def nearest_indices(points, queries):
    return np.argmin(pairwise_sq_dists(queries, points), axis=1)


def training_case(case, sample):
    """Supervision pairs mapped onto the nearest sampled points, in network coordinates."""
    fi = nearest_indices(sample.fixed, case.supervision.fixed)
    mi = nearest_indices(sample.moving, case.supervision.moving)
    return graphnet.TrainingCase(sample.X, sample.Y, fi, mi)


def sample_displacements(sample, method, params, net=None, knn_k=20):
    """Millimetre displacements for every point of ``sample.moving``."""
    if method == "initial":
        return np.zeros_like(sample.moving)
    if method == "center":
        _, shift = center_align(sample.fixed, sample.moving)
        return np.broadcast_to(shift, sample.moving.shape).copy()
    if method == "cpd":
        return sample.to_mm_displacements(cpd.register(sample.X, sample.Y, params=params))
    if net is None:
        raise ValueError(f"method {method!r} needs network weights")
    df = graphnet.descriptor_forward(sample.X, net)
    dm = graphnet.descriptor_forward(sample.Y, net)
    if method == "knn":
        return cpd.knn_match(df, dm, sample.moving, sample.fixed, k=knn_k)
    if method == "feat-cpd":
        return sample.to_mm_displacements(cpd.register(sample.X, sample.Y, df, dm, params))
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def interpolate(sample, displacements, queries):
    model = tps.tps_fit(sample.moving, displacements, TPS_REG)
    return tps.tps_eval(model, queries)


def run_method(case, method, params, net=None, count=4096, seed=0, knn_k=20):
    """Displacements at the evaluation landmarks, plus the sample-level field."""
    sample = sample_case(case, count, seed)
    disp = sample_displacements(sample, method, params, net, knn_k)
    if method in ("initial", "center"):
        at_landmarks = np.broadcast_to(disp[0], case.eval_landmarks.moving.shape).copy()
    else:
        at_landmarks = ad.value_of(interpolate(sample, disp, case.eval_landmarks.moving))
    return at_landmarks, sample, disp


def evaluate_method(case, method, params, net=None, count=4096, seed=0, knn_k=20):
    at_landmarks, _, _ = run_method(case, method, params, net, count, seed, knn_k)
    return target_registration_error(case.eval_landmarks, at_landmarks)


# -- training -----------------------------------------------------------------

def pretrain(cases, init, cfg, count=4096, seed=0):
    samples = [sample_case(c, count, seed + i) for i, c in enumerate(cases)]
    tcases = [training_case(c, s) for c, s in zip(cases, samples)]
    return graphnet.train_triplet(tcases, init, cfg)


def unrolled_loss(sample, pairs, net, arrays, params):
    """Correspondence loss of TPS-warped moving landmarks after unrolled feature CPD."""
    df = graphnet.network_forward(sample.X, net, arrays)
    dm = graphnet.network_forward(sample.Y, net, arrays)
    disp_norm = cpd.register_unrolled(sample.X, sample.Y, df, dm, params)
    disp = sample.to_mm_displacements(disp_norm)
    warped = pairs.moving + interpolate(sample, disp, pairs.moving)
    return tps.correspondence_loss(pairs.fixed, warped)


@dataclass
class FinetuneConfig:
    steps: int = 50
    lr: float = 1e-4
    seed: int = 0
    count: int = 4096
    history: list = field(default_factory=list)


def finetune(cases, net, params, cfg):
    """End-to-end training: Adam on the correspondence loss through the unrolled CPD."""
    samples = [sample_case(c, cfg.count, cfg.seed + i) for i, c in enumerate(cases)]
    arrays = [a.copy() for a in net.arrays()]
    opt = graphnet.Adam(arrays, cfg.lr)
    for step in range(cfg.steps):
        i = step % len(cases)
        tape = [ad.variable(a) for a in arrays]
        loss = unrolled_loss(samples[i], cases[i].supervision, net, tape, params)
        grads = ad.grad(loss, tape)
        arrays = opt.step(arrays, grads)
        cfg.history.append(float(ad.value_of(loss)))
        log.debug("finetune step %d case %d loss %.4f", step, i, cfg.history[-1])
    return net.with_arrays(arrays)


def validation_loss(cases, net, params, count=4096, seed=1000, landmarks="eval"):
    vals = []
    for i, c in enumerate(cases):
        sample = sample_case(c, count, seed + i)
        pairs = c.eval_landmarks if landmarks == "eval" else c.supervision
        vals.append(float(ad.value_of(unrolled_loss(sample, pairs, net, None, params))))
    return float(np.mean(vals))
