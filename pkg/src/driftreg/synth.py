"""Synthetic registration cases with exact ground-truth correspondences.

A shape (the moving set) is warped by a smooth affine + Gaussian-RBF map,
perturbed with noise and partially replaced by outliers to form the fixed
set. Held-out evaluation landmarks play the role of annotated landmark
pairs; a disjoint supervision subset plays the role of training
correspondences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import LandmarkPairs, as_points, load_pointset, save_pointset

SHAPES = ("branching_tree", "grid", "sphere_shell")
DEFAULT_TRE_BAND = (20.0, 25.0)


@dataclass(frozen=True)
class DeformationSpec:
    centers: np.ndarray  # (J, 3)
    amplitudes: np.ndarray  # (J, 3) mm
    width: float
    affine: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("RBF width must be positive")
        if np.shape(self.centers) != np.shape(self.amplitudes):
            raise ValueError("centers and amplitudes must have matching shapes")

    def scaled(self, s):
        """Scale the displacement field ``p' - p`` by ``s``."""
        return DeformationSpec(self.centers, s * np.asarray(self.amplitudes), self.width,
                               np.eye(3) + s * (np.asarray(self.affine) - np.eye(3)),
                               s * np.asarray(self.translation))

    def to_dict(self):
        return {"centers": np.asarray(self.centers).tolist(),
                "amplitudes": np.asarray(self.amplitudes).tolist(), "width": self.width,
                "affine": np.asarray(self.affine).tolist(),
                "translation": np.asarray(self.translation).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centers"], dtype=np.float64), np.asarray(d["amplitudes"], dtype=np.float64),
                   float(d["width"]), np.asarray(d["affine"], dtype=np.float64),
                   np.asarray(d["translation"], dtype=np.float64))


def apply_deformation(points, spec):
    """``p' = A p + t + sum_j a_j exp(-|p - c_j|^2 / (2 width^2))``."""
    p = np.asarray(points, dtype=np.float64)
    out = p @ np.asarray(spec.affine).T + spec.translation
    centers = np.asarray(spec.centers, dtype=np.float64).reshape(-1, 3)
    if len(centers):
        d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        out = out + np.exp(-d2 / (2.0 * spec.width ** 2)) @ np.asarray(spec.amplitudes).reshape(-1, 3)
    return out


# -- shapes -------------------------------------------------------------------

def _rotate(v, axis, angle):
    # Rodrigues rotation of v about a unit axis
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * (axis @ v) * (1 - np.cos(angle)))


def _tree_segments(rng, depth=6):
    segments = []  # (start, end, radius)

    def grow(start, direction, length, radius, level):
        end = start + direction * length
        segments.append((start, end, radius))
        if level == depth:
            return
        # split plane normal: random vector orthogonal to the branch direction
        normal = np.cross(direction, rng.normal(size=3))
        normal /= np.linalg.norm(normal)
        spread = rng.uniform(0.45, 0.7)
        for sign in (-1.0, 1.0):
            child = _rotate(direction, normal, sign * spread)
            grow(end, child / np.linalg.norm(child), length * rng.uniform(0.7, 0.82),
                 radius * 0.78, level + 1)

    grow(np.array([0.0, 0.0, 100.0]), np.array([0.0, 0.0, -1.0]), 50.0, 4.0, 0)
    return segments


def gen_shape(kind, n, seed=0):
    """Deterministic synthetic shape of ``n`` points spanning roughly 200 mm."""
    if n < 16:
        raise ValueError("shapes need at least 16 points")
    rng = np.random.default_rng(seed)
    if kind == "grid":
        side = int(round(n ** (1.0 / 3.0)))
        if side ** 3 < n:
            side += 1
        axis = np.linspace(-100.0, 100.0, side)
        lattice = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        return lattice[:n].copy()
    if kind == "sphere_shell":
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = 100.0 + rng.uniform(-2.0, 2.0, size=n)
        return dirs * radii[:, None]
    if kind == "branching_tree":
        segments = _tree_segments(rng)
        lengths = np.array([np.linalg.norm(e - s) for s, e, _ in segments])
        seg = rng.choice(len(segments), size=n, p=lengths / lengths.sum())
        t = rng.uniform(size=n)
        starts = np.array([segments[i][0] for i in seg])
        ends = np.array([segments[i][1] for i in seg])
        radii = np.array([segments[i][2] for i in seg])
        pts = starts + t[:, None] * (ends - starts)
        return pts + rng.normal(size=(n, 3)) * radii[:, None] / 2.0
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPES}")


def random_deformation(points, seed, n_centers=8, width=45.0, amplitude=12.0,
                       affine_jitter=0.08, translation=10.0):
    """Seeded breathing-like deformation: anisotropic affine plus RBF bumps."""
    rng = np.random.default_rng(seed)
    lo, hi = points.min(axis=0), points.max(axis=0)
    centers = rng.uniform(lo, hi, size=(n_centers, 3))
    amplitudes = rng.normal(size=(n_centers, 3)) * amplitude
    affine = np.eye(3) + rng.uniform(-affine_jitter, affine_jitter, size=(3, 3))
    affine[2, 2] -= 0.1  # craniocaudal compression
    shift = rng.normal(size=3) * translation
    return DeformationSpec(centers, amplitudes, width, affine, shift)


# -- cases --------------------------------------------------------------------

@dataclass
class RegistrationCase:
    fixed: np.ndarray
    moving: np.ndarray
    supervision: LandmarkPairs
    eval_landmarks: LandmarkPairs
    ground_truth: np.ndarray  # moving index -> fixed index, -1 when unmatched
    fixed_outlier: np.ndarray  # bool per fixed point
    supervision_idx: np.ndarray  # moving indices
    eval_idx: np.ndarray  # moving indices
    meta: dict

    @property
    def initial_tre(self):
        return self.meta["initial_tre"]


def _draw_fixed(moving, spec, noise_sigma, outlier_frac, rng):
    n = len(moving)
    fixed = apply_deformation(moving, spec) + rng.normal(size=moving.shape) * noise_sigma
    n_out = int(round(outlier_frac * n))
    outliers = np.zeros(n, dtype=bool)
    if n_out:
        outliers[rng.choice(n, size=n_out, replace=False)] = True
        lo, hi = fixed.min(axis=0), fixed.max(axis=0)
        fixed[outliers] = rng.uniform(lo, hi, size=(n_out, 3))
    return fixed, outliers


def make_case(kind="branching_tree", n=512, deform_seed=0, noise_sigma=1.0, outlier_frac=0.0,
              supervision_count=128, eval_count=100, seed=0, tre_band=DEFAULT_TRE_BAND,
              deformation=None, shape_seed=None, deform_kw=None):
    """Build a case. ``seed`` drives noise, outliers, ordering and landmark
    selection; ``shape_seed`` (default ``seed``) the shape; ``deform_seed``
    the deformation. With ``tre_band`` set, the displacement field is scaled
    so that the mean initial evaluation TRE lands in the band."""
    if not 0 <= outlier_frac < 1:
        raise ValueError("outlier_frac must lie in [0, 1)")
    n_out = int(round(outlier_frac * n))
    if supervision_count + eval_count > n - n_out:
        raise ValueError("supervision_count + eval_count exceeds the number of matched points")
    if min(supervision_count, eval_count) < 1:
        raise ValueError("landmark counts must be positive")
    moving = gen_shape(kind, n, seed if shape_seed is None else shape_seed)
    if deformation is None:
        deformation = random_deformation(moving, deform_seed, **(deform_kw or {}))
        calibrate = tre_band is not None
    else:
        calibrate = False
    spec = deformation
    select_rng = np.random.default_rng([seed, 1])

    def build(s):
        rng = np.random.default_rng([seed, 0])
        fixed, outliers = _draw_fixed(moving, spec.scaled(s), noise_sigma, outlier_frac, rng)
        return fixed, outliers

    # landmark selection does not depend on the scale, so fix outliers first
    _, outliers = build(1.0)
    matched = np.flatnonzero(~outliers)
    chosen = select_rng.choice(matched, size=supervision_count + eval_count, replace=False)
    sup_idx, eval_idx = np.sort(chosen[:supervision_count]), np.sort(chosen[supervision_count:])

    def tre(s):
        fixed, _ = build(s)
        return float(np.linalg.norm(fixed[eval_idx] - moving[eval_idx], axis=1).mean())

    scale = 1.0
    if calibrate:
        target = 0.5 * (tre_band[0] + tre_band[1])
        lo, hi = 0.0, 1.0
        while tre(hi) < target:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if tre(mid) < target else (lo, mid)
        scale = 0.5 * (lo + hi)
    fixed, outliers = build(scale)

    order = np.random.default_rng([seed, 2]).permutation(n)  # fixed-set storage order
    fixed_stored = fixed[order]
    position = np.empty(n, dtype=np.int64)
    position[order] = np.arange(n)
    ground_truth = np.where(outliers, -1, position)
    initial = float(np.linalg.norm(fixed[eval_idx] - moving[eval_idx], axis=1).mean())
    meta = {
        "kind": kind, "n": n, "seed": seed, "shape_seed": seed if shape_seed is None else shape_seed,
        "deform_seed": deform_seed, "noise_sigma": noise_sigma, "outlier_frac": outlier_frac,
        "supervision_count": supervision_count, "eval_count": eval_count,
        "deformation_scale": scale, "deformation": spec.scaled(scale).to_dict(),
        "initial_tre": initial,
        "ground_truth": ground_truth.tolist(),
        "supervision_idx": sup_idx.tolist(), "eval_idx": eval_idx.tolist(),
    }
    return RegistrationCase(
        fixed=fixed_stored, moving=moving,
        supervision=LandmarkPairs(fixed[sup_idx], moving[sup_idx]),
        eval_landmarks=LandmarkPairs(fixed[eval_idx], moving[eval_idx]),
        ground_truth=ground_truth, fixed_outlier=outliers[order],
        supervision_idx=sup_idx, eval_idx=eval_idx, meta=meta)


def _save_pairs(pairs, path):
    rows = pairs.as_array()
    lines = ["fx,fy,fz,mx,my,mz"] + [",".join(repr(float(v)) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_pairs(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[1] != 6:
        raise ValueError(f"{path}: expected 6 columns, got {arr.shape[1]}")
    return LandmarkPairs(arr[:, :3], arr[:, 3:])


def save_case(case, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pointset(case.fixed, out / "fixed.csv")
    save_pointset(case.moving, out / "moving.csv")
    _save_pairs(case.supervision, out / "supervision.csv")
    _save_pairs(case.eval_landmarks, out / "eval.csv")
    (out / "meta.json").write_text(json.dumps(case.meta, indent=1))


def load_case(case_dir):
    d = Path(case_dir)
    meta = json.loads((d / "meta.json").read_text())
    fixed = as_points(load_pointset(d / "fixed.csv"))
    moving = as_points(load_pointset(d / "moving.csv"))
    gt = np.asarray(meta.get("ground_truth", [-1] * len(moving)), dtype=np.int64)
    outlier = np.ones(len(fixed), dtype=bool)
    outlier[gt[gt >= 0]] = False
    return RegistrationCase(
        fixed=fixed, moving=moving,
        supervision=_load_pairs(d / "supervision.csv"), eval_landmarks=_load_pairs(d / "eval.csv"),
        ground_truth=gt, fixed_outlier=outlier,
        supervision_idx=np.asarray(meta.get("supervision_idx", []), dtype=np.int64),
        eval_idx=np.asarray(meta.get("eval_idx", []), dtype=np.int64), meta=meta)
