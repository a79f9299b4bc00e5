"""Thin-plate-spline interpolation of displacement fields in 3D.

Uses the biharmonic kernel ``U(r) = r``. Values may be tape tensors; the
control geometry is always constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .pointcloud import as_points, pairwise_sq_dists


class DegenerateControls(ValueError):
    """Fewer than four controls, or all controls coplanar."""


@dataclass
class TPSModel:
    control: np.ndarray  # (M, 3)
    kernel_weights: object  # (M, 3) array or tensor
    affine: object  # (4, 3): constant row then linear rows
    reg: float = 0.0


def _kernel(a, b):
    return np.sqrt(pairwise_sq_dists(a, b))


def _affine_basis(points):
    return np.hstack([np.ones((len(points), 1)), points])


def tps_fit(control, values, reg=0.0):
    """Solve ``[[K + reg I, P], [P^T, 0]] [w; a] = [values; 0]`` for all three components."""
    control = as_points(control, "control points")
    M = len(control)
    if M < 4:
        raise DegenerateControls(f"TPS needs at least 4 control points, got {M}")
    P = _affine_basis(control)
    if np.linalg.matrix_rank(P) < 4:
        raise DegenerateControls("control points are coplanar")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    L = np.zeros((M + 4, M + 4))
    L[:M, :M] = _kernel(control, control) + reg * np.eye(M)
    L[:M, M:] = P
    L[M:, :M] = P.T
    if ad.value_of(values).shape != (M, 3):
        raise ValueError(f"values must have shape ({M}, 3)")
    rhs = ad.concat([values, np.zeros((4, 3))], axis=0)
    sol = ad.solve(L, rhs)
    return TPSModel(control, sol[:M], sol[M:], reg)


def tps_eval(model, queries):
    queries = as_points(queries, "queries")
    return _affine_basis(queries) @ model.affine + _kernel(queries, model.control) @ model.kernel_weights


def correspondence_loss(fixed_corr, warped_corr):
    """Mean squared Euclidean distance between index-aligned pairs (mm^2)."""
    n = len(ad.value_of(fixed_corr))
    if n == 0 or len(ad.value_of(warped_corr)) != n:
        raise ValueError("correspondence sets must be non-empty and of equal length")
    diff = warped_corr - fixed_corr
    return ad.mean((diff * diff).sum(axis=1))
