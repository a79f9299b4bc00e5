"""Non-rigid coherent point drift with learned-descriptor priors.

The moving points ``Y`` (M x 3) are Gaussian mixture centroids displaced by
``G W`` and fitted to the fixed points ``X`` (N x 3) by EM.

Descriptors can enter the E-step in two ways. ``feature_mode="joint"`` (the
default) weights every Gaussian component by the descriptor affinity before
the posterior is normalised, i.e. a mixture over position and descriptor
jointly; ``rho`` sets how sharply descriptors discriminate. The
``"additive"`` mode adds ``alpha * C_feat`` to the normalised spatial
posterior without renormalising. With many points the additive term swamps
the spatial posterior (each row of ``C_feat`` carries mass of order
``N exp(-2 / rho^2)`` even for perfect descriptors), so it is kept for
comparison only.

All EM arithmetic goes through :mod:`driftreg.autodiff`, so the same code
runs on plain arrays in :func:`register` and on the gradient tape in
:func:`register_unrolled`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .pointcloud import as_points

ZERO_ROW_INVERSE = 1e12
FEATURE_MODES = ("joint", "additive")


@dataclass(frozen=True)
class CPDParams:
    """CPD settings. In joint mode ``alpha > 0`` only switches descriptors on; ``rho`` sets their strength."""

    alpha: float = 0.05
    rho: float = 0.5
    w: float = 0.1
    lam: float = 5.0
    beta: float = 1.0
    iterations: int = 250
    sigma2_floor: float = 1e-6
    feature_mode: str = "joint"

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        if not 0 <= self.w < 1:
            raise ValueError("w must lie in [0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("rho", "lam", "beta", "sigma2_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def relaxed(self, rho=0.25, beta=0.5, iterations=15):
        """Settings used for end-to-end fine-tuning."""
        return replace(self, rho=rho, beta=beta, iterations=iterations)


@dataclass
class DeformationState:
    G: np.ndarray
    W: np.ndarray
    sigma2: float
    Y: np.ndarray

    @property
    def T(self):
        return self.Y + self.G @ self.W

    @property
    def displacements(self):
        return self.G @ self.W


def sq_dists(A, B):
    """``|a_i - b_j|^2`` via the Gram expansion, clamped at zero. Tape-aware."""
    sa = (A * A).sum(axis=1)
    sb = (B * B).sum(axis=1)
    d2 = ad.reshape(sa, (-1, 1)) + ad.reshape(sb, (1, -1)) - 2.0 * (A @ ad.transpose(B))
    return ad.maximum(d2, 0.0)


def gaussian_kernel(Y, beta):
    if beta <= 0:
        raise ValueError("beta must be positive")
    Y = np.asarray(Y, dtype=np.float64)
    d2 = ((Y[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * beta * beta))


def spatial_posterior(X, T, sigma2, w, log_prior=None):
    """Posterior ``C_pos[m, n]`` of centroid m generating fixed point n.

    ``log_prior`` (M x N) is added to the component log-densities before
    normalisation; the joint descriptor mode passes ``log C_feat`` here.
    Each column is evaluated relative to its largest log-term (component or
    outlier), so no exponential overflows or underflows to a zero denominator.
    """
    if not 0 <= w < 1:
        raise ValueError("w must lie in [0, 1)")
    if not ad.value_of(sigma2) > 0:
        raise ValueError("sigma2 must be positive")
    M, N = len(ad.value_of(T)), len(ad.value_of(X))
    expo = -sq_dists(T, X) / (2.0 * sigma2)
    if log_prior is not None:
        expo = expo + log_prior
    shift = ad.value_of(expo).max(axis=0, keepdims=True)
    if w == 0:
        num = ad.exp(expo - shift)
        return num / num.sum(axis=0, keepdims=True)
    log_outlier = 1.5 * ad.log(2.0 * math.pi * sigma2) + math.log(w) - math.log1p(-w) + math.log(M / N)
    shift = np.maximum(shift, ad.value_of(log_outlier))
    num = ad.exp(expo - shift)
    return num / (num.sum(axis=0, keepdims=True) + ad.exp(log_outlier - shift))


def feature_log_affinity(df, dm, rho):
    """``log C_feat[m, n] = -|df_n - dm_m|^2 / (2 rho^2)``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if ad.value_of(df).shape[1] != ad.value_of(dm).shape[1]:
        raise ValueError("descriptor dimensions differ")
    return -sq_dists(dm, df) / (2.0 * rho * rho)


def feature_affinity(df, dm, rho):
    """``C_feat[m, n] = exp(-|df_n - dm_m|^2 / (2 rho^2))``."""
    return ad.exp(feature_log_affinity(df, dm, rho))


def combine_priors(c_pos, c_feat, alpha):
    if ad.value_of(c_pos).shape != ad.value_of(c_feat).shape:
        raise ValueError("correspondence matrices differ in shape")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return c_pos
    return c_pos + alpha * c_feat


def m_step(X, Y, G, C, lam, sigma2, sigma2_floor=1e-6):
    """Solve ``(G + lam sigma2 diag(d)^-1) W = diag(d)^-1 C X - Y`` and update
    the variance. Rows with zero mass use ``1e12`` in place of ``1/d``.

    Returns ``(W, sigma2_new)``.
    """
    if not np.all(np.isfinite(ad.value_of(C))):
        raise ValueError("non-finite correspondence matrix")
    M = len(Y)
    d = C.sum(axis=1)
    dinv = ad.reciprocal_clamped(d, big=ZERO_ROW_INVERSE)
    CX = C @ X
    A = G + (lam * sigma2) * (np.eye(M) * ad.reshape(dinv, (1, -1)))
    rhs = CX * ad.reshape(dinv, (-1, 1)) - Y
    W = ad.solve(A, rhs, symmetric=True)
    T = Y + G @ W
    col = C.sum(axis=0)
    num = (col * (X * X).sum(axis=1)).sum() - 2.0 * (CX * T).sum() + (d * (T * T).sum(axis=1)).sum()
    sigma2_new = ad.maximum(num / (3.0 * C.sum()), sigma2_floor)
    return W, sigma2_new


def initial_sigma2(X, Y):
    """``sum |x_n - y_m|^2 / (3 M N)`` in closed form."""
    X, Y = np.asarray(X), np.asarray(Y)
    M, N = len(Y), len(X)
    total = N * (Y * Y).sum() + M * (X * X).sum() - 2.0 * Y.sum(axis=0) @ X.sum(axis=0)
    return float(total / (3.0 * M * N))


def _feature_term(df, dm, params):
    # descriptors are static during EM, so this is computed once per run
    if df is None or params.alpha == 0:
        return None
    log_feat = feature_log_affinity(df, dm, params.rho)
    return log_feat if params.feature_mode == "joint" else ad.exp(log_feat)


def _em(X, Y, G, W, sigma2, feat, params, iterations):
    joint = feat is not None and params.feature_mode == "joint"
    for _ in range(iterations):
        T = Y + G @ W
        C = spatial_posterior(X, T, sigma2, params.w, feat if joint else None)
        if feat is not None and not joint:
            C = combine_priors(C, feat, params.alpha)
        W, sigma2 = m_step(X, Y, G, C, params.lam, sigma2, params.sigma2_floor)
    return W, sigma2


def _check_descriptors(X, Y, df, dm):
    if (df is None) != (dm is None):
        raise ValueError("pass both descriptor sets or neither")
    if df is not None:
        if len(ad.value_of(df)) != len(X) or len(ad.value_of(dm)) != len(Y):
            raise ValueError("descriptor row counts must match the point sets")


def register_state(fixed, moving, df=None, dm=None, params=CPDParams(), state=None):
    """Run ``params.iterations`` EM cycles; resumes from ``state`` if given."""
    X = as_points(fixed, "fixed")
    Y = as_points(moving, "moving")
    _check_descriptors(X, Y, df, dm)
    if state is None:
        G = gaussian_kernel(Y, params.beta)
        W = np.zeros_like(Y)
        sigma2 = initial_sigma2(X, Y)
    else:
        G, W, sigma2 = state.G, state.W, state.sigma2
    feat = _feature_term(df, dm, params)
    W, sigma2 = _em(X, Y, G, W, sigma2, feat, params, params.iterations)
    return DeformationState(G, W, float(sigma2), Y)


def register(fixed, moving, df=None, dm=None, params=CPDParams()):
    """Displacements ``G W`` (M x 3) that carry the moving points onto the fixed set."""
    return register_state(fixed, moving, df, dm, params).displacements


def register_unrolled(fixed, moving, df, dm, params, max_iterations=50):
    """EM unrolled on the gradient tape; returns the displacements as a tensor
    when any descriptor input is tracked (a plain array otherwise)."""
    if params.iterations > max_iterations:
        raise ValueError(f"unrolled registration limited to {max_iterations} iterations")
    X = as_points(fixed, "fixed")
    Y = as_points(moving, "moving")
    _check_descriptors(X, Y, df, dm)
    G = gaussian_kernel(Y, params.beta)
    feat = _feature_term(df, dm, params)
    W, _ = _em(X, Y, G, np.zeros_like(Y), initial_sigma2(X, Y), feat, params, params.iterations)
    return G @ W


def objective(X, Y, state, w, lam):
    """Penalised negative log-likelihood of the mixture; EM does not increase it."""
    T = state.T
    M, N = len(Y), len(X)
    s2 = state.sigma2
    expo = -sq_dists(T, X) / (2.0 * s2)
    shift = expo.max(axis=0)
    comp = (1.0 - w) / M * (2.0 * math.pi * s2) ** -1.5
    lik = np.log(comp * np.exp(expo - shift).sum(axis=0) + w / N * np.exp(-shift)) + shift
    reg = 0.5 * lam * np.trace(state.W.T @ state.G @ state.W)
    return float(-lik.sum() + reg)


def knn_match(df, dm, moving, fixed, k=20):
    """Unregularised baseline: each moving point goes to the mean of the k
    fixed points with the closest descriptors (lowest index wins ties)."""
    from .pointcloud import _smallest_k, pairwise_sq_dists

    fixed = as_points(fixed, "fixed")
    moving = as_points(moving, "moving")
    if k < 1 or k > len(fixed):
        raise ValueError(f"k must be in [1, {len(fixed)}]")
    d2 = pairwise_sq_dists(dm, df)
    nbrs = _smallest_k(d2, k)
    return fixed[nbrs].mean(axis=1) - moving
