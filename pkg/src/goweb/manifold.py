"""Poincare ball primitives: distance, its gradient, metric rescaling and RSGD.

All functions accept single points of shape ``(d,)`` or stacks of shape
``(..., d)``; the last axis is always the coordinate axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BALL_EPS = 1e-5
_DENOM_FLOOR = 1e-12
_COINCIDENT_TOL = 1e-9


class BallInvariantError(ValueError):
    """A point lies on or outside the unit sphere."""


class CoincidentPointsError(ValueError):
    """Distance gradient requested at (numerically) coincident points."""


@dataclass(frozen=True)
class ManifoldConfig:
    dim: int = 64
    eps_ball: float = BALL_EPS
    lr_rsgd: float = 0.3

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if not 0.0 < self.eps_ball < 0.01:
            raise ValueError(f"eps_ball must lie in (0, 0.01), got {self.eps_ball}")
        if self.lr_rsgd <= 0:
            raise ValueError("lr_rsgd must be positive")


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1)


def check_in_ball(x: np.ndarray) -> None:
    if np.any(_sqnorm(np.asarray(x, dtype=float)) >= 1.0):
        raise BallInvariantError("point with norm >= 1 is outside the open Poincare ball")


def poincare_distance(u, v):
    """arcosh(1 + 2|u-v|^2 / ((1-|u|^2)(1-|v|^2)))."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    check_in_ball(u)
    check_in_ball(v)
    alpha = np.maximum(1.0 - _sqnorm(u), _DENOM_FLOOR)
    beta = np.maximum(1.0 - _sqnorm(v), _DENOM_FLOOR)
    x = 2.0 * _sqnorm(u - v) / (alpha * beta)
    # arcosh(1 + x) without the cancellation that loses tiny distances
    return np.log1p(x + np.sqrt(x * (x + 2.0)))


def _distance_grad_unchecked(u, v):
    su, sv = _sqnorm(u), _sqnorm(v)
    alpha = np.maximum(1.0 - su, _DENOM_FLOOR)
    beta = np.maximum(1.0 - sv, _DENOM_FLOOR)
    gamma = 1.0 + 2.0 * _sqnorm(u - v) / (alpha * beta)
    root = np.sqrt(np.maximum(gamma * gamma - 1.0, _DENOM_FLOOR))
    uv = np.sum(u * v, axis=-1)
    coef = (4.0 / (beta * root))[..., None]
    return coef * (((sv - 2.0 * uv + 1.0) / alpha**2)[..., None] * u - v / alpha[..., None])


def distance_gradient(u, v):
    """Euclidean gradient of ``poincare_distance(u, v)`` with respect to ``u``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    check_in_ball(u)
    check_in_ball(v)
    if np.any(np.sqrt(_sqnorm(u - v)) < _COINCIDENT_TOL):
        raise CoincidentPointsError("gradient of the distance is singular at u == v")
    return _distance_grad_unchecked(u, v)


def conformal_scale(x) -> np.ndarray:
    """Inverse-metric factor (1 - |x|^2)^2 / 4."""
    x = np.asarray(x, dtype=float)
    return (1.0 - _sqnorm(x)) ** 2 / 4.0


def riemannian_rescale(x, euclid_grad):
    x = np.asarray(x, dtype=float)
    check_in_ball(x)
    return conformal_scale(x)[..., None] * np.asarray(euclid_grad, dtype=float)


def project_to_ball(x, eps_ball: float = BALL_EPS):
    x = np.array(x, dtype=float)
    limit = 1.0 - eps_ball
    norm = np.sqrt(_sqnorm(x))
    over = norm > limit
    if np.ndim(x) == 1:
        return x * (limit / norm) if over else x
    scale = np.where(over, limit / np.where(over, norm, 1.0), 1.0)
    return x * scale[..., None]


def rsgd_step(x, euclid_grad, lr: float, eps_ball: float = BALL_EPS):
    """One Riemannian SGD update followed by retraction into the ball."""
    x = np.asarray(x, dtype=float)
    return project_to_ball(x - lr * riemannian_rescale(x, euclid_grad), eps_ball)
