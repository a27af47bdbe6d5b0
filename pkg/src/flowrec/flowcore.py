"""Flow-matching kernel: trajectories, timestep samplers, interpolation, Euler steps.

Everything here is a pure function of its inputs. Scalars and numpy arrays are
evaluated in float64; ``interpolate`` and the step functions also accept torch
tensors so the training path can keep gradients through the clean endpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from flowrec.config import TIMESTEP_SAMPLERS, TRAJECTORIES

HALF_PI = 0.5 * math.pi


def _check_t(t) -> None:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t!r}")


def trajectory_coeffs(kind: str, t):
    """Return ``(a(t), b(t))`` so that ``z_t = a(t) x_c + b(t) x_n``."""
    _check_t(t)
    if kind == "straight":
        if np.ndim(t) == 0:
            t = float(t)
            return 1.0 - t, t
        t = np.asarray(t, dtype=np.float64)
        return 1.0 - t, t
    if kind == "cosine":
        ang = HALF_PI * np.asarray(t, dtype=np.float64)
        a, b = np.cos(ang), np.sin(ang)
        # pin the endpoints; cos(pi/2) is 6e-17 in floating point
        a = np.where(ang == HALF_PI, 0.0, a)
        b = np.where(ang == HALF_PI, 1.0, b)
        if np.ndim(t) == 0:
            return float(a), float(b)
        return a, b
    raise ValueError(f"unknown trajectory {kind!r}; expected one of {TRAJECTORIES}")


def trajectory_derivs(kind: str, t):
    """Return ``(a'(t), b'(t))``."""
    _check_t(t)
    if kind == "straight":
        if np.ndim(t) == 0:
            return -1.0, 1.0
        t = np.asarray(t, dtype=np.float64)
        return -np.ones_like(t), np.ones_like(t)
    if kind == "cosine":
        ang = HALF_PI * np.asarray(t, dtype=np.float64)
        da, db = -HALF_PI * np.sin(ang), HALF_PI * np.cos(ang)
        if np.ndim(t) == 0:
            return float(da), float(db)
        return da, db
    raise ValueError(f"unknown trajectory {kind!r}; expected one of {TRAJECTORIES}")


@dataclass(frozen=True)
class TimestepSampler:
    kind: str = "mode"
    s: float = 1.0
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in TIMESTEP_SAMPLERS:
            raise ValueError(f"unknown timestep sampler {self.kind!r}")
        if not math.isfinite(self.s):
            raise ValueError("mode sampler scale s must be finite")


def mode_warp(k, s: float):
    """Heavy-tailed mode warp ``1 - k - s (cos^2(pi k / 2) - 1 + k)``, clamped to [0, 1]."""
    k = np.asarray(k, dtype=np.float64)
    t = 1.0 - k - s * (np.cos(HALF_PI * k) ** 2 - 1.0 + k)
    return np.clip(t, 0.0, 1.0)


def cosmap_warp(k):
    k = np.asarray(k, dtype=np.float64)
    return np.clip(1.0 - 1.0 / (np.tan(HALF_PI * k) + 1.0), 0.0, 1.0)


def sample_timesteps(sampler: TimestepSampler, rng: np.random.Generator, size) -> np.ndarray:
    """Draw noise levels in [0, 1] as float64."""
    if sampler.kind == "logit_normal":
        x = rng.normal(sampler.loc, sampler.scale, size)
        return 1.0 / (1.0 + np.exp(-x))
    k = rng.random(size)
    if sampler.kind == "mode":
        return mode_warp(k, sampler.s)
    if sampler.kind == "uniform":
        return k
    return cosmap_warp(k)


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator) -> float:
    return float(sample_timesteps(sampler, rng, None))


def _check_same_shape(x, y) -> None:
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"dimension mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def _as_column(coef, like):
    """Shape per-row coefficients to broadcast against ``like`` ([..., d])."""
    if np.ndim(coef) == 0:
        return float(coef)
    coef = np.asarray(coef, dtype=np.float64).reshape(-1, *([1] * (like.ndim - 1)))
    if isinstance(like, np.ndarray):
        return coef
    import torch

    return torch.as_tensor(coef, dtype=like.dtype, device=like.device)


def interpolate(x_c, x_n, t, kind: str = "straight"):
    """Point on the path from ``x_c`` (t=0) to ``x_n`` (t=1).

    ``t`` may be a scalar or one value per leading row of ``x_c``.
    """
    if isinstance(x_c, (list, tuple)):
        x_c = np.asarray(x_c, dtype=np.float64)
    if isinstance(x_n, (list, tuple)):
        x_n = np.asarray(x_n, dtype=np.float64)
    _check_same_shape(x_c, x_n)
    a, b = trajectory_coeffs(kind, t)
    return _as_column(a, x_c) * x_c + _as_column(b, x_c) * x_n


def target_vector_field(x_c, x_n):
    """Conditional velocity of the straight path, ``x_n - x_c``."""
    x_c = np.asarray(x_c, dtype=np.float64) if isinstance(x_c, (list, tuple)) else x_c
    x_n = np.asarray(x_n, dtype=np.float64) if isinstance(x_n, (list, tuple)) else x_n
    _check_same_shape(x_c, x_n)
    return x_n - x_c


def euler_step(z, f_pred, x_n, dt: float):
    """One reverse step on the straight path: ``z + (f_pred - x_n) dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    _check_same_shape(z, f_pred)
    _check_same_shape(z, x_n)
    return z + (f_pred - x_n) * dt


def reverse_step(kind: str, z, f_pred, x_n, t: float, dt: float):
    """Move ``z`` from noise level ``t`` to ``t - dt`` along ``kind``.

    The velocity is the path derivative evaluated with the predicted clean
    point, ``a'(t) f_pred + b'(t) x_n``. For the straight path this is exactly
    :func:`euler_step`.
    """
    if kind == "straight":
        return euler_step(z, f_pred, x_n, dt)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    _check_same_shape(z, f_pred)
    _check_same_shape(z, x_n)
    da, db = trajectory_derivs(kind, t)
    return z - dt * (da * f_pred + db * x_n)
