"""Sparsifying operators shared by the iterative solvers.

Provides an orthonormal multilevel Daubechies-4 wavelet transform with
periodic boundaries, forward finite differences with an exact adjoint,
complex soft-thresholding, and the hyperbolic edge-preserving potential
used for phase regularization.

The wavelet synthesis is implemented as the exact adjoint of the analysis
step, so perfect reconstruction and Parseval hold to rounding error by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "WaveletSpec",
    "DiffOperator",
    "wavelet_fwd",
    "wavelet_inv",
    "detail_mask",
    "finite_diff",
    "finite_diff_adj",
    "soft_threshold",
    "edge_psi",
]

# Daubechies-4 (8-tap) orthonormal analysis lowpass filter, correctly rounded
# to float64 (obtained by spectral factorization at 60-digit precision).
_DB4_LO = np.array(
    [
        -0.010597401785069032,
        0.0328830116668852,
        0.030841381835560764,
        -0.18703481171909309,
        -0.027983769416859854,
        0.6308807679298589,
        0.7148465705529157,
        0.2303778133088965,
    ]
)
# Quadrature-mirror highpass: g[k] = (-1)^k * h[L-1-k]
_DB4_HI = (_DB4_LO[::-1] * np.where(np.arange(_DB4_LO.size) % 2 == 0, 1.0, -1.0))


@dataclass(frozen=True)
class WaveletSpec:
    """Multilevel orthonormal wavelet decomposition parameters.

    The family (Daubechies-4) and boundary handling (periodic) are fixed;
    only the number of levels varies.
    """

    levels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")


@dataclass(frozen=True)
class DiffOperator:
    """Forward differences along the given axes, replicate-edge boundary."""

    axes: tuple[int, ...] = (0, 1)


def _check_divisible(shape, levels: int) -> None:
    div = 1 << levels
    for n in shape:
        if n % div:
            raise ValidationError(
                f"extent {n} not divisible by 2^{levels}; pad or lower levels"
            )


def _analysis_1d(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """One periodic analysis step along ``axis``: (approx, detail)."""
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(_DB4_LO.size)[None, :]) % n
    win = x[idx]  # (n//2, taps, ...)
    a = np.tensordot(_DB4_LO, np.moveaxis(win, 1, 0), axes=(0, 0))
    d = np.tensordot(_DB4_HI, np.moveaxis(win, 1, 0), axes=(0, 0))
    return np.moveaxis(a, 0, axis), np.moveaxis(d, 0, axis)


def _synthesis_1d(a: np.ndarray, d: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_analysis_1d` (equals the inverse by orthonormality)."""
    a = np.moveaxis(a, axis, 0)
    d = np.moveaxis(d, axis, 0)
    m = a.shape[0]
    n = 2 * m
    out = np.zeros((n,) + a.shape[1:], dtype=np.result_type(a, d))
    idx = (2 * np.arange(m)[:, None] + np.arange(_DB4_LO.size)[None, :]) % n
    contrib = (
        a[:, None, ...] * _DB4_LO.reshape((1, -1) + (1,) * (a.ndim - 1))
        + d[:, None, ...] * _DB4_HI.reshape((1, -1) + (1,) * (a.ndim - 1))
    )
    np.add.at(out, idx.ravel(), contrib.reshape((-1,) + a.shape[1:]))
    return np.moveaxis(out, 0, axis)


def wavelet_fwd(x: np.ndarray, spec: WaveletSpec = WaveletSpec()) -> np.ndarray:
    """Multilevel 2D decomposition, packed in place (approx in the top-left).

    Applied separately to real and imaginary parts (the filters are real,
    so operating on the complex array directly is equivalent).
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError("wavelet_fwd expects a 2D array")
    _check_divisible(x.shape, spec.levels)
    out = x.astype(np.result_type(x, np.float64), copy=True)
    ny, nz = x.shape
    for _ in range(spec.levels):
        band = out[:ny, :nz]
        a, d = _analysis_1d(band, 0)
        band = np.concatenate([a, d], axis=0)
        a, d = _analysis_1d(band, 1)
        out[:ny, :nz] = np.concatenate([a, d], axis=1)
        ny //= 2
        nz //= 2
    return out


def wavelet_inv(c: np.ndarray, spec: WaveletSpec = WaveletSpec()) -> np.ndarray:
    """Inverse of :func:`wavelet_fwd`."""
    c = np.asarray(c)
    if c.ndim != 2:
        raise ValidationError("wavelet_inv expects a 2D array")
    _check_divisible(c.shape, spec.levels)
    out = c.astype(np.result_type(c, np.float64), copy=True)
    for lev in reversed(range(spec.levels)):
        ny, nz = c.shape[0] >> lev, c.shape[1] >> lev
        band = out[:ny, :nz]
        band = _synthesis_1d(band[:, : nz // 2], band[:, nz // 2 :], 1)
        band = _synthesis_1d(band[: ny // 2], band[ny // 2 :], 0)
        out[:ny, :nz] = band
    return out


def detail_mask(shape: tuple[int, int], spec: WaveletSpec = WaveletSpec()) -> np.ndarray:
    """Boolean map of detail coefficients (False on the final approximation)."""
    _check_divisible(shape, spec.levels)
    mask = np.ones(shape, dtype=bool)
    mask[: shape[0] >> spec.levels, : shape[1] >> spec.levels] = False
    return mask


def finite_diff(x: np.ndarray, op: DiffOperator = DiffOperator()) -> np.ndarray:
    """Stacked forward differences, one leading slot per axis.

    Replicate-edge boundary: the difference at the last index along each
    axis is zero, so constants are exactly in the null space.
    """
    x = np.asarray(x)
    out = np.zeros((len(op.axes),) + x.shape, dtype=x.dtype)
    for i, ax in enumerate(op.axes):
        d = np.diff(x, axis=ax)
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(0, x.shape[ax] - 1)
        out[i][tuple(sl)] = d
    return out


def finite_diff_adj(g: np.ndarray, op: DiffOperator = DiffOperator()) -> np.ndarray:
    """Exact adjoint of :func:`finite_diff`: <Cx, y> == <x, C^H y>."""
    g = np.asarray(g)
    if g.shape[0] != len(op.axes):
        raise ValidationError("difference stack does not match operator axes")
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    for i, ax in enumerate(op.axes):
        gi = g[i]
        sl_head = [slice(None)] * out.ndim
        sl_head[ax] = slice(0, out.shape[ax] - 1)
        # adjoint of forward difference: negated difference with edge terms
        out[tuple(sl_head)] -= gi[tuple(sl_head)]
        sl_tail = [slice(None)] * out.ndim
        sl_tail[ax] = slice(1, out.shape[ax])
        out[tuple(sl_tail)] += gi[tuple(sl_head)]
    return out


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    """Complex soft-thresholding: shrink magnitudes by ``t``, keep phase.

    Exact proximal map of ``t * |.|_1`` for complex entries; zeros stay zero.
    """
    if t < 0:
        raise ValidationError("threshold must be nonnegative")
    x = np.asarray(x)
    mag = np.abs(x)
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - t, 0.0), mag, out=scale, where=mag > 0)
    return x * scale


def edge_psi(x, delta: float):
    """Edge-preserving potential and its half-quadratic majorizer weight.

    value  = delta^2 * (sqrt(1 + |x|^2/delta^2) - 1)
    weight = 1 / sqrt(1 + |x|^2/delta^2)   (so d(value)/d|x| = |x| * weight)

    The potential grows quadratically for |x| << delta and linearly (slope
    delta) for |x| >> delta.
    """
    if delta <= 0:
        raise ValidationError("delta must be positive")
    s = np.abs(np.asarray(x)) / delta
    root = np.sqrt(1.0 + s * s)
    return delta * delta * (root - 1.0), 1.0 / root
