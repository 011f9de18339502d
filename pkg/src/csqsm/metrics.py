"""Image-fidelity metrics and ROI statistics.

PSNR accepts complex inputs (RMSE over the complex difference magnitude);
SSIM operates on real magnitude images with an 11x11 Gaussian window
(sigma 1.5, k1=0.01, k2=0.03), evaluated on fully interior windows only.
Phase maps should be compared after wrapping the difference to (-pi, pi];
:func:`phase_rmse` does exactly that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

__all__ = [
    "MetricReport",
    "RegressionResult",
    "psnr",
    "ssim",
    "ssim_volume",
    "phase_rmse",
    "roi_stats",
    "linreg_voxelwise",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    """Per-stage metric bundle; psnr is +inf when test == ref exactly."""

    stage: str  # magnitude | phase | local_field | qsm
    psnr: float
    ssim: float
    rmse: float

    def to_json_dict(self) -> dict:
        # JSON has no Infinity literal; encode the sentinel as a string
        p = "inf" if math.isinf(self.psnr) else self.psnr
        return {"stage": self.stage, "psnr": p, "ssim": self.ssim, "rmse": self.rmse}


@dataclass
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    sse: float


def _rmse(test: np.ndarray, ref: np.ndarray) -> float:
    diff = np.abs(np.asarray(test) - np.asarray(ref))
    return float(np.sqrt(np.mean(diff * diff)))


def psnr(test: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """20*log10(data_range / rmse); +inf for identical inputs.

    ``data_range`` defaults to max(|ref|), so the metric is not symmetric
    in its arguments.
    """
    test = np.asarray(test)
    ref = np.asarray(ref)
    if test.shape != ref.shape:
        raise ValidationError("psnr inputs must have equal shapes")
    if data_range is None:
        data_range = float(np.max(np.abs(ref)))
    if data_range <= 0:
        raise ValidationError("data_range must be positive")
    err = _rmse(test, ref)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(data_range / err)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(test: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """Mean structural similarity of two real 2D images.

    Gaussian-weighted local statistics over every fully interior window;
    identical images score exactly 1.
    """
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if test.shape != ref.shape:
        raise ValidationError("ssim inputs must have equal shapes")
    if test.ndim != 2:
        raise ValidationError("ssim expects 2D images; use ssim_volume for 3D")
    if min(test.shape) < SSIM_WINDOW:
        raise ValidationError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if data_range <= 0:
        raise ValidationError("data_range must be positive")

    w = _gaussian_window()
    wt = sliding_window_view(test, (SSIM_WINDOW, SSIM_WINDOW))
    wr = sliding_window_view(ref, (SSIM_WINDOW, SSIM_WINDOW))
    mu_t = np.einsum("abij,ij->ab", wt, w, optimize=True)
    mu_r = np.einsum("abij,ij->ab", wr, w, optimize=True)
    tt = np.einsum("abij,ij->ab", wt * wt, w, optimize=True)
    rr = np.einsum("abij,ij->ab", wr * wr, w, optimize=True)
    tr = np.einsum("abij,ij->ab", wt * wr, w, optimize=True)
    var_t = tt - mu_t * mu_t
    var_r = rr - mu_r * mu_r
    cov = tr - mu_t * mu_r
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_t * mu_r + c1) * (2 * cov + c2)
    den = (mu_t * mu_t + mu_r * mu_r + c1) * (var_t + var_r + c2)
    return float(np.mean(num / den))


def ssim_volume(test: np.ndarray, ref: np.ndarray, axis: int = 0,
                data_range: float | None = None) -> float:
    """Slice-averaged SSIM of a 3D volume along ``axis``.

    A shared data_range (from ref) keeps slices comparable.
    """
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if test.shape != ref.shape or test.ndim != 3:
        raise ValidationError("ssim_volume expects two equal-shape 3D volumes")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    vals = [
        ssim(np.take(test, i, axis=axis), np.take(ref, i, axis=axis), data_range)
        for i in range(test.shape[axis])
    ]
    return float(np.mean(vals))


def phase_rmse(test: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> float:
    """RMSE of the wrapped phase difference, mapped to (-pi, pi]."""
    d = np.angle(np.exp(1j * (np.asarray(test) - np.asarray(ref))))
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
        if d.size == 0:
            raise ValidationError("empty mask in phase_rmse")
    return float(np.sqrt(np.mean(d * d)))


def roi_stats(volume: np.ndarray, rois: dict[str, np.ndarray]) -> dict[str, tuple[float, float]]:
    """Arithmetic mean and population std per named region."""
    volume = np.asarray(volume)
    out = {}
    for name, region in rois.items():
        region = np.asarray(region, dtype=bool)
        if region.shape != volume.shape:
            raise ValidationError(f"roi {name!r} shape mismatch")
        vals = volume[region]
        if vals.size == 0:
            raise ValidationError(f"roi {name!r} is empty")
        out[name] = (float(np.mean(vals)), float(np.std(vals)))
    return out


def linreg_voxelwise(x: np.ndarray, y: np.ndarray) -> RegressionResult:
    """Ordinary least squares of y on x with R^2 and SSE.

    A constant y (zero total variance) is the documented degenerate case:
    the fit is flat and r_squared is defined as 0.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValidationError("need >= 2 paired points")
    xm = x - x.mean()
    sxx = float(np.dot(xm, xm))
    if sxx == 0:
        raise ValidationError("x has zero variance")
    ym = y - y.mean()
    slope = float(np.dot(xm, ym) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    sse = float(np.dot(resid, resid))
    ss_tot = float(np.dot(ym, ym))
    r2 = 0.0 if ss_tot == 0 else 1.0 - sse / ss_tot
    return RegressionResult(slope, intercept, r2, sse)
