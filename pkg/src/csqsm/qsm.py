"""Synthetic susceptibility phantoms and the post-reconstruction QSM chain.

Stages mirror a conventional susceptibility pipeline: multi-echo GRE
simulation, spatial phase unwrapping, magnitude-weighted field fitting,
spherical-mean-value background removal with Tikhonov regularization, and
dipole inversion (thresholded k-space division for a single orientation,
least-squares fusion for multiple orientations).

All FFT convolutions are periodic; phantoms keep a zero margin of at least
a quarter of each extent so wrap-around is negligible.  Units: chi in ppm,
fields in rad/s, echo times in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion

from .errors import ValidationError

__all__ = [
    "GAMMA_HZ_PER_T",
    "default_field_scale",
    "SusceptibilityPhantom",
    "EchoSeries",
    "FieldMap",
    "dipole_kernel",
    "simulate_gre",
    "unwrap_phase",
    "fit_field",
    "resharp_remove",
    "tkd_invert",
    "cosmos_invert",
    "make_phantom",
]

GAMMA_HZ_PER_T = 42.577e6


def default_field_scale(b0_tesla: float = 3.0) -> float:
    """rad/s of off-resonance per ppm of field shift at the given B0."""
    return 2.0 * np.pi * GAMMA_HZ_PER_T * b0_tesla * 1e-6


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if v.shape != (3,) or abs(n - 1.0) > 1e-9:
        raise ValidationError("b0 direction must be a unit 3-vector")
    return v / n


def _fft3c(x: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(x), norm="ortho"))


def _ifft3c(x: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(x), norm="ortho"))


@dataclass
class SusceptibilityPhantom:
    """Ground-truth chi map (ppm) plus acquisition parameters."""

    chi: np.ndarray
    mask: np.ndarray
    b0_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    te_list: np.ndarray = field(
        default_factory=lambda: 3e-3 + 3.3e-3 * np.arange(8)
    )
    delta_te: float = 3.3e-3
    b0_gamma_scale: float = default_field_scale()

    def __post_init__(self):
        self.chi = np.asarray(self.chi, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.chi.shape != self.mask.shape or self.chi.ndim != 3:
            raise ValidationError("chi and mask must be matching 3D arrays")
        self.b0_dir = _unit(self.b0_dir)
        self.te_list = np.asarray(self.te_list, dtype=np.float64)
        if np.any(np.diff(self.te_list) <= 0):
            raise ValidationError("echo times must be strictly increasing")


@dataclass
class EchoSeries:
    """Complex volumes per echo (magnitude decay times phase evolution)."""

    echoes: np.ndarray  # (n_echo, nx, ny, nz) complex
    te_list: np.ndarray

    def __post_init__(self):
        self.echoes = np.asarray(self.echoes, dtype=np.complex128)
        self.te_list = np.asarray(self.te_list, dtype=np.float64)
        if self.echoes.shape[0] != self.te_list.size:
            raise ValidationError("echo count does not match te_list")


@dataclass
class FieldMap:
    """Off-resonance map in rad/s with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValidationError("field values and validity mask shapes differ")
        if not np.all(np.isfinite(self.values[self.valid])):
            raise ValidationError("non-finite field values inside validity mask")


# ---------------------------------------------------------------------------
# Dipole physics
# ---------------------------------------------------------------------------

def dipole_kernel(shape, b0_dir) -> np.ndarray:
    """k-space unit-dipole response 1/3 - (k.b)^2/|k|^2, DC set to 0."""
    b = _unit(b0_dir)
    kx = np.arange(shape[0]) - shape[0] // 2
    ky = np.arange(shape[1]) - shape[1] // 2
    kz = np.arange(shape[2]) - shape[2] // 2
    gx, gy, gz = np.meshgrid(kx, ky, kz, indexing="ij")
    k2 = gx * gx + gy * gy + gz * gz
    kb = gx * b[0] + gy * b[1] + gz * b[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 / 3.0 - (kb * kb) / k2
    d[shape[0] // 2, shape[1] // 2, shape[2] // 2] = 0.0
    return d


def chi_to_field_ppm(chi: np.ndarray, b0_dir) -> np.ndarray:
    """Field perturbation (ppm) induced by a chi map (ppm), periodic FFT."""
    d = dipole_kernel(chi.shape, b0_dir)
    return np.real(_ifft3c(d * _fft3c(chi.astype(np.complex128))))


def simulate_gre(phantom: SusceptibilityPhantom, r2s: float = 20.0) -> EchoSeries:
    """Noiseless multi-echo GRE signal for a phantom.

    Phase accrues linearly with echo time at b0_gamma_scale * field_ppm
    rad/s; magnitude decays as exp(-te * r2s) inside the object mask.
    """
    field_ppm = chi_to_field_ppm(phantom.chi, phantom.b0_dir)
    rate = phantom.b0_gamma_scale * field_ppm
    echoes = np.empty((phantom.te_list.size,) + phantom.chi.shape, dtype=np.complex128)
    for e, te in enumerate(phantom.te_list):
        mag = phantom.mask * np.exp(-te * r2s)
        echoes[e] = mag * np.exp(1j * rate * te)
    return EchoSeries(echoes, phantom.te_list)


# ---------------------------------------------------------------------------
# Phase unwrapping (reliability-guided region merging)
# ---------------------------------------------------------------------------

def _second_diff_penalty(wrapped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Sum of squared wrapped second differences per voxel (lower = more reliable).

    Axes where a voxel lacks two in-mask neighbours contribute the worst
    case (2*pi)^2, pushing borders to the end of the merge queue.
    """

    def wrap(d):
        return np.angle(np.exp(1j * d))

    penalty = np.zeros(wrapped.shape, dtype=np.float64)
    for ax in range(wrapped.ndim):
        n = wrapped.shape[ax]
        full = np.full(wrapped.shape, (2.0 * np.pi) ** 2)
        if n >= 3:
            mid = [slice(None)] * wrapped.ndim
            lo = [slice(None)] * wrapped.ndim
            hi = [slice(None)] * wrapped.ndim
            mid[ax], lo[ax], hi[ax] = slice(1, n - 1), slice(0, n - 2), slice(2, n)
            mid, lo, hi = tuple(mid), tuple(lo), tuple(hi)
            ok = mask[mid] & mask[lo] & mask[hi]
            d = wrap(wrapped[lo] - wrapped[mid]) - wrap(wrapped[mid] - wrapped[hi])
            inner = np.where(ok, d * d, (2.0 * np.pi) ** 2)
            full[mid] = inner
        penalty += full
    return penalty


class _UnionFind:
    """Union-find whose nodes carry integer 2*pi offsets relative to their parent."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.offset = np.zeros(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, v: int) -> tuple[int, int]:
        path = []
        while self.parent[v] != v:
            path.append(v)
            v = self.parent[v]
        pot = 0
        for node in reversed(path):
            pot += self.offset[node]
            self.parent[node] = v
            self.offset[node] = pot
        return v, pot if path else 0

    def potential(self, v: int) -> int:
        _, pot = self.find(v)
        return int(self.offset[v]) if self.parent[v] != v else 0


def unwrap_phase(wrapped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Spatially unwrap a wrapped phase volume inside a support mask.

    Voxels are scored by summed squared second differences; edges between
    in-mask neighbours are merged most-reliable-first with a union-find
    that tracks per-region 2*pi offsets.  Each connected mask component is
    internally consistent; its global multiple of 2*pi is chosen to keep
    the result close to the wrapped input.  Outside the mask the input is
    returned unchanged.
    """
    wrapped = np.asarray(wrapped, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if wrapped.shape != mask.shape:
        raise ValidationError("wrapped and mask shapes differ")
    if not mask.any():
        raise ValidationError("empty mask")

    penalty = _second_diff_penalty(wrapped, mask)
    reliability = 1.0 / (penalty + 1e-12)

    flat_w = wrapped.ravel()
    edges_a = []
    edges_b = []
    edge_rel = []
    for ax in range(wrapped.ndim):
        sl_a = [slice(None)] * wrapped.ndim
        sl_b = [slice(None)] * wrapped.ndim
        sl_a[ax] = slice(0, wrapped.shape[ax] - 1)
        sl_b[ax] = slice(1, wrapped.shape[ax])
        sl_a, sl_b = tuple(sl_a), tuple(sl_b)
        ok = mask[sl_a] & mask[sl_b]
        idx = np.arange(wrapped.size).reshape(wrapped.shape)
        edges_a.append(idx[sl_a][ok])
        edges_b.append(idx[sl_b][ok])
        edge_rel.append(reliability[sl_a][ok] + reliability[sl_b][ok])
    ea = np.concatenate(edges_a)
    eb = np.concatenate(edges_b)
    rel = np.concatenate(edge_rel)
    order = np.argsort(-rel, kind="stable")

    uf = _UnionFind(wrapped.size)
    two_pi = 2.0 * np.pi
    for e in order:
        a = int(ea[e])
        b = int(eb[e])
        ra, pa = uf.find(a)
        rb, pb = uf.find(b)
        if ra == rb:
            continue
        k = int(round((flat_w[a] + two_pi * pa - flat_w[b] - two_pi * pb) / two_pi))
        if uf.size[ra] >= uf.size[rb]:
            uf.parent[rb] = ra
            uf.offset[rb] = k
            uf.size[ra] += uf.size[rb]
        else:
            uf.parent[ra] = rb
            uf.offset[ra] = -k
            uf.size[rb] += uf.size[ra]

    out = wrapped.copy()
    flat_idx = np.flatnonzero(mask.ravel())
    pots = np.empty(flat_idx.size, dtype=np.int64)
    roots = np.empty(flat_idx.size, dtype=np.int64)
    for i, v in enumerate(flat_idx):
        r, p = uf.find(int(v))
        roots[i] = r
        pots[i] = p

    # re-center each component to the nearest 2*pi of the wrapped input
    uniq, inverse = np.unique(roots, return_inverse=True)
    mean_pot = np.bincount(inverse, weights=pots) / np.bincount(inverse)
    shift = np.round(mean_pot).astype(np.int64)
    pots = pots - shift[inverse]
    out.ravel()[flat_idx] = flat_w[flat_idx] + two_pi * pots
    return out


# ---------------------------------------------------------------------------
# Multi-echo field fitting
# ---------------------------------------------------------------------------

def fit_field(phases: np.ndarray, magnitudes: np.ndarray, te_list) -> FieldMap:
    """Per-voxel weighted least-squares slope of phase vs echo time.

    Weights are squared magnitudes.  Returns the slope in rad/s; the
    intercept is fitted and discarded.  Voxels whose weights are all zero
    (or whose weighted TE spread vanishes) are marked invalid.
    """
    phases = np.asarray(phases, dtype=np.float64)
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    te = np.asarray(te_list, dtype=np.float64)
    if phases.shape != magnitudes.shape or phases.shape[0] != te.size:
        raise ValidationError("phases/magnitudes/te_list shapes inconsistent")
    if te.size < 2:
        raise ValidationError("need at least two echoes")

    w = magnitudes * magnitudes
    te_b = te.reshape((-1,) + (1,) * (phases.ndim - 1))
    sw = w.sum(axis=0)
    swt = (w * te_b).sum(axis=0)
    swtt = (w * te_b * te_b).sum(axis=0)
    swp = (w * phases).sum(axis=0)
    swtp = (w * te_b * phases).sum(axis=0)
    denom = sw * swtt - swt * swt
    valid = denom > 0
    slope = np.zeros(sw.shape)
    np.divide(sw * swtp - swt * swp, denom, out=slope, where=valid)
    return FieldMap(slope, valid)


# ---------------------------------------------------------------------------
# Background removal
# ---------------------------------------------------------------------------

def _ball_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    ax = np.arange(-r, r + 1)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return (gx * gx + gy * gy + gz * gz) <= radius * radius


def _smv_kernel_fft(shape, radius: int) -> np.ndarray:
    ball = _ball_offsets(radius).astype(np.float64)
    ball /= ball.sum()
    kern = np.zeros(shape)
    r = radius
    ax = np.arange(-r, r + 1)
    ix = np.mod(ax.reshape(-1, 1, 1), shape[0])
    iy = np.mod(ax.reshape(1, -1, 1), shape[1])
    iz = np.mod(ax.reshape(1, 1, -1), shape[2])
    np.add.at(kern, (np.broadcast_to(ix, ball.shape),
                     np.broadcast_to(iy, ball.shape),
                     np.broadcast_to(iz, ball.shape)), ball)
    return np.fft.fftn(kern)


def smv_filter(f: np.ndarray, radius: int, _kfft=None) -> np.ndarray:
    """Spherical mean value of a field (periodic FFT convolution)."""
    kfft = _smv_kernel_fft(f.shape, radius) if _kfft is None else _kfft
    return np.real(np.fft.ifftn(kfft * np.fft.fftn(f)))


def resharp_remove(
    fmap: FieldMap,
    mask: np.ndarray,
    radius: int = 4,
    tik: float = 1e-3,
    cg_tol: float = 1e-8,
    cg_maxiter: int = 200,
) -> FieldMap:
    """Remove harmonic background field inside an eroded mask.

    Applies (identity - spherical mean) to annihilate harmonic components,
    then solves the Tikhonov-regularized deconvolution for the local field
    with conjugate gradients restricted to the eroded support.
    """
    if radius < 1:
        raise ValidationError("radius must be >= 1 voxel")
    mask = np.asarray(mask, dtype=bool)
    eroded = binary_erosion(mask, structure=_ball_offsets(radius))
    if not eroded.any():
        raise ValidationError("eroded mask is empty; reduce the radius")

    kfft = _smv_kernel_fft(fmap.values.shape, radius)

    def high_pass(x):
        return x - smv_filter(x, radius, kfft)

    def a_op(x):
        return eroded * high_pass(eroded * x)

    b = eroded * high_pass(fmap.values)
    rhs = a_op(b)

    def normal_op(x):
        return a_op(a_op(x)) + tik * x

    x = np.zeros_like(b)
    r = rhs - normal_op(x)
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    rhs_norm = np.sqrt(float(np.vdot(rhs, rhs).real)) or 1.0
    for _ in range(cg_maxiter):
        if np.sqrt(rs) / rhs_norm <= cg_tol:
            break
        ap = normal_op(p)
        alpha = rs / float(np.vdot(p, ap).real)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r).real)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return FieldMap(x * eroded, eroded)


# ---------------------------------------------------------------------------
# Dipole inversion
# ---------------------------------------------------------------------------

def tkd_invert(
    local: FieldMap,
    b0_dir,
    threshold: float = 0.19,
    b0_gamma_scale: float = default_field_scale(),
) -> np.ndarray:
    """Thresholded k-space division of a local field map; returns chi (ppm).

    Kernel values below the threshold magnitude are clamped to +-threshold
    (DC counts as +threshold), bounding the noise amplification near the
    zero cone at the cost of some underestimation.
    """
    if not 0 < threshold < 2.0 / 3.0:
        raise ValidationError("threshold must lie in (0, 2/3)")
    d = dipole_kernel(local.values.shape, b0_dir)
    signed = np.where(d >= 0, 1.0, -1.0) * threshold
    d_safe = np.where(np.abs(d) < threshold, signed, d)
    local_ppm = (local.values * local.valid) / b0_gamma_scale
    return np.real(_ifft3c(_fft3c(local_ppm.astype(np.complex128)) / d_safe))


def cosmos_invert(
    fields: list,
    reg: float = 1e-6,
    b0_gamma_scale: float = default_field_scale(),
) -> np.ndarray:
    """Least-squares dipole inversion from several orientations.

    ``fields`` is a list of (FieldMap, b0_dir) pairs.  Per k-sample:
    chi_hat = sum_i D_i * F(f_i) / (sum_i D_i^2 + reg).
    """
    if len(fields) < 3:
        raise ValidationError("need at least 3 orientations")
    dirs = [_unit(b) for _, b in fields]
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            if abs(abs(float(np.dot(dirs[i], dirs[j]))) - 1.0) < 1e-9:
                raise ValidationError("duplicate (or antiparallel) orientations")
    shape = fields[0][0].values.shape
    num = np.zeros(shape, dtype=np.complex128)
    den = np.full(shape, float(reg))
    for (fmap, _), b in zip(fields, dirs):
        if fmap.values.shape != shape:
            raise ValidationError("orientation field maps differ in shape")
        d = dipole_kernel(shape, b)
        f_ppm = (fmap.values * fmap.valid) / b0_gamma_scale
        num += d * _fft3c(f_ppm.astype(np.complex128))
        den += d * d
    return np.real(_ifft3c(num / den))


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

# (value, center xyz as fraction of semi-axes, semi-axes as fraction, zyx Euler z-rot)
_SHEPP3D = [
    (0.80, (0.0, 0.0, 0.0), (0.90, 0.92, 0.90), 0.0),
    (-0.60, (0.0, -0.0184, 0.0), (0.8500, 0.874, 0.84), 0.0),
    (-0.20, (0.22, 0.0, -0.25), (0.26, 0.31, 0.22), -0.4),
    (-0.20, (-0.22, 0.0, -0.25), (0.36, 0.27, 0.32), 0.4),
    (0.20, (0.0, 0.35, -0.25), (0.30, 0.38, 0.35), 0.0),
    (0.20, (0.0, 0.1, -0.25), (0.06, 0.06, 0.06), 0.0),
    (0.10, (-0.08, -0.605, -0.25), (0.08, 0.064, 0.10), 0.0),
    (0.10, (0.06, -0.605, -0.25), (0.06, 0.064, 0.10), 0.0),
    (0.20, (0.06, -0.105, 0.625), (0.112, 0.056, 0.10), 0.0),
    (-0.20, (0.0, 0.1, 0.625), (0.056, 0.056, 0.10), 0.0),
]


def _ellipsoid_mask(shape, semi_frac=0.36) -> np.ndarray:
    grids = np.meshgrid(
        *[(np.arange(n) - (n - 1) / 2.0) / (semi_frac * n) for n in shape],
        indexing="ij",
    )
    return sum(g * g for g in grids) <= 1.0


def make_phantom(
    kind: str = "spheres",
    shape=(64, 64, 32),
    seed: int = 42,
    **acq,
) -> SusceptibilityPhantom:
    """Piecewise-constant chi phantom inside an ellipsoidal support.

    chi values lie in [-0.2, 0.5] ppm.  The support keeps a zero margin of
    more than a quarter of each extent so periodic FFT convolutions do not
    wrap appreciably.  Deterministic per (kind, shape, seed).
    """
    shape = tuple(int(n) for n in shape)
    if min(shape) < 8:
        raise ValidationError("phantom extents must be >= 8")
    rng = np.random.Generator(np.random.Philox(key=seed))
    support = _ellipsoid_mask(shape)
    chi = np.zeros(shape)
    coords = np.meshgrid(*[np.arange(n) - (n - 1) / 2.0 for n in shape], indexing="ij")

    if kind == "spheres":
        # sources stay well inside the support so their dipole tails decay
        # before the mask edge; keeps background removal and inversion honest
        n_prim = int(rng.integers(5, 10))
        for _ in range(n_prim):
            c = rng.uniform(-0.40, 0.40, size=3) * (0.36 * np.asarray(shape))
            radius = rng.uniform(0.04, 0.08) * min(shape)
            value = rng.uniform(-0.2, 0.5)
            dist2 = sum((g - ci) ** 2 for g, ci in zip(coords, c))
            chi[dist2 <= radius * radius] = value
    elif kind == "cylinders":
        n_prim = int(rng.integers(4, 8))
        for _ in range(n_prim):
            c = rng.uniform(-0.5, 0.5, size=2) * (0.36 * np.asarray(shape[:2]))
            radius = rng.uniform(0.05, 0.12) * min(shape[:2])
            z0, z1 = np.sort(rng.uniform(-0.8, 0.8, size=2)) * (0.36 * shape[2])
            value = rng.uniform(-0.2, 0.5)
            dist2 = (coords[0] - c[0]) ** 2 + (coords[1] - c[1]) ** 2
            chi[(dist2 <= radius * radius) & (coords[2] >= z0) & (coords[2] <= z1)] = value
    elif kind == "shepp3d":
        semi = 0.36 * np.asarray(shape)
        acc = np.zeros(shape)
        for value, center, axes, rot in _SHEPP3D:
            ca, sa = np.cos(rot), np.sin(rot)
            x = (coords[0] - center[0] * semi[0]) / (axes[0] * semi[0])
            y = (coords[1] - center[1] * semi[1]) / (axes[1] * semi[1])
            z = (coords[2] - center[2] * semi[2]) / (axes[2] * semi[2])
            xr = ca * x + sa * y
            yr = -sa * x + ca * y
            acc[(xr * xr + yr * yr + z * z) <= 1.0] += value
        lo, hi = acc.min(), acc.max()
        if hi > lo:
            chi = -0.2 + 0.7 * (acc - lo) / (hi - lo)
    else:
        raise ValidationError(f"unknown phantom kind {kind!r}")

    chi *= support
    return SusceptibilityPhantom(chi=chi, mask=support, **acq)
