"""Complex volumes, centered Fourier operators, and k-space undersampling.

Conventions used throughout the package:

* Volumes are indexed ``[x, y, z]`` with x the fully sampled readout
  direction; 2D slices are indexed ``[y, z]``.
* All discrete Fourier transforms are unitary (``norm="ortho"``) with the
  DC sample at the array center, so Parseval holds exactly and the inverse
  is the adjoint.
* Sampling masks live in the ky-kz plane; a ``True`` entry means the whole
  readout line at that (ky, kz) was acquired.
* Randomness comes from numpy's counter-based Philox generator so that
  every realization is a pure function of its seed.

File formats:

* ``.cvol``: one UTF-8 JSON header line, then raw little-endian complex64
  samples (interleaved float32 re/im pairs) in x-fastest order.
* ``.mask``: one JSON header line, then raw uint8 0/1 in y-fastest order.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ValidationError

__all__ = [
    "ComplexVolume",
    "ComplexSlice",
    "MaskSpec",
    "SamplingMask",
    "AF_PDF_PARAMS",
    "dft_centered",
    "idft_centered",
    "fft2c",
    "ifft2c",
    "undersample",
    "forward_model",
    "pdf_map",
    "realize_mask",
    "zero_fill_recon",
    "slice_decompose",
    "slice_recompose",
    "read_cvol",
    "write_cvol",
    "read_mask",
    "write_mask",
    "atomic_write_bytes",
]

# Variable-density PDF parameters (pa, pb) matched to each acceleration
# factor; pa grows with the acceleration so the target fraction is reachable.
AF_PDF_PARAMS = {2: (7.0, 1.8), 4: (12.0, 1.8), 6: (17.0, 1.8), 8: (22.0, 1.8)}


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data.view(np.float64))):
        raise ValidationError(f"{what} contains non-finite samples")


@dataclass
class ComplexVolume:
    """A 3D complex image or k-space array, indexed [x, y, z]."""

    data: np.ndarray
    domain: str = "image"  # "image" | "kspace"
    units: str | None = None  # for real-valued maps stored as cvol: "ppm", "rad_s"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.complex128)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError("volume data must be 3D with positive extents")
        if self.domain not in ("image", "kspace"):
            raise ValidationError(f"unknown domain tag {self.domain!r}")
        _check_finite(self.data, "volume")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class ComplexSlice:
    """A 2D complex ky-kz (or y-z) slice."""

    data: np.ndarray
    domain: str = "image"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValidationError("slice data must be 2D with positive extents")
        if self.domain not in ("image", "kspace", "wavelet"):
            raise ValidationError(f"unknown domain tag {self.domain!r}")
        _check_finite(self.data, "slice")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class MaskSpec:
    """Generating parameters of a variable-density sampling mask.

    ``pa`` controls how fast the sampling density decays away from the
    k-space center, ``pb`` the radial exponent of the decay.  ``calib`` are
    half-widths of the always-sampled central calibration block.
    """

    ny: int
    nz: int
    af: float
    pa: float
    pb: float = 1.8
    calib: tuple[int, int] = (6, 3)
    seed: int = 0

    def __post_init__(self):
        if self.ny < 1 or self.nz < 1:
            raise ValidationError("mask plane extents must be positive")
        if self.af < 1:
            raise ValidationError("acceleration factor must be >= 1")
        if self.pa <= 0 or self.pb <= 0:
            raise ValidationError("pa and pb must be positive")
        cy, cz = self.calib
        if cy < 0 or cz < 0 or 2 * cy > self.ny or 2 * cz > self.nz:
            raise ValidationError("calibration block does not fit in the plane")

    @property
    def n_lines(self) -> int:
        """Number of acquired readout lines this spec realizes."""
        return int(round(self.ny * self.nz / self.af))


@dataclass
class SamplingMask:
    """A realized boolean ky-kz sampling plane plus its generating spec."""

    plane: np.ndarray
    spec: MaskSpec

    def __post_init__(self):
        self.plane = np.ascontiguousarray(self.plane, dtype=bool)
        if self.plane.shape != (self.spec.ny, self.spec.nz):
            raise ValidationError("mask plane shape does not match its spec")

    @property
    def fraction(self) -> float:
        return self.plane.sum() / self.plane.size


def _centered_coords(n: int) -> np.ndarray:
    # integer k coordinates with DC at index n//2, matching centered FFTs
    return np.arange(n) - n // 2


def _calib_block(spec: MaskSpec) -> np.ndarray:
    ky = _centered_coords(spec.ny)
    kz = _centered_coords(spec.nz)
    cy, cz = spec.calib
    in_y = (ky >= -cy) & (ky < cy)
    in_z = (kz >= -cz) & (kz < cz)
    return in_y[:, None] & in_z[None, :]


# ---------------------------------------------------------------------------
# Fourier operators
# ---------------------------------------------------------------------------

def _dft_nd(data: np.ndarray, axes: tuple[int, ...], inverse: bool) -> np.ndarray:
    shifted = np.fft.ifftshift(data, axes=axes)
    if inverse:
        out = np.fft.ifftn(shifted, axes=axes, norm="ortho")
    else:
        out = np.fft.fftn(shifted, axes=axes, norm="ortho")
    return np.fft.fftshift(out, axes=axes)


def _flip_domain(tag: str) -> str:
    try:
        return {"image": "kspace", "kspace": "image"}[tag]
    except KeyError:
        raise ValidationError(f"cannot Fourier-transform domain {tag!r}") from None


def dft_centered(v, axes=None):
    """Unitary DFT with DC at the array center.

    Accepts a ComplexVolume or ComplexSlice.  When all axes are transformed
    the domain tag flips; partial transforms keep the tag, leaving the
    volume in a hybrid state the caller is expected to track.
    """
    return _transform(v, axes, inverse=False)


def idft_centered(v, axes=None):
    """Exact inverse of :func:`dft_centered` (adjoint, by unitarity)."""
    return _transform(v, axes, inverse=True)


def _transform(v, axes, inverse):
    rank = v.data.ndim
    if axes is None:
        axes = tuple(range(rank))
    else:
        axes = tuple(int(a) for a in (axes if np.iterable(axes) else (axes,)))
    if not axes:
        raise ValidationError("axes must be nonempty")
    for a in axes:
        if not -rank <= a < rank:
            raise ValidationError(f"axis {a} out of range for rank {rank}")
    axes = tuple(a % rank for a in axes)
    out = _dft_nd(v.data, axes, inverse)
    domain = _flip_domain(v.domain) if len(set(axes)) == rank else v.domain
    cls = type(v)
    if cls is ComplexVolume:
        return ComplexVolume(out, domain, v.units)
    return cls(out, domain)


def fft2c(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Centered unitary 2D FFT on a raw ndarray (helper for inner loops)."""
    return _dft_nd(np.asarray(x, dtype=np.complex128), tuple(axes), inverse=False)


def ifft2c(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    return _dft_nd(np.asarray(x, dtype=np.complex128), tuple(axes), inverse=True)


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------

def undersample(image: ComplexVolume, mask: SamplingMask) -> ComplexVolume:
    """Transform an image volume to k-space and zero the unacquired lines."""
    if image.domain != "image":
        raise ValidationError("undersample expects an image-domain volume")
    _check_mask_fits(image.shape, mask)
    y = dft_centered(image)
    y.data *= mask.plane[None, :, :]
    return y


def forward_model(m: np.ndarray, phi: np.ndarray, mask: SamplingMask) -> ComplexVolume:
    """Undersampled k-space of the complex image ``m * exp(i phi)``.

    The readout (x) direction is always fully sampled; the mask removes
    whole readout lines in the ky-kz plane.
    """
    m = np.asarray(m, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if m.shape != phi.shape:
        raise ValidationError("magnitude and phase shapes differ")
    image = ComplexVolume(m * np.exp(1j * phi), "image")
    return undersample(image, mask)


def _check_mask_fits(shape, mask: SamplingMask) -> None:
    if shape[-2:] != mask.plane.shape:
        raise ValidationError(
            f"mask plane {mask.plane.shape} does not match volume (y,z) extents {shape[-2:]}"
        )


def zero_fill_recon(y: ComplexVolume, mask: SamplingMask) -> ComplexVolume:
    """Inverse DFT of zero-filled k-space; the baseline reconstruction."""
    if y.domain != "kspace":
        raise ValidationError("zero_fill_recon expects k-space input")
    _check_mask_fits(y.shape, mask)
    off = y.data[:, ~mask.plane]
    if off.size and np.any(off != 0):
        raise ValidationError("nonzero samples on unacquired lines; inconsistent input")
    return idft_centered(y)


def slice_decompose(y: ComplexVolume) -> list[ComplexSlice]:
    """Split volume k-space into per-x 2D ky-kz slices.

    Applies the 1D inverse DFT along the fully sampled readout first, so
    each returned slice is the k-space of one spatial x position.
    """
    if y.domain != "kspace":
        raise ValidationError("slice_decompose expects k-space input")
    hybrid = _dft_nd(y.data, (0,), inverse=True)
    return [ComplexSlice(hybrid[i], "kspace") for i in range(hybrid.shape[0])]


def slice_recompose(slices: list[ComplexSlice]) -> ComplexVolume:
    """Exact inverse of :func:`slice_decompose`."""
    if not slices:
        raise ValidationError("no slices to recompose")
    stack = np.stack([s.data for s in slices], axis=0)
    return ComplexVolume(_dft_nd(stack, (0,), inverse=False), "kspace")


# ---------------------------------------------------------------------------
# Variable-density masks
# ---------------------------------------------------------------------------

def pdf_map(spec: MaskSpec) -> np.ndarray:
    """Sampling probability density over the centered ky-kz grid.

    ``pdf = exp(-pa * sqrt((ky/ny)^2 + (kz/nz)^2) ** pb)``, radially
    non-increasing with value 1 at DC.  The radius uses k-coordinates
    normalized by the plane extents, so a given (pa, pb) produces the same
    density profile at any matrix size; with unnormalized integer
    coordinates the density would collapse into a near-deterministic
    low-pass block and the sampling would lose the incoherence that
    sparsity-based reconstruction relies on.
    """
    ky = _centered_coords(spec.ny).astype(np.float64) / spec.ny
    kz = _centered_coords(spec.nz).astype(np.float64) / spec.nz
    r = np.sqrt(ky[:, None] ** 2 + kz[None, :] ** 2)
    return np.exp(-spec.pa * r**spec.pb)


def realize_mask(spec: MaskSpec) -> SamplingMask:
    """Draw the exact-count mask realization for a spec.

    One uniform deviate is drawn per line from a Philox stream keyed by the
    seed; lines are ranked by deviate/pdf and the smallest ``n_lines``
    scores are kept.  The calibration block is forced below every other
    score, so it is always fully sampled.  Bit-reproducible per spec.
    """
    count = spec.n_lines
    calib = _calib_block(spec)
    n_calib = int(calib.sum())
    if count < n_calib:
        raise ValidationError(
            f"target line count {count} smaller than calibration block {n_calib}"
        )
    pdf = pdf_map(spec)
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    u = rng.random(pdf.shape)
    with np.errstate(divide="ignore"):
        score = np.where(pdf > 0, u / pdf, np.inf)
    score[calib] = -1.0
    order = np.argsort(score.ravel(), kind="stable")
    plane = np.zeros(pdf.size, dtype=bool)
    plane[order[:count]] = True
    return SamplingMask(plane.reshape(pdf.shape), spec)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write a file via a temp in the same directory + rename; no partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cvol(path: str, v: ComplexVolume) -> None:
    header = {
        "shape": list(v.shape),
        "dtype": "c64le",
        "layout": "x-fastest",
        "domain": v.domain,
    }
    if v.units is not None:
        header["units"] = v.units
    raw = np.ascontiguousarray(
        v.data.ravel(order="F").astype("<c8")
    ).tobytes()
    payload = json.dumps(header, sort_keys=True).encode() + b"\n" + raw
    atomic_write_bytes(path, payload)


def _read_header(blob: bytes, path: str):
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad JSON header ({exc})") from exc
    return header, blob[nl + 1 :]


def read_cvol(path: str) -> ComplexVolume:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, raw = _read_header(blob, path)
    for key in ("shape", "dtype", "layout", "domain"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    if header["dtype"] != "c64le" or header["layout"] != "x-fastest":
        raise FormatError(f"{path}: unsupported dtype/layout")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3:
        raise FormatError(f"{path}: shape must have 3 extents")
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<c8").reshape(shape, order="F")
    return ComplexVolume(data.astype(np.complex128), header["domain"], header.get("units"))


def write_mask(path: str, mask: SamplingMask) -> None:
    spec = mask.spec
    header = {
        "shape": [spec.ny, spec.nz],
        "spec": {
            "Pa": spec.pa,
            "Pb": spec.pb,
            "af": spec.af,
            "calib": list(spec.calib),
            "seed": spec.seed,
        },
    }
    raw = np.ascontiguousarray(mask.plane.astype(np.uint8).ravel(order="F")).tobytes()
    atomic_write_bytes(path, json.dumps(header, sort_keys=True).encode() + b"\n" + raw)


def read_mask(path: str) -> SamplingMask:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, raw = _read_header(blob, path)
    try:
        ny, nz = (int(n) for n in header["shape"])
        s = header["spec"]
        spec = MaskSpec(
            ny=ny,
            nz=nz,
            af=float(s["af"]),
            pa=float(s["Pa"]),
            pb=float(s["Pb"]),
            calib=tuple(int(c) for c in s["calib"]),
            seed=int(s["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad mask header ({exc})") from exc
    if len(raw) != ny * nz:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {ny * nz}")
    plane = np.frombuffer(raw, dtype=np.uint8).reshape((ny, nz), order="F")
    if np.any(plane > 1):
        raise FormatError(f"{path}: mask bytes must be 0/1")
    return SamplingMask(plane.astype(bool), spec)


def mask_for_af(
    ny: int,
    nz: int,
    af: float,
    seed: int = 0,
    calib: tuple[int, int] = (6, 3),
    pa: float | None = None,
    pb: float | None = None,
) -> SamplingMask:
    """Convenience constructor using the stock (pa, pb) table for common AFs."""
    if pa is None or pb is None:
        try:
            table_pa, table_pb = AF_PDF_PARAMS[int(af)]
        except (KeyError, ValueError):
            raise ValidationError(
                f"no stock pdf parameters for af={af}; pass pa and pb explicitly"
            ) from None
        pa = table_pa if pa is None else pa
        pb = table_pb if pb is None else pb
    spec = MaskSpec(ny=ny, nz=nz, af=af, pa=pa, pb=pb, calib=calib, seed=seed)
    return realize_mask(spec)
