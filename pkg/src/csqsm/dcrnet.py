"""Complex-valued residual network with a data-consistency layer.

The network maps a zero-filled complex slice (N,1,H,W) to a de-aliased
slice of the same size: one input layer (complex conv + per-part BN +
per-part ReLU), five residual blocks of two convolutions each, an output
convolution with a skip connection from the input, and a k-space
data-consistency blend with a learnable nonnegative weight.

Everything runs on numpy arrays in double precision with a hand-rolled
reverse-mode pass: each layer caches what its backward needs, gradients
accumulate layer by layer in reverse order, and complex parameters are
treated as independent real/imaginary planes.

The complex convolution supports two mixing rules:

* ``"symmetric"`` (default): Yr = Xr*Wr + Xi*Wi, Yi = Xr*Wi + Xi*Wr
* ``"complex"``:             Yr = Xr*Wr - Xi*Wi, Yi = Xr*Wi + Xi*Wr

The symmetric rule couples the planes through the same two additions in
both outputs; the alternative is the genuine complex product.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError
from .kspace import atomic_write_bytes, fft2c, ifft2c

__all__ = [
    "ComplexConv2d",
    "ComplexBatchNorm",
    "ComplexReLU",
    "DataConsistency",
    "DcrNet",
    "TrainConfig",
    "Adam",
    "complex_conv2d",
    "complex_relu",
    "dc_blend",
    "add_noise",
    "mse_loss",
    "mse_loss_and_grad",
    "train_toy",
    "save_weights",
    "load_weights",
]

MIXING_RULES = ("symmetric", "complex")


def _as_nchw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 4:
        raise ValidationError("expected a (batch, channel, H, W) array")
    return x


# ---------------------------------------------------------------------------
# Real convolution primitive (stride 1, zero padding, "same" output)
# ---------------------------------------------------------------------------

def _conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True)


def _conv2d_grad_w(x: np.ndarray, gy: np.ndarray, kshape) -> np.ndarray:
    kh, kw = kshape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("nchwuv,nohw->ocuv", win, gy, optimize=True)


def _conv2d_grad_x(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv2d(gy, w_t)


def _snap_f32(a: np.ndarray) -> np.ndarray:
    # keep parameters exactly representable in the float32 weights format
    return a.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class ComplexConv2d:
    """Complex convolution as four real convolutions plus a complex bias."""

    def __init__(self, c_in, c_out, ksize=3, rng=None, init_std=0.01,
                 mixing="symmetric"):
        if mixing not in MIXING_RULES:
            raise ValidationError(f"mixing must be one of {MIXING_RULES}")
        if ksize % 2 == 0:
            raise ValidationError("kernel size must be odd")
        self.mixing = mixing
        shape = (c_out, c_in, ksize, ksize)
        if rng is None:
            self.wr = np.zeros(shape)
            self.wi = np.zeros(shape)
            self.br = np.zeros(c_out)
            self.bi = np.zeros(c_out)
        else:
            self.wr = _snap_f32(rng.normal(0.0, init_std, shape))
            self.wi = _snap_f32(rng.normal(0.0, init_std, shape))
            self.br = _snap_f32(rng.normal(0.0, init_std, c_out))
            self.bi = _snap_f32(rng.normal(0.0, init_std, c_out))
        self.zero_grad()
        self._x = None

    def zero_grad(self):
        self.gwr = np.zeros_like(self.wr)
        self.gwi = np.zeros_like(self.wi)
        self.gbr = np.zeros_like(self.br)
        self.gbi = np.zeros_like(self.bi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_nchw(x)
        if x.shape[1] != self.wr.shape[1]:
            raise ValidationError(
                f"input has {x.shape[1]} channels, kernel expects {self.wr.shape[1]}"
            )
        self._x = x
        xr, xi = x.real, x.imag
        rr = _conv2d(xr, self.wr)
        ii = _conv2d(xi, self.wi)
        ri = _conv2d(xr, self.wi)
        ir = _conv2d(xi, self.wr)
        if self.mixing == "symmetric":
            yr = rr + ii
        else:
            yr = rr - ii
        yi = ri + ir
        yr += self.br[None, :, None, None]
        yi += self.bi[None, :, None, None]
        return yr + 1j * yi

    def backward(self, gy: np.ndarray) -> np.ndarray:
        xr, xi = self._x.real, self._x.imag
        gr, gi = gy.real, gy.imag
        ksh = self.wr.shape[2:]
        self.gbr += gr.sum(axis=(0, 2, 3))
        self.gbi += gi.sum(axis=(0, 2, 3))
        if self.mixing == "symmetric":
            self.gwr += _conv2d_grad_w(xr, gr, ksh) + _conv2d_grad_w(xi, gi, ksh)
            self.gwi += _conv2d_grad_w(xi, gr, ksh) + _conv2d_grad_w(xr, gi, ksh)
            gxr = _conv2d_grad_x(gr, self.wr) + _conv2d_grad_x(gi, self.wi)
            gxi = _conv2d_grad_x(gr, self.wi) + _conv2d_grad_x(gi, self.wr)
        else:
            self.gwr += _conv2d_grad_w(xr, gr, ksh) + _conv2d_grad_w(xi, gi, ksh)
            self.gwi += _conv2d_grad_w(xr, gi, ksh) - _conv2d_grad_w(xi, gr, ksh)
            gxr = _conv2d_grad_x(gr, self.wr) + _conv2d_grad_x(gi, self.wi)
            gxi = _conv2d_grad_x(gi, self.wr) - _conv2d_grad_x(gr, self.wi)
        return gxr + 1j * gxi


class ComplexBatchNorm:
    """Per-channel batch normalization of the real and imaginary planes.

    The affine parameters start at identity (scale 1, offset 0) so that
    freshly initialized networks keep unit-scale activations.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.9):
        self.eps = eps
        self.momentum = momentum
        self.gr = np.ones(channels)
        self.gi = np.ones(channels)
        self.betar = np.zeros(channels)
        self.betai = np.zeros(channels)
        self.rm_r = np.zeros(channels)
        self.rm_i = np.zeros(channels)
        self.rv_r = np.ones(channels)
        self.rv_i = np.ones(channels)
        self.zero_grad()
        self._cache = None

    def zero_grad(self):
        self.ggr = np.zeros_like(self.gr)
        self.ggi = np.zeros_like(self.gi)
        self.gbetar = np.zeros_like(self.betar)
        self.gbetai = np.zeros_like(self.betai)

    def _plane_forward(self, x, gamma, beta, rm, rv, train):
        if train:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm *= self.momentum
            rm += (1.0 - self.momentum) * mu
            rv *= self.momentum
            rv += (1.0 - self.momentum) * var
        else:
            mu, var = rm, rv
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return y, (xhat, inv, train)

    @staticmethod
    def _plane_backward(gy, gamma, cache):
        xhat, inv, train = cache
        gbeta = gy.sum(axis=(0, 2, 3))
        ggamma = (gy * xhat).sum(axis=(0, 2, 3))
        gxhat = gy * gamma[None, :, None, None]
        if train:
            m1 = gxhat.mean(axis=(0, 2, 3))[None, :, None, None]
            m2 = (gxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            gx = inv[None, :, None, None] * (gxhat - m1 - xhat * m2)
        else:
            gx = inv[None, :, None, None] * gxhat
        return gx, ggamma, gbeta

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        x = _as_nchw(x)
        yr, cr = self._plane_forward(x.real, self.gr, self.betar,
                                     self.rm_r, self.rv_r, train)
        yi, ci = self._plane_forward(x.imag, self.gi, self.betai,
                                     self.rm_i, self.rv_i, train)
        self._cache = (cr, ci)
        return yr + 1j * yi

    def backward(self, gy: np.ndarray) -> np.ndarray:
        cr, ci = self._cache
        gxr, ggr, gbr = self._plane_backward(gy.real, self.gr, cr)
        gxi, ggi, gbi = self._plane_backward(gy.imag, self.gi, ci)
        self.ggr += ggr
        self.gbetar += gbr
        self.ggi += ggi
        self.gbetai += gbi
        return gxr + 1j * gxi


class ComplexReLU:
    """ReLU applied independently to the real and imaginary planes."""

    def __init__(self):
        self._mr = None
        self._mi = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mr = x.real > 0
        self._mi = x.imag > 0
        return x.real * self._mr + 1j * (x.imag * self._mi)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy.real * self._mr + 1j * (gy.imag * self._mi)


def complex_relu(x: np.ndarray) -> np.ndarray:
    """Functional form of :class:`ComplexReLU`."""
    x = np.asarray(x, dtype=np.complex128)
    return np.maximum(x.real, 0.0) + 1j * np.maximum(x.imag, 0.0)


def complex_conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
                   mixing: str = "symmetric") -> np.ndarray:
    """One-off complex convolution with an explicit complex kernel.

    ``kernel`` has shape (C_out, C_in, kh, kw) with odd kh, kw; zero padding
    keeps the spatial size.
    """
    kernel = np.asarray(kernel, dtype=np.complex128)
    if kernel.ndim != 4 or kernel.shape[2] % 2 == 0 or kernel.shape[3] % 2 == 0:
        raise ValidationError("kernel must be (C_out, C_in, odd, odd)")
    layer = ComplexConv2d(kernel.shape[1], kernel.shape[0],
                          ksize=kernel.shape[2], mixing=mixing)
    layer.wr = kernel.real.copy()
    layer.wi = kernel.imag.copy()
    if bias is not None:
        bias = np.asarray(bias, dtype=np.complex128).reshape(kernel.shape[0])
        layer.br = bias.real.copy()
        layer.bi = bias.imag.copy()
    return layer.forward(x)


def _softplus(r: float) -> float:
    return float(np.logaddexp(0.0, r))


def _sigmoid(r: float) -> float:
    return float(1.0 / (1.0 + np.exp(-r)))


def dc_blend(y_img: np.ndarray, x0_kspace: np.ndarray, mask: np.ndarray,
             lam: float) -> np.ndarray:
    """k-space data-consistency blend of a network output with measured data.

    Off the sampling set the network k-space passes through untouched; on
    it the two are mixed as (lam * measured + network) / (1 + lam).
    """
    y_k = fft2c(y_img)
    blended = np.where(mask, (lam * x0_kspace + y_k) / (1.0 + lam), y_k)
    return ifft2c(blended)


class DataConsistency:
    """Learnable data-consistency layer; weight = softplus(rho) >= 0."""

    def __init__(self, init_lam: float = 1.0):
        # softplus^{-1}(lam)
        self.rho = np.array([float(np.log(np.expm1(init_lam)))])
        self.zero_grad()
        self._cache = None

    def zero_grad(self):
        self.grho = np.zeros_like(self.rho)

    @property
    def lam(self) -> float:
        return _softplus(self.rho[0])

    def forward(self, y_img: np.ndarray, x0_kspace: np.ndarray,
                mask: np.ndarray) -> np.ndarray:
        lam = self.lam
        y_k = fft2c(y_img)
        blended = np.where(mask, (lam * x0_kspace + y_k) / (1.0 + lam), y_k)
        self._cache = (y_k, x0_kspace, mask, lam)
        return ifft2c(blended)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        y_k, x0_k, mask, lam = self._cache
        g_k = fft2c(gy)
        d_lam = (x0_k - y_k) / (1.0 + lam) ** 2
        glam = float(np.sum((np.conj(g_k) * d_lam).real * mask))
        self.grho[0] += glam * _sigmoid(self.rho[0])
        g_y6k = np.where(mask, g_k / (1.0 + lam), g_k)
        return ifft2c(g_y6k)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class _Block:
    def __init__(self, channels, rng, init_std, mixing):
        self.conv1 = ComplexConv2d(channels, channels, 3, rng, init_std, mixing)
        self.bn1 = ComplexBatchNorm(channels)
        self.relu1 = ComplexReLU()
        self.conv2 = ComplexConv2d(channels, channels, 3, rng, init_std, mixing)
        self.bn2 = ComplexBatchNorm(channels)
        self.relu2 = ComplexReLU()

    def forward(self, x, train):
        f = self.relu1.forward(self.bn1.forward(self.conv1.forward(x), train))
        a = f + x
        return self.relu2.forward(self.bn2.forward(self.conv2.forward(a), train))

    def backward(self, gy):
        ga = self.conv2.backward(self.bn2.backward(self.relu2.backward(gy)))
        gx_skip = ga
        gx_path = self.conv1.backward(self.bn1.backward(self.relu1.backward(ga)))
        return gx_skip + gx_path


class DcrNet:
    """Residual de-aliasing network for complex slices.

    The stock architecture is 5 residual blocks of 64 channels; smaller
    configurations exist for gradient checking and toy training.
    """

    def __init__(self, blocks: int = 5, channels: int = 64, seed: int = 0,
                 init_std: float = 0.01, mixing: str = "symmetric"):
        if blocks < 1 or channels < 1:
            raise ValidationError("blocks and channels must be positive")
        rng = np.random.Generator(np.random.Philox(key=seed))
        self.n_blocks = blocks
        self.channels = channels
        self.mixing = mixing
        self.input_conv = ComplexConv2d(1, channels, 3, rng, init_std, mixing)
        self.input_bn = ComplexBatchNorm(channels)
        self.input_relu = ComplexReLU()
        self.blocks = [_Block(channels, rng, init_std, mixing) for _ in range(blocks)]
        self.output_conv = ComplexConv2d(channels, 1, 3, rng, init_std, mixing)
        self.dc = DataConsistency(init_lam=1.0)
        self._x0 = None
        self._used_dc = False

    # -- parameter plumbing ------------------------------------------------

    def _layer_params(self):
        yield "input.conv", self.input_conv
        yield "input.bn", self.input_bn
        for i, blk in enumerate(self.blocks, start=1):
            yield f"block{i}.conv1", blk.conv1
            yield f"block{i}.bn1", blk.bn1
            yield f"block{i}.conv2", blk.conv2
            yield f"block{i}.bn2", blk.bn2
        yield "output.conv", self.output_conv

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Ordered (name, array) pairs; complex tensors appear as two planes."""
        out = []
        for name, layer in self._layer_params():
            if isinstance(layer, ComplexConv2d):
                out += [
                    (f"{name}.kernel:real", layer.wr),
                    (f"{name}.kernel:imag", layer.wi),
                    (f"{name}.bias:real", layer.br),
                    (f"{name}.bias:imag", layer.bi),
                ]
            else:
                out += [
                    (f"{name}.scale:real", layer.gr),
                    (f"{name}.scale:imag", layer.gi),
                    (f"{name}.offset:real", layer.betar),
                    (f"{name}.offset:imag", layer.betai),
                ]
        out.append(("dc.rho:real", self.dc.rho))
        return out

    def gradients(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self._layer_params():
            if isinstance(layer, ComplexConv2d):
                out += [
                    (f"{name}.kernel:real", layer.gwr),
                    (f"{name}.kernel:imag", layer.gwi),
                    (f"{name}.bias:real", layer.gbr),
                    (f"{name}.bias:imag", layer.gbi),
                ]
            else:
                out += [
                    (f"{name}.scale:real", layer.ggr),
                    (f"{name}.scale:imag", layer.ggi),
                    (f"{name}.offset:real", layer.gbetar),
                    (f"{name}.offset:imag", layer.gbetai),
                ]
        out.append(("dc.rho:real", self.dc.grho))
        return out

    def running_stats(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self._layer_params():
            if isinstance(layer, ComplexBatchNorm):
                out += [
                    (f"{name}.running_mean:real", layer.rm_r),
                    (f"{name}.running_mean:imag", layer.rm_i),
                    (f"{name}.running_var:real", layer.rv_r),
                    (f"{name}.running_var:imag", layer.rv_i),
                ]
        return out

    def zero_grad(self):
        for _, layer in self._layer_params():
            layer.zero_grad()
        self.dc.zero_grad()

    # -- forward / backward -------------------------------------------------

    def forward(self, x0: np.ndarray, x0_kspace: np.ndarray | None = None,
                mask: np.ndarray | None = None, train: bool = False) -> np.ndarray:
        x0 = _as_nchw(x0)
        if x0.shape[1] != 1:
            raise ValidationError("network input must be single-channel")
        if mask is not None and x0_kspace is None:
            raise ValidationError("data consistency needs the measured k-space")
        h = self.input_relu.forward(self.input_bn.forward(
            self.input_conv.forward(x0), train))
        for blk in self.blocks:
            h = blk.forward(h, train)
        y6 = x0 + self.output_conv.forward(h)
        self._x0 = x0
        self._used_dc = mask is not None
        if mask is None:
            return y6
        return self.dc.forward(y6, x0_kspace, mask)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        g = self.dc.backward(gout) if self._used_dc else gout
        gh = self.output_conv.backward(g)
        gx0 = g  # skip connection
        for blk in reversed(self.blocks):
            gh = blk.backward(gh)
        gx0 = gx0 + self.input_conv.backward(
            self.input_bn.backward(self.input_relu.backward(gh)))
        return gx0


# ---------------------------------------------------------------------------
# Loss, noise, optimizer, training
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean |pred - target|^2 over all samples and its gradient wrt pred."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValidationError("loss inputs must have equal shapes")
    diff = pred - target
    loss = float(np.mean((diff * np.conj(diff)).real))
    grad = 2.0 * diff / pred.size
    return loss, grad


def mse_loss_and_grad(model: DcrNet, x0, target, x0_kspace=None, mask=None,
                      train: bool = True):
    """Forward + reverse pass; returns the loss and named parameter gradients."""
    model.zero_grad()
    pred = model.forward(x0, x0_kspace, mask, train=train)
    loss, gpred = mse_loss(pred, np.asarray(target, dtype=np.complex128))
    model.backward(gpred)
    return loss, model.gradients()


def add_noise(x: np.ndarray, sigma_max: float, seed: int) -> np.ndarray:
    """Gaussian noise with a per-sample sigma drawn uniformly from [0, sigma_max].

    Noise is added independently to the real and imaginary planes; the
    batch axis is the sample axis.  sigma_max = 0 is the identity.
    """
    if sigma_max < 0:
        raise ValidationError("sigma_max must be nonnegative")
    x = _as_nchw(x)
    if sigma_max == 0:
        return x.copy()
    rng = np.random.Generator(np.random.Philox(key=seed))
    sigma = rng.uniform(0.0, sigma_max, size=(x.shape[0], 1, 1, 1))
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return x + sigma * noise


@dataclass
class TrainConfig:
    """Optimizer and schedule settings (paper-scale defaults, toy-scale use)."""

    batch: int = 32
    lr_schedule: tuple = ((0.4, 1e-3), (0.4, 1e-4), (0.2, 1e-5))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_std: float = 0.01
    noise_sigma_max: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValidationError("learning rates must be positive")
        if abs(sum(f for f, _ in self.lr_schedule) - 1.0) > 1e-9:
            raise ValidationError("schedule fractions must sum to 1")

    def lr_at(self, step: int, total_steps: int) -> float:
        frac = step / max(total_steps, 1)
        acc = 0.0
        for f, lr in self.lr_schedule:
            acc += f
            if frac < acc:
                return lr
        return self.lr_schedule[-1][1]


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for _, p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: list, lr: float):
        if len(grads) != len(self.params):
            raise ValidationError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, (g for _, g in grads), self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_toy(dataset: list, model: DcrNet, cfg: TrainConfig, steps: int = 200,
              trace_path: str | None = None):
    """Run the Adam schedule at toy scale on (zero-fill, truth, mask) triples.

    Slices are normalized by the maximum zero-fill intensity over the whole
    dataset (targets scaled identically).  Returns (model, loss_history);
    history has one entry per step.  lr = 0 entries are rejected by the
    config, so parameters always move unless gradients vanish.
    """
    if not dataset:
        raise ValidationError("empty training dataset")
    zf = np.stack([np.asarray(z, dtype=np.complex128) for z, _, _ in dataset])
    truth = np.stack([np.asarray(t, dtype=np.complex128) for _, t, _ in dataset])
    planes = np.stack([
        m.plane if hasattr(m, "plane") else np.asarray(m, dtype=bool)
        for _, _, m in dataset
    ])
    scale = np.max(np.abs(zf))
    if scale == 0:
        raise ValidationError("zero-fill inputs are identically zero")
    zf = zf / scale
    truth = truth / scale
    x0 = zf[:, None]
    targets = truth[:, None]
    masks = planes[:, None]
    x0_k = fft2c(x0)

    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    n = len(dataset)
    history = []
    rows = []
    for step in range(steps):
        idx = np.arange(n) if n <= cfg.batch else rng.choice(n, cfg.batch, replace=False)
        xb = x0[idx]
        if cfg.noise_sigma_max > 0:
            xb = add_noise(xb, cfg.noise_sigma_max, seed=cfg.seed + 1 + step)
        loss, grads = mse_loss_and_grad(
            model, xb, targets[idx], x0_k[idx], masks[idx], train=True)
        lr = cfg.lr_at(step, steps)
        opt.step(grads, lr)
        history.append(loss)
        rows.append(f"{step},{lr!r},{loss!r}")
    if trace_path is not None:
        atomic_write_bytes(trace_path,
                           ("step,lr,loss\n" + "\n".join(rows) + "\n").encode())
    return model, history


# ---------------------------------------------------------------------------
# Weights file pair: manifest.json + weights.bin
# ---------------------------------------------------------------------------

def _tensor_entries(model: DcrNet):
    for name, arr in model.parameters() + model.running_stats():
        base, part = name.rsplit(":", 1)
        yield base, part, arr


def save_weights(model: DcrNet, path: str) -> None:
    """Write manifest.json plus a raw float32 blob into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for base, part, arr in _tensor_entries(model):
        raw = np.ascontiguousarray(arr.ravel(order="F").astype("<f4")).tobytes()
        tensors.append({
            "name": base,
            "shape": list(arr.shape),
            "dtype": "f32le",
            "offset": offset,
            "part": part,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "arch": "dcrnet",
        "blocks": model.n_blocks,
        "channels": model.channels,
        "tensors": tensors,
    }
    atomic_write_bytes(os.path.join(path, "manifest.json"),
                       json.dumps(manifest, sort_keys=True, indent=1).encode())
    atomic_write_bytes(os.path.join(path, "weights.bin"), b"".join(chunks))


def load_weights(path: str) -> DcrNet:
    """Rebuild a model from a weights directory; strict shape/size checks."""
    try:
        with open(os.path.join(path, "manifest.json"), "rb") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest: {exc}") from exc
    if manifest.get("arch") != "dcrnet":
        raise FormatError(f"unknown arch {manifest.get('arch')!r}")
    blocks = manifest.get("blocks")
    channels = manifest.get("channels")
    if not isinstance(blocks, int) or not isinstance(channels, int):
        raise FormatError("manifest blocks/channels must be integers")
    if blocks < 1 or channels < 1:
        raise ValidationError("manifest declares a non-positive architecture")

    model = DcrNet(blocks=blocks, channels=channels, seed=0)
    expected = {}
    for base, part, arr in _tensor_entries(model):
        expected[(base, part)] = arr

    with open(os.path.join(path, "weights.bin"), "rb") as fh:
        blob = fh.read()

    seen = set()
    total = 0
    for entry in manifest.get("tensors", []):
        key = (entry.get("name"), entry.get("part"))
        if key not in expected:
            raise ValidationError(
                f"tensor {key} does not belong to a {blocks}-block/"
                f"{channels}-channel architecture")
        if key in seen:
            raise FormatError(f"duplicate tensor {key}")
        seen.add(key)
        arr = expected[key]
        if tuple(entry.get("shape", ())) != arr.shape:
            raise ValidationError(
                f"tensor {key} shape {entry.get('shape')} does not match "
                f"architecture shape {list(arr.shape)}")
        if entry.get("dtype") != "f32le":
            raise FormatError(f"tensor {key}: unsupported dtype")
        nbytes = arr.size * 4
        off = entry.get("offset")
        if not isinstance(off, int) or off < 0 or off + nbytes > len(blob):
            raise FormatError(f"tensor {key}: blob range out of bounds")
        vals = np.frombuffer(blob[off: off + nbytes], dtype="<f4")
        arr[...] = vals.astype(np.float64).reshape(arr.shape, order="F")
        total += nbytes
    missing = set(expected) - seen
    if missing:
        raise ValidationError(f"manifest is missing tensors: {sorted(missing)[:4]} ...")
    if total != len(blob):
        raise FormatError(
            f"blob holds {len(blob)} bytes but manifest accounts for {total}")
    return model
