"""Single-sample, multi-channel correlation filter learned in the Fourier domain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, NonFiniteError, Tensor, fft2


@dataclass(frozen=True)
class CFConfig:
    reg: float = 0.01
    sigma: float | None = None  # label bandwidth in cells; None -> m / 10
    crop: int | None = None  # odd output size; None -> no crop

    def __post_init__(self):
        if not self.reg > 0:
            raise ValueError("CF regularization must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("CF label bandwidth must be positive")
        if self.crop is not None and (self.crop < 1 or self.crop % 2 == 0):
            raise ValueError("CF crop size must be a positive odd integer")

    def bandwidth(self, m):
        return self.sigma if self.sigma is not None else m / 10.0


def gaussian_label(size, sigma):
    """Gaussian over circular distances, peak 1 at index (0, 0)."""
    if size < 1:
        raise ValueError("label size must be >= 1")
    idx = np.arange(size)
    dist = np.minimum(idx, size - idx).astype(np.float64)
    d2 = dist[:, None] ** 2 + dist[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def center_crop(w, size):
    m = w.shape[0]
    if size > m:
        raise ValueError(f"crop size {size} exceeds filter size {m}")
    lo = (m - size) // 2
    return w[lo:lo + size, lo:lo + size]


def cf_learn(x, cfg=CFConfig()):
    """Ridge regression over all circular shifts of one m x m x d base sample.

    Per frequency the d-channel system is rank one plus ``reg * I``, so the
    exact solution shares one denominator across channels:
    ``w_c = x_c * y / (sum_c |x_c|**2 + reg)``.
    The filter is returned in the spatial domain (aligned like a template, so
    it can be applied with :func:`numerics.xcorr_valid`), then center-cropped.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if not np.isfinite(arr).all():
        raise NonFiniteError("cf_learn: non-finite input")
    m = arr.shape[0]
    xf = fft2(arr).as_complex()
    yf = np.fft.fft2(gaussian_label(m, cfg.bandwidth(m)))
    denom = (xf.real ** 2 + xf.imag ** 2).sum(axis=2) + cfg.reg
    wf = xf * (yf / denom)[:, :, None]
    w = np.fft.ifft2(wf, axes=(0, 1)).real
    if cfg.crop is not None:
        w = center_crop(w, cfg.crop)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DTYPE
    return Tensor(w, dtype=dtype)


def circular_response(w, x):
    """Responses of filter ``w`` to every circular shift of ``x`` (single or multi-channel).

    ``r[k] = sum_p w[p] x[p + k]`` with wrap-around; shift 0 sits at index (0, 0).
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim == 2:
        w, x = w[:, :, None], x[:, :, None]
    wf = np.fft.fft2(w, axes=(0, 1))
    xf = np.fft.fft2(x, axes=(0, 1))
    return np.fft.ifft2((np.conj(wf) * xf).sum(axis=2)).real

