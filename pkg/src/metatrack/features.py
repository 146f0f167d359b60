"""Fixed feature extractors standing in for a trained CNN.

Every extractor maps a square crop of a known pixel size to an ``m x m x d``
tensor; cells are ``cell`` pixels apart, so a search crop of the matching size
yields the ``n x n x d`` map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .numerics import DTYPE, Tensor, conv2d_valid_np

MODES = ("pixel", "gradchan", "fixedconv")


class CropSizeError(ValueError):
    pass


def _pool(img, cell):
    """Block mean over ``cell x cell`` pixels (area resampling at an integer factor)."""
    h, w, c = img.shape
    out = cv2.resize(img, (w // cell, h // cell), interpolation=cv2.INTER_AREA)
    return out.reshape(h // cell, w // cell, c)


@dataclass(frozen=True)
class FeatureExtractor:
    mode: str = "fixedconv"
    m: int = 6
    n: int = 14
    d: int = 8
    cell: int = 8
    kernel: int = 3
    channels: int = 3
    seed: int = 0
    gain: float = 2.0
    weights: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.n < self.m:
            raise ValueError("search feature size must be >= target feature size")
        if self.mode == "pixel" and self.d != self.channels:
            object.__setattr__(self, "d", self.channels)
        if self.mode == "fixedconv" and self.weights is None:
            object.__setattr__(self, "weights", self._make_weights())

    def _make_weights(self):
        rng = np.random.default_rng(self.seed)
        k, c, d = self.kernel, self.channels, self.d
        w = rng.standard_normal((k, k, c, d))
        # zero-mean filters: a flat gray patch maps to exactly zero
        w -= w.mean(axis=(0, 1, 2), keepdims=True)
        w /= np.sqrt((w ** 2).sum(axis=(0, 1, 2), keepdims=True))
        w *= self.gain
        w.setflags(write=False)
        return w

    @property
    def margin(self):
        return self.kernel - 1 if self.mode == "fixedconv" else 0

    def input_size(self, cells):
        return self.cell * (cells + self.margin)

    @property
    def target_input_size(self):
        return self.input_size(self.m)

    @property
    def search_input_size(self):
        return self.input_size(self.n)

    def describe(self):
        return {"mode": self.mode, "m": self.m, "n": self.n, "d": self.d, "cell": self.cell,
                "kernel": self.kernel, "channels": self.channels, "seed": self.seed,
                "gain": self.gain}

    def extract(self, crop):
        """Features of a crop whose side is ``input_size(cells)`` for some cell count."""
        img = np.asarray(crop, dtype=np.float32)
        if img.ndim == 2:
            img = img[:, :, None]
        side = img.shape[0]
        if (img.shape[1] != side or img.shape[2] != self.channels
                or side % self.cell or side // self.cell <= self.margin):
            raise CropSizeError(f"crop of shape {img.shape} does not fit extractor {self.mode}")
        if side not in (self.target_input_size, self.search_input_size):
            raise CropSizeError(f"crop side {side} is neither {self.target_input_size} "
                                f"nor {self.search_input_size}")
        return Tensor._wrap(self._features(img).astype(DTYPE))

    def _features(self, img):
        if self.mode == "pixel":
            f = _pool(img, self.cell)
            mu = f.mean(axis=(0, 1), keepdims=True)
            sd = f.std(axis=(0, 1), keepdims=True)
            return (f - mu) / np.where(sd > 1e-6, sd, 1.0)
        if self.mode == "gradchan":
            return self._gradchan(img)
        x = _pool(img * (1.0 / 127.5) - 1.0, self.cell)
        return np.tanh(conv2d_valid_np(x, self.weights))

    def _gradchan(self, img):
        gray = img.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx) % (2 * np.pi)
        bins = np.minimum((ang * (self.d / (2 * np.pi))).astype(int), self.d - 1)
        chans = np.zeros(gray.shape + (self.d,), dtype=np.float64)
        np.put_along_axis(chans, bins[:, :, None], mag[:, :, None], axis=2)
        f = _pool(chans, self.cell)
        total = f.sum(axis=2, keepdims=True)
        f = f / (total + 1.0)
        return f - f.mean()
