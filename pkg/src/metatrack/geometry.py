"""Boxes, crop scale normalization and sub-pixel crop extraction.

Boxes are ``(x, y, w, h)`` with a top-left corner in continuous pixel
coordinates: pixel ``i`` covers ``[i, i + 1)``.
"""
from __future__ import annotations

import math

import cv2
import numpy as np


def crop_scale_factor(w, h, area):
    """Scale s with s(w + 2p) * s(h + 2p) = area, context margin p = (w + h) / 4."""
    if not (w > 0 and h > 0):
        raise ValueError(f"non-positive box size {w} x {h}")
    p = (w + h) / 4.0
    return math.sqrt(area) / math.sqrt((w + 2 * p) * (h + 2 * p))


def box_center(box):
    x, y, w, h = box
    return x + w / 2.0, y + h / 2.0


def center_box(cx, cy, w, h):
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def crop_patch(frame, cx, cy, scale, size):
    """``size x size`` crop centred on (cx, cy) after scaling the frame by ``scale``.

    Pixels outside the frame replicate the border.
    """
    inv = 1.0 / scale
    off = (0.5 - size / 2.0) * inv - 0.5
    mat = np.array([[inv, 0.0, cx + off], [0.0, inv, cy + off]])
    return cv2.warpAffine(frame, mat, (size, size), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_REPLICATE)
