"""Target-model losses: normalized logistic classification, anchor, and their blend."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


def label_map(size, shift, radius=1.0):
    """{0,1} label map: cells within ``radius`` of ``shift`` (row, col offset in
    cells from the map center) are positive."""
    c = (size - 1) / 2.0
    rows = np.arange(size)[:, None] - (c + shift[0])
    cols = np.arange(size)[None, :] - (c + shift[1])
    return ((rows ** 2 + cols ** 2) <= radius * radius + 1e-9).astype(np.float32)


def classification_loss(theta, z, y, resp_scale=1.0, resp_bias=0.0, standardize=False):
    """Mean over response cells of the logistic loss of ``theta (x) z`` against y.

    The response enters as ``resp_scale * r + resp_bias``, a fixed calibration;
    with ``standardize`` r is first shifted and scaled to zero mean, unit variance
    over the map, which makes the loss blind to the scale of theta.
    """
    r = nx.xcorr_valid(z, theta)
    if standardize:
        shape = r.shape
        n = r.data.size
        flat = nx.reshape(r, (1, n))
        gain = Tensor._wrap(np.full(n, resp_scale, r.dtype))
        offset = Tensor._wrap(np.full(n, resp_bias, r.dtype))
        r = nx.reshape(nx.layer_norm(flat, gain, offset), shape)
    elif resp_scale != 1.0:
        r = nx.scale(r, resp_scale)
    if resp_bias != 0.0 and not standardize:
        r = nx.add(r, Tensor._wrap(np.full(r.shape, resp_bias, r.dtype)))
    y = nx.as_tensor(y)
    if y.shape != r.shape:
        raise ShapeError(f"label shape {y.shape} does not match response {r.shape}")
    y = Tensor._wrap(y.data.astype(r.dtype))
    # -[y ln s(r) + (1-y) ln(1-s(r))] == softplus(r) - y*r
    return nx.mean(nx.softplus(r) - nx.mul(y, r))


def anchor_loss(theta, theta1):
    diff = nx.sub(theta, theta1)
    return nx.mean(nx.mul(diff, diff))


def total_loss(theta, z, y, theta1, lam, resp_scale=1.0, resp_bias=0.0, standardize=False):
    """(1 - lam) * classification + lam * anchor; also returns the two parts."""
    lc = classification_loss(theta, z, y, resp_scale, resp_bias, standardize)
    la = anchor_loss(theta, theta1)
    return nx.add(nx.scale(lc, 1.0 - lam), nx.scale(la, lam)), lc, la
