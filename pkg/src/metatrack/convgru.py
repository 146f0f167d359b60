"""Convolutional GRU cells and the two-layer recurrent core of the learned updater."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DTYPE, ShapeError, Tensor

GATES = ("z", "r", "h")


@dataclass
class ConvGRUParams:
    """One ConvGRU layer: input-path kernels W*, hidden-path kernels U*, bias maps b*,
    and layer-norm gain/offset g*/o* for each gate pre-activation."""

    Wz: Tensor
    Wr: Tensor
    Wh: Tensor
    Uz: Tensor
    Ur: Tensor
    Uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor
    gz: Tensor
    gr: Tensor
    gh: Tensor
    oz: Tensor
    or_: Tensor
    oh: Tensor

    @property
    def hidden(self):
        return self.Uz.shape[-1]

    @property
    def inputs(self):
        return self.Wz.shape[2]

    def named(self, prefix=""):
        return {prefix + k.rstrip("_"): v for k, v in vars(self).items()}

    @classmethod
    def from_named(cls, tensors, prefix=""):
        kw = {}
        for f in cls.__dataclass_fields__:
            kw[f] = tensors[prefix + f.rstrip("_")]
        return cls(**kw)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng, k, cin, cout):
    # orthogonal on the flattened (k*k*cin) x cout matrix
    a = rng.standard_normal((k * k * cin, cout))
    q, r = np.linalg.qr(a if a.shape[0] >= a.shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if a.shape[0] < a.shape[1]:
        q = q.T
    return q.reshape(k, k, cin, cout)


def init_layer(rng, in_channels, hidden, size, k=3, dtype=DTYPE):
    kw = {}
    for g in GATES:
        kw["W" + g] = _uniform(rng, (k, k, in_channels, hidden), k * k * in_channels)
    for g in GATES:
        kw["U" + g] = _orthogonal(rng, k, hidden, hidden)
    for g in GATES:
        kw["b" + g] = np.zeros((size, size, hidden))
    for g in GATES:
        kw["g" + g] = np.ones(hidden)
    kw["oz"], kw["or_"], kw["oh"] = (np.zeros(hidden) for _ in range(3))
    return ConvGRUParams(**{name: Tensor(v, trainable=True, name=name.rstrip("_"), dtype=dtype)
                            for name, v in kw.items()})


def _preact(params, g, u, hr):
    a = nx.conv2d_same(u, getattr(params, "W" + g)) + nx.conv2d_same(hr, getattr(params, "U" + g))
    a = a + getattr(params, "b" + g)
    offset = params.or_ if g == "r" else getattr(params, "o" + g)
    return nx.layer_norm(a, getattr(params, "g" + g), offset)


def gru_step(params, h, u, return_gates=False):
    """Cho-style ConvGRU step; returns the new hidden state.

    z = sig(LN(Wz*u + Uz*h + bz)), r = sig(LN(Wr*u + Ur*h + br)),
    c = tanh(LN(Wh*u + Uh*(r.h) + bh)), h' = h + z.(c - h)
    """
    if h.shape[:2] != u.shape[:2] or h.shape[-1] != params.hidden or u.shape[-1] != params.inputs:
        raise ShapeError(f"gru_step: hidden {h.shape} / input {u.shape} do not fit the layer")
    z = nx.sigmoid(_preact(params, "z", u, h))
    r = nx.sigmoid(_preact(params, "r", u, h))
    c = nx.tanh(_preact(params, "h", u, nx.mul(r, h)))
    h_new = h + nx.mul(z, c - h)
    if return_gates:
        return h_new, (z, r, c)
    return h_new


def stack_step(layers, hs, u, dropout=0.0, rng=None):
    """Advance every layer once; layer i>0 reads layer i-1's new hidden state.

    Dropout on layer inputs is applied only when ``dropout > 0`` and an rng is
    given (training).
    """
    out = []
    x = u
    for params, h in zip(layers, hs):
        if dropout > 0 and rng is not None:
            keep = 1.0 - dropout
            mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
            x = nx.mul(x, Tensor._wrap(mask))
        x = gru_step(params, h, x)
        out.append(x)
    return out


def zero_state(layers, size, dtype=DTYPE):
    return [Tensor._wrap(np.zeros((size, size, p.hidden), dtype=dtype)) for p in layers]


@dataclass
class UpdaterNet:
    """Stacked ConvGRU plus the output convolution that maps the concatenated
    hidden states to a target model.

    With ``residual`` the emitted model is ``theta_1 + out(h)`` and the output
    convolution starts at zero, so an untrained updater reproduces no-update.
    """

    layers: list
    out: Tensor
    residual: bool = False

    @classmethod
    def create(cls, channels, hidden=8, size=6, num_layers=2, seed=0, dtype=DTYPE,
               residual=False):
        rng = np.random.default_rng(seed)
        layers = []
        cin = channels
        for _ in range(num_layers):
            layers.append(init_layer(rng, cin, hidden, size, dtype=dtype))
            cin = hidden
        fan_in = 9 * hidden * num_layers
        w = _uniform(rng, (3, 3, hidden * num_layers, channels), fan_in)
        if residual:
            w = np.zeros_like(w)
        out = Tensor(w, trainable=True, name="out", dtype=dtype)
        return cls(layers, out, residual)

    @property
    def size(self):
        return self.layers[0].bz.shape[0]

    @property
    def channels(self):
        return self.out.shape[-1]

    def named_parameters(self):
        named = {}
        for i, layer in enumerate(self.layers):
            named.update(layer.named(f"layer{i}."))
        named["out"] = self.out
        return named

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    @classmethod
    def from_named(cls, tensors, residual=False):
        n = 0
        while f"layer{n}.Wz" in tensors:
            n += 1
        layers = [ConvGRUParams.from_named(tensors, f"layer{i}.") for i in range(n)]
        return cls(layers, tensors["out"], residual)

    def with_arrays(self, arrays):
        """New net with the same structure and the given named arrays (trainable)."""
        return UpdaterNet.from_named({k: Tensor(v, trainable=True, name=k, dtype=v.dtype)
                                      for k, v in arrays.items()}, self.residual)

    def initial_state(self):
        return zero_state(self.layers, self.size, self.out.dtype)

    def step(self, hs, u, dropout=0.0, rng=None):
        return stack_step(self.layers, hs, u, dropout, rng)

    def emit(self, hs):
        """Raw output convolution of the concatenated hidden states."""
        return nx.conv2d_same(nx.concat(hs, axis=-1), self.out)

    def model(self, hs, theta1):
        """The target model the updater hands to the tracker."""
        out = self.emit(hs)
        return nx.add(theta1, out) if self.residual else out
