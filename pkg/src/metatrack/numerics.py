"""Dense tensors, a gradient tape and the handful of primitives the updater needs.

Tensors hold a numpy array of order <= 4.  Public ops are pure; when a
:class:`GradTape` is active and an op touches a trainable tensor (or a tensor
produced on that tape) the op is recorded together with its adjoint.

Matmul-style primitives accumulate in float64 and cast back to the input
dtype.  FFT convention: forward transform is unnormalized, the inverse carries
the ``1/n**2`` factor (numpy's default).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
MAX_ORDER = 4


class NonFiniteError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Immutable dense array with an optional trainable flag."""

    __slots__ = ("data", "trainable", "name", "__weakref__")

    def __init__(self, data, trainable=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _float_dtype(data))
        if arr.ndim > MAX_ORDER:
            raise ShapeError(f"tensor order {arr.ndim} exceeds {MAX_ORDER}")
        _check_finite(arr, name or "tensor")
        arr.setflags(write=False)
        self.data = arr
        self.trainable = trainable
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        # internal fast path: arr is freshly allocated by an op
        arr = np.asarray(arr)
        _check_finite(arr)
        t = object.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.trainable = False
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Same values, cut from any tape."""
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _float_dtype(data):
    dt = getattr(data, "dtype", None)
    if dt is not None and np.issubdtype(dt, np.floating) and dt.itemsize >= 4:
        return dt
    return DTYPE


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records primitive applications made while the context is open.

    ``backward(loss)`` returns ``{param: grad}`` for every trainable tensor the
    tape saw; a tape can be consumed once.
    """

    def __init__(self):
        self._records = []
        self._watched = {}
        self._params = {}
        self._done = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _is_watched(self, t):
        if t.trainable:
            self._params.setdefault(id(t), t)
            self._watched.setdefault(id(t), t)
            return True
        return id(t) in self._watched

    def watches(self, t):
        """True when ``t`` was produced on this tape from a trainable tensor."""
        return id(t) in self._watched and not t.trainable

    def _record(self, out, parents, adjoint):
        flags = [self._is_watched(p) for p in parents]
        if any(flags):
            self._watched[id(out)] = out
            self._records.append((out, parents, flags, adjoint))

    def backward(self, loss):
        if self._done:
            raise TapeError("backward already called on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._watched or loss.trainable:
            raise TapeError("loss was not produced on this tape")
        self._done = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, flags, adjoint in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = adjoint(g)
            for p, flag, pg in zip(parents, flags, pgrads):
                if not flag or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for key, p in self._params.items():
            g = grads.get(key)
            out[p] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
        self._records.clear()
        return out


def backward(tape, loss):
    return tape.backward(loss)


def _emit(arr, parents, adjoint):
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, parents, adjoint)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def sigmoid(a):
    a = as_tensor(a)
    half = a.dtype.type(0.5)
    s = half * (np.tanh(half * a.data) + 1)
    return _emit(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1 - t * t),))


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(x.dtype.type(0), x)
    half = x.dtype.type(0.5)
    return _emit(out, (a,), lambda g: (g * half * (np.tanh(half * x) + 1),))


def pointwise(op, *args):
    """Dispatch by name, e.g. ``pointwise("add", a, b)``."""
    fns = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "mul": mul, "sub": sub,
           "scale": scale, "softplus": softplus}
    if op not in fns:
        raise ValueError(f"unknown pointwise op {op!r}")
    return fns[op](*args)


# ---------------------------------------------------------------------------
# reductions and reshaping

def sum_all(a):
    a = as_tensor(a)
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    shape, dt = a.shape, a.dtype
    return _emit(total, (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    total = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    shape, dt = a.shape, a.dtype
    return _emit(total, (a,), lambda g: (np.full(shape, g / n, dtype=dt),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    arr = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(arr, tuple(tensors), adjoint)


# ---------------------------------------------------------------------------
# correlation / convolution

def _im2col(xp, k, h, w):
    """Rows of ``k x k x c`` patches (ordered u, v, c) for every valid output site."""
    c = xp.shape[2]
    cols = np.concatenate([xp[u:u + h, v:v + w] for u in range(k) for v in range(k)], axis=2)
    return cols.reshape(h * w, k * k * c)


def xcorr_valid(signal, kernel):
    """Valid cross-correlation of an n x n x d signal with an m x m x d kernel.

    ``out[i, j] = sum_{u,v,c} kernel[u,v,c] * signal[i+u, j+v, c]``
    """
    signal, kernel = as_tensor(signal), as_tensor(kernel)
    if signal.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError("xcorr_valid expects n x n x d signal and m x m x d kernel")
    n, n2, d = signal.shape
    m, m2, dk = kernel.shape
    if n != n2 or m != m2 or d != dk or m > n:
        raise ShapeError(f"xcorr_valid: incompatible shapes {signal.shape} / {kernel.shape}")
    k = n - m + 1
    s64 = signal.data.astype(np.float64)
    w64 = kernel.data.astype(np.float64)
    cols = sliding_window_view(s64, (m, m), axis=(0, 1))  # k,k,d,m,m
    cols = cols.transpose(0, 1, 3, 4, 2).reshape(k * k, m * m * d)
    out = (cols @ w64.reshape(-1)).reshape(k, k).astype(signal.dtype)
    sdt, kdt = signal.dtype, kernel.dtype

    def adjoint(g):
        g64 = g.astype(np.float64).reshape(-1)
        dk_ = (g64 @ cols).reshape(m, m, d).astype(kdt)
        gp = np.pad(g.astype(np.float64), m - 1)
        gw = sliding_window_view(gp, (m, m)).reshape(n * n, m * m)
        kflip = w64[::-1, ::-1, :].reshape(m * m, d)
        ds = (gw @ kflip).reshape(n, n, d).astype(sdt)
        return ds, dk_

    return _emit(out, (signal, kernel), adjoint)


def conv2d_same(x, weight):
    """Zero-padded 'same' correlation: x h x w x cin, weight k x k x cin x cout."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError("conv2d_same expects h x w x cin input and k x k x cin x cout weight")
    h, w, cin = x.shape
    k, k2, wcin, cout = weight.shape
    if k != k2 or k % 2 == 0 or wcin != cin:
        raise ShapeError(f"conv2d_same: incompatible shapes {x.shape} / {weight.shape}")
    p = k // 2
    xp = np.zeros((h + 2 * p, w + 2 * p, cin))
    xp[p:p + h, p:p + w] = x.data
    cols = _im2col(xp, k, h, w)
    w64 = weight.data.astype(np.float64).reshape(k * k * cin, cout)
    out = (cols @ w64).reshape(h, w, cout).astype(x.dtype)
    xdt, wdt = x.dtype, weight.dtype

    def adjoint(g):
        g64 = g.astype(np.float64).reshape(h * w, cout)
        dw = (cols.T @ g64).reshape(k, k, cin, cout).astype(wdt)
        dcols = (g64 @ w64.T).reshape(h, w, k, k, cin)
        dxp = np.zeros((h + 2 * p, w + 2 * p, cin))
        for u in range(k):
            for v in range(k):
                dxp[u:u + h, v:v + w] += dcols[:, :, u, v]
        return dxp[p:p + h, p:p + w].astype(xdt), dw

    return _emit(out, (x, weight), adjoint)


def conv2d_valid_np(x, weight):
    """Untracked valid correlation, x h x w x cin with weight k x k x cin x cout (float64 out)."""
    k, _, cin, cout = weight.shape
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    cols = _im2col(np.asarray(x, dtype=np.float64), k, h, w)
    return (cols @ np.asarray(weight, dtype=np.float64).reshape(-1, cout)).reshape(h, w, cout)


def layer_norm(x, gain, offset, eps=1e-5):
    """Normalize over the channel axis at every spatial site, then gain/offset per channel."""
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    c = x.shape[-1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ShapeError(f"layer_norm: gain/offset must have shape ({c},)")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data.astype(np.float64)
    out = (xhat * gd + offset.data).astype(x.dtype)
    dt = x.dtype

    def adjoint(g):
        g64 = g.astype(np.float64)
        dgain = (g64 * xhat).reshape(-1, c).sum(axis=0)
        doffset = g64.reshape(-1, c).sum(axis=0)
        dxhat = g64 * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(dt), dgain.astype(gain.dtype), doffset.astype(offset.dtype)

    return _emit(out, (x, gain, offset), adjoint)


# ---------------------------------------------------------------------------
# FFT

@dataclass(frozen=True)
class ComplexSpectrum:
    re: np.ndarray
    im: np.ndarray

    @property
    def shape(self):
        return self.re.shape

    def as_complex(self):
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, z):
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def conj(self):
        return ComplexSpectrum(self.re, -self.im)

    def __mul__(self, other):
        return ComplexSpectrum.from_complex(self.as_complex() * other.as_complex())

    def energy(self):
        return float(np.sum(self.re ** 2 + self.im ** 2))


def fft2(x):
    """Unnormalized 2D DFT over the two leading (square) axes, float64 internally."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim < 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"fft2 expects a square array, got shape {arr.shape}")
    _check_finite(arr, "fft2 input")
    return ComplexSpectrum.from_complex(np.fft.fft2(arr.astype(np.float64), axes=(0, 1)))


def ifft2(spec, dtype=DTYPE):
    """Inverse of :func:`fft2` (carries the 1/n**2 factor); returns the real part."""
    z = np.fft.ifft2(spec.as_complex(), axes=(0, 1))
    return Tensor(z.real, dtype=dtype)


# ---------------------------------------------------------------------------
# finite differences

def relative_error(a, b):
    """Norm-wise relative error ``||a-b|| / max(||a||, ||b||)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numerical_gradient(fn, arrays, index, eps=1e-3, coords=None):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``coords`` (flat indices) restricts the check to a subset; other entries stay 0.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    flat = target.reshape(-1)
    grad = np.zeros(target.size)
    for i in (range(target.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(*base)
        flat[i] = orig - eps
        fm = fn(*base)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(target.shape)


def gradcheck(fn, arrays, eps=1e-3, rtol=1e-4, max_coords=None, seed=0):
    """Compare tape gradients of ``fn`` (Tensor -> scalar Tensor) with central differences.

    Runs in float64.  With ``max_coords`` only that many randomly chosen entries
    per input are differenced.  Returns the worst norm-wise relative error over
    all inputs; raises AssertionError when it exceeds ``rtol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [Tensor(a, trainable=True, dtype=np.float64) for a in arrays]
    with GradTape() as tape:
        loss = fn(*params)
    grads = tape.backward(loss)

    def scalar_fn(*arrs):
        return float(fn(*[Tensor(a, dtype=np.float64) for a in arrs]).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, p in enumerate(params):
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.choice(p.data.size, size=max_coords, replace=False))
        num = numerical_gradient(scalar_fn, arrays, i, eps, coords)
        ana = grads[p].reshape(-1)
        if coords is not None:
            err = relative_error(ana[coords], num.reshape(-1)[coords])
        else:
            err = relative_error(ana, num.reshape(-1))
        worst = max(worst, err)
    if worst > rtol:
        raise AssertionError(f"gradient mismatch: relative error {worst:.3e} > {rtol:.1e}")
    return worst
