"""Reference implementations used by the ``oracle`` and ``gradcheck`` suites.

Each oracle recomputes a quantity the slow, obvious way so the fast code can
be checked against it.
"""
from __future__ import annotations

import time

import numpy as np

from . import numerics as nx
from .cf import CFConfig, cf_learn, gaussian_label
from .convgru import UpdaterNet, gru_step, init_layer
from .geometry import box_center, crop_patch, crop_scale_factor
from .losses import anchor_loss, classification_loss, label_map, total_loss
from .numerics import GradTape, Tensor


# ---------------------------------------------------------------------------
# correlation filter

def dense_cf(x, y, reg):
    """Ridge regression over explicit circular shifts: (X^T X + reg I)^-1 X^T y.

    Row k of X is the base sample shifted by k (``x[p + k]``), so that the
    filter's response to shift k approximates ``y[k]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    m, _, d = x.shape
    rows = [np.roll(x, (-a, -b), axis=(0, 1)).ravel() for a in range(m) for b in range(m)]
    X = np.array(rows)
    A = X.T @ X + reg * np.eye(m * m * d)
    return np.linalg.solve(A, X.T @ np.asarray(y, dtype=np.float64).ravel()).reshape(m, m, d)


def per_frequency_cf(x, y, reg):
    """Solve the d x d normal equations independently at every frequency."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    m, _, d = x.shape
    xf = np.fft.fft2(x, axes=(0, 1))
    yf = np.fft.fft2(np.asarray(y, dtype=np.float64))
    wf = np.zeros_like(xf)
    for i in range(m):
        for j in range(m):
            a = xf[i, j]
            # response at this frequency is sum_c conj(w_c) a_c; minimize |a^T u - y|^2 + reg|u|^2
            u = np.linalg.solve(np.outer(a.conj(), a) + reg * np.eye(d), a.conj() * yf[i, j])
            wf[i, j] = u.conj()
    return np.fft.ifft2(wf, axes=(0, 1)).real


def cf_suite(instances=50, size=8, channels=(1, 2, 3), seed=0, rtol=1e-5):
    rng = np.random.default_rng(seed)
    records = []
    t0 = time.perf_counter()
    for i in range(instances):
        x = rng.standard_normal((size, size))
        reg = float(rng.uniform(1e-3, 1.0))
        cfg = CFConfig(reg=reg)
        y = gaussian_label(size, cfg.bandwidth(size))
        w = cf_learn(Tensor(x, dtype=np.float64), cfg).data[:, :, 0]
        err = nx.relative_error(w, dense_cf(x, y, reg)[:, :, 0])
        records.append({"suite": "cf", "case": f"single/{i}", "error": err, "ok": err <= rtol})
    for d in channels[1:]:
        for i in range(instances // 5):
            x = rng.standard_normal((size, size, d))
            reg = float(rng.uniform(1e-3, 1.0))
            cfg = CFConfig(reg=reg)
            y = gaussian_label(size, cfg.bandwidth(size))
            w = cf_learn(Tensor(x, dtype=np.float64), cfg).data
            err = nx.relative_error(w, per_frequency_cf(x, y, reg))
            records.append({"suite": "cf", "case": f"d{d}/{i}", "error": err, "ok": err <= rtol})
    records.append({"suite": "cf", "case": "runtime", "error": time.perf_counter() - t0,
                    "ok": True})
    return records


# ---------------------------------------------------------------------------
# gradients

def _sq(t):
    return nx.sum_all(nx.mul(t, t))


def _weighted(w):
    w = Tensor(w, dtype=np.float64)
    return lambda t: nx.sum_all(nx.mul(t, w))


def gradient_cases(rng):
    """(name, fn, arrays) triples; fn maps Tensors to a scalar Tensor."""
    r = rng.standard_normal
    sh = (4, 4, 3)
    wsh = _weighted(r(sh))
    cases = [
        ("add", lambda a, b: wsh(nx.add(a, b)), [r(sh), r(sh)]),
        ("sub", lambda a, b: wsh(nx.sub(a, b)), [r(sh), r(sh)]),
        ("mul", lambda a, b: wsh(nx.mul(a, b)), [r(sh), r(sh)]),
        ("scale", lambda a: wsh(nx.scale(a, -1.7)), [r(sh)]),
        ("sigmoid", lambda a: wsh(nx.sigmoid(a)), [r(sh)]),
        ("tanh", lambda a: wsh(nx.tanh(a)), [r(sh)]),
        ("softplus", lambda a: wsh(nx.softplus(a)), [3 * r(sh)]),
        ("sum_all", lambda a: _sq(nx.scale(nx.sum_all(a), 0.3)), [r(sh)]),
        ("mean", lambda a: _sq(nx.mean(a)), [r(sh)]),
    ]
    wc = _weighted(r((4, 4, 5)))
    cases.append(("concat", lambda a, b: wc(nx.concat([a, b], axis=-1)), [r(sh), r((4, 4, 2))]))
    wx = _weighted(r((4, 4)))
    cases.append(("xcorr_valid", lambda s, k: wx(nx.xcorr_valid(s, k)),
                  [r((7, 7, 2)), r((4, 4, 2))]))
    wcv = _weighted(r((5, 5, 3)))
    cases.append(("conv2d_same", lambda x, w: wcv(nx.conv2d_same(x, w)),
                  [r((5, 5, 2)), r((3, 3, 2, 3))]))
    wln = _weighted(r((3, 3, 4)))
    cases.append(("layer_norm", lambda x, g, o: wln(nx.layer_norm(x, g, o)),
                  [r((3, 3, 4)), r(4), r(4)]))
    y = (rng.random((4, 4)) < 0.3).astype(np.float64)
    cases.append(("classification_loss", lambda t, z: classification_loss(t, z, y),
                  [0.5 * r((3, 3, 2)), r((6, 6, 2))]))
    cases.append(("reshape", lambda a: wsh(nx.reshape(nx.reshape(a, (6, 8)), sh)), [r(sh)]))
    cases.append(("standardized_loss",
                  lambda t, z: classification_loss(t, z, y, 1.5, -2.0, standardize=True),
                  [0.5 * r((3, 3, 2)), r((6, 6, 2))]))
    cases.append(("anchor_loss", lambda t, t1: anchor_loss(t, t1), [r((3, 3, 2)), r((3, 3, 2))]))
    cases.append(("total_loss", lambda t, z, t1: total_loss(t, z, y, t1, 0.2)[0],
                  [0.5 * r((3, 3, 2)), r((6, 6, 2)), r((3, 3, 2))]))
    cases.append(_gru_case(rng))
    cases.append(_unrolled_case(rng))
    return cases


def _layer_arrays(rng, cin, hidden, size):
    layer = init_layer(rng, cin, hidden, size, dtype=np.float64)
    arrays = {k: np.array(v.data) for k, v in vars(layer).items()}
    # move LN gains/offsets and biases off their neutral init so every path is exercised
    for k in arrays:
        if k[0] in "bgo":
            arrays[k] = arrays[k] + 0.3 * rng.standard_normal(arrays[k].shape)
    return arrays


def _gru_case(rng):
    size, cin, hid = 3, 2, 3
    arrays = _layer_arrays(rng, cin, hid, size)
    names = list(arrays)
    w = _weighted(rng.standard_normal((size, size, hid)))

    def fn(h, u, *ps):
        from .convgru import ConvGRUParams
        params = ConvGRUParams(**dict(zip(names, ps)))
        return w(gru_step(params, h, u))

    return ("gru_step", fn, [0.5 * rng.standard_normal((size, size, hid)),
                             rng.standard_normal((size, size, cin))] + list(arrays.values()))


def _unrolled_case(rng, steps=3):
    """Three steps of a two-layer ConvGRU plus the output convolution."""
    size, cin, hid = 3, 2, 3
    net = UpdaterNet.create(cin, hidden=hid, size=size, num_layers=2,
                            seed=int(rng.integers(1 << 31)), dtype=np.float64)
    named = {k: np.array(v.data) for k, v in net.named_parameters().items()}
    for k in named:
        if k.split(".")[-1][0] in "bgo":
            named[k] = named[k] + 0.3 * rng.standard_normal(named[k].shape)
    names = list(named)
    inputs = [rng.standard_normal((size, size, cin)) for _ in range(steps)]
    w = _weighted(rng.standard_normal((size, size, cin)))

    def fn(*ps):
        tensors = dict(zip(names, ps))
        model = UpdaterNet.from_named(tensors)
        hs = model.initial_state()
        hs = [Tensor(np.zeros(h.shape), dtype=np.float64) for h in hs]
        for u in inputs:
            hs = model.step(hs, Tensor(u, dtype=np.float64))
        return w(model.emit(hs))

    return ("convgru_unrolled_3step", fn, list(named.values()))


def gradient_suite(seeds=range(20), rtol=1e-4, eps=1e-5, max_coords=6):
    records = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, arrays in gradient_cases(rng):
            sub = max_coords if name.startswith(("gru", "convgru")) else None
            try:
                err = nx.gradcheck(fn, arrays, eps=eps, rtol=np.inf, max_coords=sub, seed=seed)
            except nx.NonFiniteError as exc:  # pragma: no cover - reported, not raised
                records.append({"suite": "grad", "case": f"{name}/{seed}", "error": np.inf,
                                "ok": False, "note": str(exc)})
                continue
            records.append({"suite": "grad", "case": f"{name}/{seed}", "error": err,
                            "ok": err <= rtol})
    return records


# ---------------------------------------------------------------------------
# truncated BPTT

def unrolled_gradients(arrays, track, trajectory, lam, interval, windows, extractor,
                       context_area=48.0 ** 2, radius=1.0, residual=True,
                       calibration=(1.0, 0.0, False)):
    """Hand-unrolled reference for train_window.

    ``trajectory[t]`` is the estimated centre after frame t (detections do not
    depend on the parameters, so they are replayed as data). ``windows`` lists
    (start, stop) frame ranges; hidden state and model enter each window as
    constants. ``calibration`` is (scale, bias, standardize) of the classification
    loss. Returns one {name: grad} dict per window.
    """
    ext = extractor
    k = ext.n - ext.m + 1

    def scale(box):
        return crop_scale_factor(box[2], box[3], context_area)

    cx, cy = box_center(track.boxes[0])
    x1 = ext.extract(crop_patch(track.frames[0], cx, cy, scale(track.boxes[0]),
                                ext.target_input_size))
    theta1 = x1
    hidden = None
    theta = theta1
    count = 0
    out = []
    for start, stop in windows:
        tensors = {name: Tensor(a, trainable=True, name=name, dtype=a.dtype)
                   for name, a in arrays.items()}
        net = UpdaterNet.from_named(tensors, residual)
        losses = []
        with GradTape() as tape:
            h = hidden if hidden is not None else net.initial_state()
            th = theta
            for t in range(start, stop):
                if t == 0:
                    h = _compose(net, h, theta1)
                    count = 1
                    continue
                prev = trajectory[t - 1]
                s_prev = scale(track.boxes[t - 1])
                z = ext.extract(crop_patch(track.frames[t], prev[0], prev[1], s_prev,
                                           ext.search_input_size))
                gx, gy = box_center(track.boxes[t])
                shift = ((gy - prev[1]) * s_prev / ext.cell, (gx - prev[0]) * s_prev / ext.cell)
                y = label_map(k, shift, radius)
                losses.append(total_loss(th, z, y, theta1, lam, *calibration)[0])
                cur = trajectory[t]
                xb = ext.extract(crop_patch(track.frames[t], cur[0], cur[1], scale(track.boxes[t]),
                                            ext.target_input_size))
                h = _compose(net, h, xb)
                count += 1
                if count >= interval:
                    th = net.model(h, theta1)
                    count = 0
            if losses:
                total = losses[0]
                for extra in losses[1:]:
                    total = nx.add(total, extra)
                total = nx.scale(total, 1.0 / len(losses))
                grads = tape.backward(total) if tape.watches(total) else {}
            else:
                grads = {}
        out.append({name: np.asarray(grads.get(p, np.zeros_like(p.data)))
                    for name, p in tensors.items()})
        hidden = [hh.detach() for hh in h]
        theta = th.detach()
    return out


def _compose(net, hs, u):
    """Layer-by-layer gru_step composition (no dropout)."""
    new = []
    x = u
    for params, h in zip(net.layers, hs):
        x = gru_step(params, h, x)
        new.append(x)
    return new


def bptt_suite(seed=0, frames=4, unroll=2, interval=1, tol=1e-6):
    """train_window against the hand-unrolled oracle: truncated (``unroll``) and full."""
    from .features import FeatureExtractor
    from .metatrain import TrainConfig, Track, WindowState, train_window
    from .synthdata import SynthConfig, generate_sequence

    ext = FeatureExtractor()
    seq = generate_sequence(SynthConfig(seed=seed, length=frames))
    track = Track(seq.name, seq.frames, seq.boxes)
    net = UpdaterNet.create(ext.d, hidden=4, size=ext.m, seed=seed)
    net.residual = True  # random output weights, residual path exercised
    arrays = {k: np.array(v.data) for k, v in net.named_parameters().items()}
    records = []
    for label, h in (("truncated", unroll), ("full", frames)):
        cfg = TrainConfig(unroll=h, interval=interval, buckets=(h,), dropout=0.0, lam=0.2,
                          calibrate=False, resp_scale=1.7, resp_bias=-4.0)
        state = WindowState()
        results = []
        while state.t < frames:
            res = train_window(net, track, state, cfg, ext)
            results.append(res)
            state = res.state
        traj = [c for r in results for c in r.trajectory]
        windows = [(i, min(i + h, frames)) for i in range(0, frames, h)]
        ref = unrolled_gradients(arrays, track, traj, cfg.lam, interval, windows, ext,
                                 calibration=(cfg.resp_scale, cfg.resp_bias, cfg.standardize))
        worst = 0.0
        exact = True
        for res, gref in zip(results, ref):
            for name, g in res.grads.items():
                worst = max(worst, nx.relative_error(g, gref[name]))
                exact = exact and np.array_equal(np.asarray(g, dtype=np.float32),
                                                 np.asarray(gref[name], dtype=np.float32))
        records.append({"suite": "bptt", "case": f"{label}/H={h}/seed={seed}", "error": worst,
                        "ok": (exact if label == "full" else worst <= tol), "exact": exact})
    return records
