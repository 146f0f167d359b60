"""Offline meta-training of the learned updater.

Training tracks the synthetic sequences with the updater in the loop: each
frame is detected with the current model, scored against its groundtruth label
map, and the target crop at the *estimated* position is fed to the updater.
Gradients flow through ``unroll`` frames at a time (truncated BPTT); the
hidden state and model are carried across windows as constants.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckio
from . import numerics as nx
from .convgru import UpdaterNet
from .features import FeatureExtractor
from .geometry import box_center, crop_patch, crop_scale_factor  # noqa: F401 (re-export)
from .losses import label_map, total_loss
from .numerics import GradTape, NonFiniteError, Tensor
from .synthdata import SynthConfig, generate_sequence
from .tracker import TrackerConfig, cosine_window, detect
from .updaters import LearnedUpdater, Projector, TargetModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    unroll: int = 25
    interval: int = 5
    max_span: int = 300
    buckets: tuple = (25, 50, 75, 100, 125, 150)
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    clip_norm: float = 0.0  # 0 disables clipping
    epochs: int = 60
    tracks_per_epoch: int = 64
    min_track: int = 20
    max_track: int = 300
    hidden: int = 8
    layers: int = 2
    residual: bool = True
    # affine response calibration inside the classification loss; with calibrate
    # the trainer fits scale and bias for theta_1 once and stores them here
    calibrate: bool = True
    standardize: bool = True  # response standardized over the map before calibration
    calib_tracks: int = 8
    resp_scale: float = 1.0
    resp_bias: float = 0.0
    dropout: float = 0.1
    label_radius: float = 1.0
    seed: int = 0
    track_seed_base: int = 1_000_000
    checkpoint_every: int = 0  # batches; 0 = only at the end

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.unroll < 1 or self.interval < 1 or self.batch_size < 1:
            raise ValueError("unroll, interval and batch_size must be >= 1")
        if not self.buckets or any(b % self.unroll or b <= 0 for b in self.buckets):
            raise ValueError(f"bucket sizes {self.buckets} must be positive multiples of "
                             f"the unroll length {self.unroll}")
        if tuple(sorted(self.buckets)) != tuple(self.buckets):
            raise ValueError("bucket sizes must be increasing")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.min_track < 2 or self.max_track < self.min_track:
            raise ValueError("need 2 <= min_track <= max_track")
        if self.interval >= self.unroll:
            log.warning("interval %d >= unroll %d: windows without an emission before a loss "
                        "get zero gradient", self.interval, self.unroll)
        if self.resp_scale <= 0 or self.calib_tracks < 1:
            raise ValueError("resp_scale must be > 0 and calib_tracks >= 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["buckets"] = list(self.buckets)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "buckets" in d:
            d["buckets"] = tuple(int(b) for b in d["buckets"])
        return cls(**d)


# ---------------------------------------------------------------------------
# tasks

@dataclass
class Task:
    train: list  # x_bar_1 .. x_bar_{N-1}, target crops at estimated centres
    z: Tensor  # search feature of frame N
    y: np.ndarray  # label map
    boxes: np.ndarray  # groundtruth track


def _shift_cells(target, centre, s, cell):
    """(row, col) offset in response cells of ``target`` seen from a crop at ``centre``."""
    return ((target[1] - centre[1]) * s / cell, (target[0] - centre[0]) * s / cell)


def build_task(frames, boxes, n, positions=None, extractor=None, context_area=48.0 ** 2,
               radius=1.0):
    """First ``n - 1`` frames give target crops at ``positions`` (estimated centres,
    default groundtruth); frame ``n`` gives the search crop centred on position
    ``n - 1`` and a label map at the groundtruth offset."""
    if n < 2:
        raise ValueError("a task needs N >= 2 frames")
    if len(frames) < n or len(boxes) < n:
        raise ValueError(f"sequence of length {min(len(frames), len(boxes))} is shorter than N={n}")
    ext = extractor or FeatureExtractor()
    boxes = np.asarray(boxes, dtype=np.float64)
    if positions is None:
        positions = [box_center(b) for b in boxes[:n]]
    train = []
    for t in range(n - 1):
        s = crop_scale_factor(boxes[t][2], boxes[t][3], context_area)
        cx, cy = positions[t]
        train.append(ext.extract(crop_patch(frames[t], cx, cy, s, ext.target_input_size)))
    w, h = boxes[n - 1][2:]
    s = crop_scale_factor(w, h, context_area)
    cx, cy = positions[n - 2]
    z = ext.extract(crop_patch(frames[n - 1], cx, cy, s, ext.search_input_size))
    k = ext.n - ext.m + 1
    shift = _shift_cells(box_center(boxes[n - 1]), (cx, cy), s, ext.cell)
    return Task(train, z, label_map(k, shift, radius), boxes[:n])


# ---------------------------------------------------------------------------
# truncated BPTT

@dataclass
class Track:
    name: str
    frames: list
    boxes: np.ndarray


@dataclass
class WindowState:
    """Values carried between windows (never gradients)."""

    t: int = 0  # next frame index
    centre: tuple = (0.0, 0.0)
    hidden: list | None = None
    theta: np.ndarray | None = None
    theta1: np.ndarray | None = None
    since_emit: int = 0
    steps: int = 0


@dataclass
class WindowResult:
    grads: dict
    state: WindowState
    loss: float
    lc: float
    la: float
    frames: int
    trajectory: list = field(default_factory=list)  # estimated centres


class _Ctx:
    """Fixed pieces shared by every window of a run."""

    def __init__(self, extractor, projector, tracker_cfg):
        self.ext = extractor
        self.g = projector
        self.tcfg = tracker_cfg
        self.k = extractor.n - extractor.m + 1
        self.window = cosine_window(self.k)


def _crop_scale(box, cfg):
    return crop_scale_factor(box[2], box[3], cfg.context_area)


def train_window(net, track, state, cfg, extractor=None, projector=None, tracker_cfg=None,
                 rng=None):
    """Run frames ``state.t .. state.t + unroll - 1`` of ``track`` and backprop
    the mean per-frame loss through that window only.

    The window starting at frame 0 initializes the updater with the groundtruth
    box (its first timestep is the ingest of theta_1). Returns a
    :class:`WindowResult` whose state holds detached values.
    """
    ctx = _Ctx(extractor or FeatureExtractor(), projector or Projector(),
               tracker_cfg or TrackerConfig(scales=(1.0,)))
    return _window(net, track, state, cfg, ctx, rng)


def _window(net, track, state, cfg, ctx, rng):
    ext = ctx.ext
    n = len(track.frames)
    stop = min(state.t + cfg.unroll, n)
    if state.t >= n:
        raise ValueError("window starts past the end of the track")
    upd = LearnedUpdater(net, cfg.interval, ctx.g, cfg.dropout if rng is not None else 0.0, rng)
    losses, lcs, las, traj = [], [], [], []
    with GradTape() as tape:
        t = state.t
        if t == 0:
            box = track.boxes[0]
            cx, cy = box_center(box)
            s = _crop_scale(box, ctx.tcfg)
            x1 = ext.extract(crop_patch(track.frames[0], cx, cy, s, ext.target_input_size))
            upd.start(x1)
            centre = (cx, cy)
            traj.append(centre)
            t = 1
        else:
            upd.theta1 = Tensor._wrap(state.theta1)
            upd.current = TargetModel(Tensor._wrap(state.theta), "carried", t - 1)
            upd.hidden = [Tensor._wrap(h) for h in state.hidden]
            upd.since_emit = state.since_emit
            upd.steps = state.steps
            centre = state.centre
        theta1 = upd.theta1
        while t < stop:
            box = track.boxes[t]
            s = _crop_scale(track.boxes[t - 1], ctx.tcfg)
            frame = track.frames[t]
            z = ext.extract(crop_patch(frame, centre[0], centre[1], s, ext.search_input_size))
            theta = upd.theta
            det = detect(theta.detach(), [z], ext, ctx.tcfg, ctx.window)
            y = label_map(ctx.k, _shift_cells(box_center(box), centre, s, ext.cell),
                          cfg.label_radius)
            loss, lc, la = total_loss(theta, z, y, theta1, cfg.lam, cfg.resp_scale,
                                        cfg.resp_bias, cfg.standardize)
            losses.append(loss)
            lcs.append(lc.item())
            las.append(la.item())
            step = ext.cell / s
            centre = (centre[0] + det.shift[1] * step, centre[1] + det.shift[0] * step)
            hh, ww = frame.shape[:2]
            centre = (float(np.clip(centre[0], 0.0, ww)), float(np.clip(centre[1], 0.0, hh)))
            traj.append(centre)
            x_bar = ext.extract(crop_patch(frame, centre[0], centre[1],
                                           _crop_scale(box, ctx.tcfg), ext.target_input_size))
            upd.ingest(x_bar)
            if upd.since_emit >= upd.interval:
                upd.current = TargetModel(upd.emit(), "learned", t)
                upd.since_emit = 0
            t += 1
        if losses:
            total = losses[0]
            for extra in losses[1:]:
                total = nx.add(total, extra)
            total = nx.scale(total, 1.0 / len(losses))
            value = total.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss on {track.name} frames "
                                     f"{state.t}..{stop - 1}: lc={lcs} la={las}")
            # with no emission yet the loss does not depend on the parameters
            grads = tape.backward(total) if tape.watches(total) else {}
        else:
            value = 0.0
            grads = {}
    names = net.named_parameters()
    gmap = {k: np.asarray(grads.get(p, np.zeros_like(p.data)), dtype=np.float32)
            for k, p in names.items()}
    new_state = WindowState(stop, centre, [h.data.copy() for h in upd.hidden],
                            upd.theta.data.copy(), upd.theta1.data.copy(), upd.since_emit,
                            upd.steps)
    nl = max(len(lcs), 1)
    return WindowResult(gmap, new_state, value, float(sum(lcs) / nl), float(sum(las) / nl),
                        len(losses), traj)


# ---------------------------------------------------------------------------
# bucketing

@dataclass
class Sample:
    track: int  # index into the track list
    indices: np.ndarray  # frame indices, temporal order


def assign_bucket(length, buckets, max_interval=2, max_span=None, rng=None):
    """Frame indices for one track, or None when a short track is dropped.

    A track at least as long as the smallest bucket gets the largest bucket
    that fits and is subsampled with the widest interval (<= max_interval) the
    track and the maximum span allow, from a random start. Shorter tracks are
    kept with probability ``length / smallest bucket`` and stretched to it by
    repeating frames; otherwise dropped.
    """
    rng = rng if rng is not None else np.random.default_rng()
    bmin = buckets[0]
    if length < 1:
        return None
    if length < bmin:
        if rng.random() >= length / bmin:
            return None
        return (np.arange(bmin) * length) // bmin
    b = max(x for x in buckets if x <= length)
    k = 1
    if b > 1:
        k = max(1, min(max_interval, (length - 1) // (b - 1)))
        if max_span is not None:
            while k > 1 and (b - 1) * k + 1 > max_span:
                k -= 1
    span = (b - 1) * k + 1
    start = int(rng.integers(0, length - span + 1))
    return start + k * np.arange(b)


def bucket_sequences(lengths, buckets, batch_size, rng, max_interval=2, max_span=None):
    """Group tracks into batches of equal length; returns a list of lists of :class:`Sample`."""
    groups = {b: [] for b in buckets}
    for i, n in enumerate(lengths):
        idx = assign_bucket(int(n), buckets, max_interval, max_span, rng)
        if idx is not None:
            groups[len(idx)].append(Sample(i, idx))
    batches = []
    for b in buckets:
        items = groups[b]
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        batches.extend(items[j:j + batch_size] for j in range(0, len(items), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()},
                   {k: np.zeros_like(p, dtype=np.float32) for k, p in params.items()}, 0)


def optimizer_step(params, grads, moments, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=5e-4):
    """Adam with decoupled weight decay; returns (new params, new moments).

    Arithmetic runs in float64 and results are stored as float32.
    """
    t = moments.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        p64 = np.asarray(p, dtype=np.float64)
        m = beta1 * moments.m[k].astype(np.float64) + (1.0 - beta1) * g
        v = beta2 * moments.v[k].astype(np.float64) + (1.0 - beta2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (p64 - lr * upd - lr * weight_decay * p64).astype(np.float32)
        new_m[k] = m.astype(np.float32)
        new_v[k] = v.astype(np.float32)
    return new_p, AdamState(new_m, new_v, t)


def global_norm(grads):
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                               for g in grads.values())))


def clip_grads(grads, max_norm):
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        return {k: (g * f).astype(np.float32) for k, g in grads.items()}, norm
    return grads, norm


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "metatrack-updater"


def make_checkpoint(net, extractor, cfg, step=0, epoch=0, batch=0, adam=None, extra=None):
    tensors = {k: np.asarray(p.data, dtype=np.float32) for k, p in net.named_parameters().items()}
    if adam is not None:
        for k in list(tensors):
            tensors[f"adam.m.{k}"] = adam.m[k]
            tensors[f"adam.v.{k}"] = adam.v[k]
    meta = {"format": CHECKPOINT_FORMAT, "format_version": ckio.VERSION,
            "extractor": extractor.describe(), "train": cfg.to_dict(),
            "step": int(step), "epoch": int(epoch), "batch": int(batch),
            "adam_t": int(adam.t) if adam is not None else 0}
    if extra:
        meta.update(extra)
    return ckio.Checkpoint(tensors, meta)


def split_checkpoint(ckpt):
    """(net, extractor, TrainConfig, AdamState or None, meta) from a checkpoint."""
    meta = ckpt.meta
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ckio.CheckpointError("checkpoint does not hold an updater network")
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
    ext = FeatureExtractor(**meta["extractor"])
    cfg = TrainConfig.from_dict(meta["train"])
    net = UpdaterNet.from_named({k: Tensor(v, trainable=True, name=k, dtype=np.float32)
                                 for k, v in params.items()}, cfg.residual)
    adam = None
    if any(k.startswith("adam.m.") for k in ckpt.tensors):
        adam = AdamState({k: ckpt.tensors[f"adam.m.{k}"] for k in params},
                         {k: ckpt.tensors[f"adam.v.{k}"] for k in params}, meta.get("adam_t", 0))
    return net, ext, cfg, adam, meta


def load_net(path):
    return split_checkpoint(ckio.load(path))[0]


# ---------------------------------------------------------------------------
# training loop

LOG_FIELDS = ["step", "epoch", "batch", "window", "loss", "l_c", "l_a", "grad_norm", "frames"]


def epoch_tracks(cfg, synth, epoch):
    """Seeds and lengths of the synthetic training tracks for one epoch."""
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    lengths = rng.integers(cfg.min_track, cfg.max_track + 1, size=cfg.tracks_per_epoch)
    seeds = cfg.track_seed_base + epoch * cfg.tracks_per_epoch + np.arange(cfg.tracks_per_epoch)
    return [(int(s), int(n)) for s, n in zip(seeds, lengths)]


def _logistic_fit(r, y, iters=50):
    """Newton's method for min mean softplus(a*r+b) - y*(a*r+b) over (a, b)."""
    X = np.stack([r, np.ones_like(r)], axis=1)
    w = np.zeros(2)
    for _ in range(iters):
        q = X @ w
        p = 0.5 * (1.0 + np.tanh(0.5 * q))
        g = X.T @ (p - y) / len(y)
        H = (X * (p * (1.0 - p))[:, None]).T @ X / len(y) + 1e-9 * np.eye(2)
        step = np.linalg.solve(H, g)
        w -= step
        if np.abs(step).max() < 1e-10:
            break
    return float(w[0]), float(w[1])


def fit_response_calibration(cfg, synth=SynthConfig(), extractor=None, tracker_cfg=None,
                             length=60):
    """Scale and bias that make theta_1's responses a calibrated logistic classifier.

    Responses come from search crops centred at the previous groundtruth centre on
    ``cfg.calib_tracks`` synthetic tracks outside the training seed range, standardized
    per map when ``cfg.standardize``. Without a bias the logistic loss rewards
    shrinking theta toward zero, which tracking (scale invariant) does not care about.
    """
    ext = extractor or FeatureExtractor()
    tcfg = tracker_cfg or TrackerConfig(scales=(1.0,))
    k = ext.n - ext.m + 1
    rs, ys = [], []
    for i in range(cfg.calib_tracks):
        seed = cfg.track_seed_base - 1 - i
        seq = generate_sequence(dataclasses.replace(synth, seed=seed, length=length))
        box = seq.boxes[0]
        theta1 = ext.extract(crop_patch(seq.frames[0], *box_center(box), _crop_scale(box, tcfg),
                                        ext.target_input_size))
        for t in range(1, length):
            prev = seq.boxes[t - 1]
            centre, s = box_center(prev), _crop_scale(prev, tcfg)
            z = ext.extract(crop_patch(seq.frames[t], *centre, s, ext.search_input_size))
            r = nx.xcorr_valid(z, theta1).data.astype(np.float64).ravel()
            if cfg.standardize:
                r = (r - r.mean()) / np.sqrt(r.var() + 1e-5)
            rs.append(r)
            y = label_map(k, _shift_cells(box_center(seq.boxes[t]), centre, s, ext.cell),
                          cfg.label_radius)
            ys.append(y.astype(np.float64).ravel())
    a, b = _logistic_fit(np.concatenate(rs), np.concatenate(ys))
    if not a > 0:
        raise ValueError(f"response calibration failed (scale {a})")
    return a, b


def track_loss(net, track, cfg, extractor=None, projector=None, tracker_cfg=None):
    """Frame-weighted mean training loss over a whole track, without dropout."""
    state, total, frames = WindowState(), 0.0, 0
    while state.t < len(track.frames):
        res = train_window(net, track, state, cfg, extractor, projector, tracker_cfg)
        total += res.loss * res.frames
        frames += res.frames
        state = res.state
    return total / max(frames, 1)


def _render_track(synth, seed, length, indices):
    seq = generate_sequence(dataclasses.replace(synth, seed=seed, length=length),
                            f"train{seed}")
    return Track(seq.name, [seq.frames[i] for i in indices], seq.boxes[indices])


def _job(args):
    arrays, track, state, cfg, ctx, rng_key = args
    net = UpdaterNet.from_named({k: Tensor(v, trainable=True, name=k, dtype=np.float32)
                                 for k, v in arrays.items()}, cfg.residual)
    rng = np.random.default_rng(rng_key) if cfg.dropout > 0 else None
    return _window(net, track, state, cfg, ctx, rng)


class Trainer:
    """Runs epochs of bucketed, batched truncated-BPTT training.

    ``threads > 1`` evaluates the tracks of a batch in a process pool; gradients
    are reduced in batch order, so results do not depend on the pool.
    """

    def __init__(self, cfg=TrainConfig(), synth=SynthConfig(), extractor=None, projector=None,
                 tracker_cfg=None, net=None, adam=None, threads=1):
        self.synth = synth
        self.ext = extractor or FeatureExtractor()
        self.ctx = _Ctx(self.ext, projector or Projector(),
                        tracker_cfg or TrackerConfig(scales=(1.0,)))
        if cfg.calibrate:
            a, b = fit_response_calibration(cfg, synth, self.ext, self.ctx.tcfg)
            cfg = dataclasses.replace(cfg, calibrate=False, resp_scale=a, resp_bias=b)
            log.info("response calibration scale=%.4f bias=%.4f", a, b)
        self.cfg = cfg
        self.net = net or UpdaterNet.create(self.ext.d, cfg.hidden, self.ext.m, cfg.layers,
                                            seed=cfg.seed, residual=cfg.residual)
        self.arrays = {k: np.asarray(p.data, dtype=np.float32)
                       for k, p in self.net.named_parameters().items()}
        self.adam = adam or AdamState.zeros(self.arrays)
        self.step = 0
        self.epoch = 0
        self.batch = 0  # next batch within the epoch
        self.threads = threads
        self._pool = None

    @classmethod
    def from_checkpoint(cls, ckpt, synth=SynthConfig(), projector=None, tracker_cfg=None,
                        threads=1, cfg=None):
        net, ext, saved_cfg, adam, meta = split_checkpoint(ckpt)
        tr = cls(cfg or saved_cfg, synth, ext, projector, tracker_cfg, net, adam, threads)
        tr.step, tr.epoch, tr.batch = meta["step"], meta["epoch"], meta["batch"]
        return tr

    def checkpoint(self):
        self._sync_net()
        return make_checkpoint(self.net, self.ext, self.cfg, self.step, self.epoch, self.batch,
                               self.adam, {"synth": dataclasses.asdict(self.synth)})

    def _sync_net(self):
        self.net = UpdaterNet.from_named({k: Tensor(v, trainable=True, name=k, dtype=np.float32)
                                          for k, v in self.arrays.items()}, self.cfg.residual)

    def _map(self, jobs):
        if self.threads > 1:
            if self._pool is None:
                from multiprocessing import get_context
                self._pool = get_context("spawn").Pool(self.threads)
            return self._pool.map(_job, jobs)
        return [_job(j) for j in jobs]

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def plan(self, epoch):
        tracks = epoch_tracks(self.cfg, self.synth, epoch)
        rng = np.random.default_rng([self.cfg.seed, epoch, 2])
        batches = bucket_sequences([n for _, n in tracks], self.cfg.buckets, self.cfg.batch_size,
                                   rng, 2, self.cfg.max_span)
        return tracks, batches

    def train_batch(self, tracks, batch):
        """All windows of one batch; one optimizer step per window. Returns log rows."""
        cfg = self.cfg
        items = [_render_track(self.synth, tracks[s.track][0], tracks[s.track][1], s.indices)
                 for s in batch]
        states = [WindowState() for _ in items]
        length = len(items[0].frames)
        rows = []
        for w in range(math.ceil(length / cfg.unroll)):
            jobs = [(self.arrays, tr, st, cfg, self.ctx, [cfg.seed, self.step, i])
                    for i, (tr, st) in enumerate(zip(items, states))]
            results = self._map(jobs)
            grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.arrays.items()}
            for res in results:
                for k in grads:
                    grads[k] += res.grads[k]
            grads = {k: (g / len(results)).astype(np.float32) for k, g in grads.items()}
            grads, norm = clip_grads(grads, cfg.clip_norm)
            self.arrays, self.adam = optimizer_step(self.arrays, grads, self.adam, cfg.lr,
                                                    cfg.beta1, cfg.beta2, cfg.eps,
                                                    cfg.weight_decay)
            states = [r.state for r in results]
            frames = sum(r.frames for r in results)
            rows.append({"step": self.step, "epoch": self.epoch, "batch": self.batch,
                         "window": w,
                         "loss": float(np.mean([r.loss for r in results])),
                         "l_c": float(np.mean([r.lc for r in results])),
                         "l_a": float(np.mean([r.la for r in results])),
                         "grad_norm": norm, "frames": frames})
            self.step += 1
        return rows

    def run(self, epochs=None, log_path=None, checkpoint_path=None, max_steps=None,
            time_budget=None):
        """Train until ``epochs`` (default cfg.epochs), ``max_steps`` or the time budget."""
        epochs = self.cfg.epochs if epochs is None else epochs
        t0 = time.perf_counter()
        writer = fh = None
        if log_path:
            mode = "a" if self.step > 0 else "w"
            fh = open(log_path, mode, newline="")
            writer = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
            if mode == "w":
                writer.writeheader()
        rows_all = []
        try:
            while self.epoch < epochs:
                tracks, batches = self.plan(self.epoch)
                while self.batch < len(batches):
                    if max_steps is not None and self.step >= max_steps:
                        return rows_all
                    if time_budget is not None and time.perf_counter() - t0 > time_budget:
                        log.info("time budget reached at step %d", self.step)
                        return rows_all
                    rows = self.train_batch(tracks, batches[self.batch])
                    self.batch += 1
                    rows_all.extend(rows)
                    if writer:
                        for r in rows:
                            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                                             for k, v in r.items()})
                        fh.flush()
                    last = rows[-1]
                    log.info("epoch %d batch %d/%d step %d loss %.4f (lc %.4f la %.4f) |g| %.3g",
                             self.epoch, self.batch, len(batches), self.step, last["loss"],
                             last["l_c"], last["l_a"], last["grad_norm"])
                    if (checkpoint_path and self.cfg.checkpoint_every
                            and self.batch % self.cfg.checkpoint_every == 0):
                        ckio.save(checkpoint_path, self.checkpoint())
                self.epoch += 1
                self.batch = 0
            return rows_all
        finally:
            if fh:
                fh.close()
            if checkpoint_path:
                ckio.save(checkpoint_path, self.checkpoint())
            self._sync_net()
