"""Online tracking loop: multi-scale detection, displacement window, damped scale."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .features import FeatureExtractor
from .geometry import box_center, center_box, crop_patch, crop_scale_factor
from .losses import label_map
from .updaters import Observation, Projector, make_updater


@dataclass(frozen=True)
class TrackerConfig:
    scales: tuple = (0.97, 1.0, 1.03)
    scale_penalty: float = 0.95
    scale_damping: float = 0.6
    window_weight: float = 0.25
    context_area: float = 48.0 * 48.0
    subcell: str = "vfit"  # vfit | parabola | none
    label_radius: float = 1.0
    min_size: float = 4.0


def cosine_window(size):
    """Outer product of Hann windows, peak 1 at the centre, zero on the border."""
    if size == 1:
        return np.ones((1, 1))
    hann = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(size) / (size - 1)))
    win = np.outer(hann, hann)
    return win / win.max()


def _refine(resp, i, j, method="vfit"):
    """Sub-cell peak offset along rows and columns.

    ``vfit`` fits two lines of equal and opposite slope through the peak and
    its neighbours (unbiased for the triangular peaks box-pooled features
    produce); ``parabola`` fits a quadratic.
    """
    def axis(lo, mid, hi):
        if method == "parabola":
            den = lo - 2.0 * mid + hi
            if den >= 0:
                return 0.0
            return float(np.clip(0.5 * (lo - hi) / den, -0.5, 0.5))
        den = mid - min(lo, hi)
        if den <= 0:
            return 0.0
        return float(np.clip(0.5 * (hi - lo) / den, -0.5, 0.5))

    k = resp.shape[0]
    di = axis(resp[i - 1, j], resp[i, j], resp[i + 1, j]) if 0 < i < k - 1 else 0.0
    dj = axis(resp[i, j - 1], resp[i, j], resp[i, j + 1]) if 0 < j < k - 1 else 0.0
    return di, dj


@dataclass
class Detection:
    shift: tuple  # (row, col) in response cells from the map centre, refined
    scale_index: int
    confidence: float
    responses: np.ndarray
    z: nx.Tensor


def detect(theta, features, extractor, config, window=None):
    """Locate the target in per-scale search features ``features`` (list of Tensors).

    Responses are min-max normalized jointly over scales, non-unit scales are
    multiplied by the scale penalty, then blended with the cosine window.
    """
    raw = np.stack([nx.xcorr_valid(z, theta).data.astype(np.float64) for z in features])
    k = raw.shape[1]
    if window is None:
        window = cosine_window(k)
    lo, hi = raw.min(), raw.max()
    norm = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    scales = config.scales if len(features) == len(config.scales) else (1.0,) * len(features)
    for si, f in enumerate(scales):
        if f != 1.0:
            norm[si] *= config.scale_penalty
    w = config.window_weight
    resp = (1.0 - w) * norm + w * window if w > 0 else norm
    si, i, j = np.unravel_index(int(np.argmax(resp)), resp.shape)
    c = (k - 1) / 2.0
    di = dj = 0.0
    if config.subcell and config.subcell != "none":
        di, dj = _refine(resp[si], i, j, config.subcell)
    return Detection((i + di - c, j + dj - c), int(si), float(raw[si, i, j]), raw, features[si])


@dataclass
class TrackerState:
    box: tuple
    scale: float
    base_size: tuple
    updater: object
    extractor: FeatureExtractor
    config: TrackerConfig
    frame_index: int = 0
    window: np.ndarray = field(default=None, repr=False)


def _target_feature(frame, box, extractor, config):
    cx, cy = box_center(box)
    s = crop_scale_factor(box[2], box[3], config.context_area)
    return extractor.extract(crop_patch(frame, cx, cy, s, extractor.target_input_size))


def init(frame, box, updater, extractor, config=TrackerConfig()):
    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate initial box {box}")
    updater.start(_target_feature(frame, (x, y, w, h), extractor, config))
    k = extractor.n - extractor.m + 1
    return TrackerState((x, y, w, h), 1.0, (w, h), updater, extractor, config, 0, cosine_window(k))


def search_features(frame, state, scales=None):
    cfg, ext = state.config, state.extractor
    cx, cy = box_center(state.box)
    s = crop_scale_factor(state.box[2], state.box[3], cfg.context_area)
    scales = cfg.scales if scales is None else scales
    return [ext.extract(crop_patch(frame, cx, cy, s / f, ext.search_input_size)) for f in scales], s


def track_frame(state, frame):
    """Advance one frame: returns (box, confidence) and mutates ``state``."""
    if state.updater.current is None:
        raise RuntimeError("tracker used before init")
    cfg, ext = state.config, state.extractor
    feats, s = search_features(frame, state)
    det = detect(state.updater.theta, feats, ext, cfg, state.window)
    f = cfg.scales[det.scale_index]
    step = ext.cell / (s / f)
    cx, cy = box_center(state.box)
    cx += det.shift[1] * step
    cy += det.shift[0] * step
    scale = (1.0 - cfg.scale_damping) * state.scale + cfg.scale_damping * state.scale * f
    h_img, w_img = frame.shape[:2]
    w = float(np.clip(state.base_size[0] * scale, cfg.min_size, w_img))
    h = float(np.clip(state.base_size[1] * scale, cfg.min_size, h_img))
    scale = w / state.base_size[0]
    cx = float(np.clip(cx, w / 2.0, w_img - w / 2.0))
    cy = float(np.clip(cy, h / 2.0, h_img - h / 2.0))
    state.box = center_box(cx, cy, w, h)
    state.scale = scale
    state.frame_index += 1
    k = det.responses.shape[1]
    obs = Observation(x_bar=_target_feature(frame, state.box, ext, cfg), z=det.z,
                      label=label_map(k, det.shift, cfg.label_radius),
                      confidence=det.confidence, frame=state.frame_index)
    state.updater.update(obs)
    return state.box, det.confidence


@dataclass
class TrackerSpec:
    """Everything needed to build a fresh tracker for one sequence (picklable)."""

    extractor: FeatureExtractor
    config: TrackerConfig = TrackerConfig()
    strategy: str = "none"
    projector: Projector = Projector()
    alpha: float = 0.05
    interval: int = 5
    net: object = None
    sgd: object = None

    def make_updater(self):
        return make_updater(self.strategy, self.projector, self.alpha, self.net,
                            self.interval, self.sgd)


@dataclass
class RunResult:
    boxes: np.ndarray  # N x 4
    confidences: np.ndarray  # N, NaN on the first frame
    drift: np.ndarray  # N, ||theta_t - theta_1|| of the model used on frame t
    theta1_norm: float

    def __iter__(self):
        # lets ``boxes, conf = run_sequence(...)`` keep working
        return iter((self.boxes, self.confidences))


def run_sequence(spec, frames, init_box):
    """Track a whole sequence from the first-frame box."""
    state = init(frames[0], init_box, spec.make_updater(), spec.extractor, spec.config)
    theta1 = state.updater.theta1.data.astype(np.float64)
    boxes = [tuple(float(v) for v in init_box)]
    conf = [float("nan")]
    drift = [0.0]
    for frame in frames[1:]:
        used = state.updater.theta.data
        box, c = track_frame(state, frame)
        boxes.append(box)
        conf.append(c)
        drift.append(float(np.linalg.norm(used.astype(np.float64) - theta1)))
    return RunResult(np.array(boxes), np.array(conf), np.array(drift),
                     float(np.linalg.norm(theta1)))
