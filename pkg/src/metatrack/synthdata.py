"""Deterministic synthetic tracking sequences with appearance drift and distractors.

Motion and appearance parameters follow integer (fixed-point) random walks so
a (config, seed) pair always renders the same video.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace

import cv2
import numpy as np

POS_UNIT = 16  # positions in 1/16 pixel
PARAM_UNIT = 10000  # appearance parameters in 1e-4


@dataclass(frozen=True)
class SynthConfig:
    frame_size: int = 64
    length: int = 150
    min_target: int = 14
    max_target: int = 20
    components: int = 3
    contrast: float = 70.0
    drift: float = 1.0
    hue_step: float = 0.08
    shear_step: float = 0.015
    phase_step: float = 0.06
    max_shear: float = 0.6
    wave_amplitude: float = 1.2
    wave_period: float = 120.0
    motion_step: float = 0.5
    max_speed: float = 2.0
    distractors: int = 0
    similarity: float = 0.7
    noise: float = 4.0
    clutter: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.frame_size < 16 or self.length < 1:
            raise ValueError("frame_size must be >= 16 and length >= 1")
        if not 4 <= self.min_target <= self.max_target <= self.frame_size // 2:
            raise ValueError("target size range must satisfy 4 <= min <= max <= frame_size/2")
        for name in ("drift", "hue_step", "shear_step", "phase_step", "motion_step",
                     "max_speed", "noise", "clutter", "contrast", "wave_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.distractors < 0 or not 0.0 <= self.similarity <= 1.0:
            raise ValueError("distractors must be >= 0 and similarity in [0, 1]")
        if self.wave_period <= 0:
            raise ValueError("wave_period must be positive")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Sequence:
    name: str
    frames: list
    boxes: np.ndarray

    def __len__(self):
        return len(self.frames)


@dataclass
class Texture:
    freqs: np.ndarray  # components x 2, cycles across the half-extent
    phases: np.ndarray  # components
    colors: np.ndarray  # components x 3
    base: np.ndarray  # 3


def _walk(rng, n, step, lo=None, hi=None, start=0):
    """Integer random walk in PARAM_UNIT fixed point, reflected into [lo, hi]."""
    s = int(round(step * PARAM_UNIT))
    out = np.empty(n, dtype=np.int64)
    v = int(start)
    lo_i = None if lo is None else int(round(lo * PARAM_UNIT))
    hi_i = None if hi is None else int(round(hi * PARAM_UNIT))
    steps = rng.integers(-s, s + 1, size=n) if s > 0 else np.zeros(n, dtype=np.int64)
    for t in range(n):
        if t:
            v += int(steps[t])
            if hi_i is not None and v > hi_i:
                v = 2 * hi_i - v
            if lo_i is not None and v < lo_i:
                v = 2 * lo_i - v
        out[t] = v
    return out


def _motion(rng, n, size, w, h, cfg, scale=1.0):
    """Integer velocity walk for a box centre (1/16 px), reflected to stay in frame."""
    acc = int(round(cfg.motion_step * scale * POS_UNIT))
    vmax = int(round(cfg.max_speed * scale * POS_UNIT))
    lo_x, hi_x = int(w * POS_UNIT // 2), int((size - w / 2) * POS_UNIT)
    lo_y, hi_y = int(h * POS_UNIT // 2), int((size - h / 2) * POS_UNIT)
    pos = np.array([rng.integers(lo_x + (hi_x - lo_x) // 4, hi_x - (hi_x - lo_x) // 4 + 1),
                    rng.integers(lo_y + (hi_y - lo_y) // 4, hi_y - (hi_y - lo_y) // 4 + 1)],
                   dtype=np.int64)
    vel = np.zeros(2, dtype=np.int64)
    kicks = rng.integers(-acc, acc + 1, size=(n, 2)) if acc > 0 else np.zeros((n, 2), np.int64)
    out = np.empty((n, 2), dtype=np.int64)
    bounds = ((lo_x, hi_x), (lo_y, hi_y))
    for t in range(n):
        if t:
            vel = np.clip(vel + kicks[t], -vmax, vmax)
            pos = pos + vel
            for a, (lo, hi) in enumerate(bounds):
                if pos[a] < lo:
                    pos[a], vel[a] = 2 * lo - pos[a], -vel[a]
                elif pos[a] > hi:
                    pos[a], vel[a] = 2 * hi - pos[a], -vel[a]
        out[t] = pos
    return out


def _texture(rng, k, contrast):
    ang = rng.uniform(0, np.pi, size=k)
    rad = rng.uniform(0.6, 1.6, size=k)
    freqs = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    cols = rng.normal(size=(k, 3))
    cols /= np.linalg.norm(cols, axis=1, keepdims=True)
    cols *= contrast / np.sqrt(k)
    return Texture(freqs, rng.uniform(0, 2 * np.pi, size=k), cols, rng.uniform(70, 185, size=3))


def _hue_matrix(angle):
    # rotation about the gray axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.ones((3, 3)) / 3.0
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / math.sqrt(3.0)
    return c * np.eye(3) + (1 - c) * k + s * cross


def _render_object(canvas, tex, cx, cy, w, h, hue, shear, phase):
    size = canvas.shape[0]
    x0, x1 = max(int(math.floor(cx - w / 2 - 1)), 0), min(int(math.ceil(cx + w / 2 + 1)), size)
    y0, y1 = max(int(math.floor(cy - h / 2 - 1)), 0), min(int(math.ceil(cy + h / 2 + 1)), size)
    if x1 <= x0 or y1 <= y0:
        return
    px = np.arange(x0, x1) + 0.5
    py = np.arange(y0, y1) + 0.5
    u = ((px - cx) / (w / 2.0))[None, :]
    v = ((py - cy) / (h / 2.0))[:, None]
    us, vs = u + shear * v, v - shear * u
    arg = (2 * np.pi * (tex.freqs[:, 0, None, None] * us + tex.freqs[:, 1, None, None] * vs)
           + tex.phases[:, None, None] + phase)
    rgb = tex.base + np.einsum("kyx,kc->yxc", np.cos(arg), tex.colors)
    mean = rgb.mean(axis=2, keepdims=True)
    rgb = mean + (rgb - mean) @ _hue_matrix(hue).T
    ax = np.clip(w / 2.0 - np.abs(px - cx) + 0.5, 0.0, 1.0)[None, :]
    ay = np.clip(h / 2.0 - np.abs(py - cy) + 0.5, 0.0, 1.0)[:, None]
    alpha = (ax * ay)[:, :, None]
    region = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = region * (1 - alpha) + rgb * alpha


def _background(rng, size, clutter):
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.full((size, size, 3), 128.0)
    for _ in range(6):
        f = rng.uniform(0.5, 4.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        col = rng.normal(size=3)
        bg += clutter / 3.0 * np.cos(2 * np.pi * (f[0] * xx + f[1] * yy) + ph)[:, :, None] * col
    return bg


def generate_sequence(cfg=SynthConfig(), name=None):
    """Render one sequence; returns a :class:`Sequence` with uint8 RGB frames."""
    rng = np.random.default_rng(cfg.seed)
    n, size = cfg.length, cfg.frame_size
    w = int(rng.integers(cfg.min_target, cfg.max_target + 1))
    h = int(rng.integers(cfg.min_target, cfg.max_target + 1))
    tex = _texture(rng, cfg.components, cfg.contrast)
    bg = _background(rng, size, cfg.clutter)
    dr = cfg.drift
    hue = _walk(rng, n, cfg.hue_step * dr)
    shear = _walk(rng, n, cfg.shear_step * dr, -cfg.max_shear, cfg.max_shear)
    phase = _walk(rng, n, cfg.phase_step * dr)
    wave0 = rng.uniform(0, 2 * np.pi)
    pos = _motion(rng, n, size, w, h, cfg)

    distractors = []
    for _ in range(cfg.distractors):
        dw = int(np.clip(w + rng.integers(-2, 3), 4, size // 2))
        dh = int(np.clip(h + rng.integers(-2, 3), 4, size // 2))
        off = 1.0 - cfg.similarity
        dtex = Texture(tex.freqs, tex.phases + rng.uniform(-np.pi, np.pi, cfg.components) * off,
                       tex.colors, tex.base + rng.normal(size=3) * 40.0 * off)
        dhue = float(rng.uniform(-np.pi, np.pi) * off)
        distractors.append((dtex, dw, dh, dhue, _motion(rng, n, size, dw, dh, cfg)))
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))

    frames, boxes = [], np.empty((n, 4))
    for t in range(n):
        wave = cfg.wave_amplitude * dr * math.sin(2 * np.pi * t / cfg.wave_period + wave0)
        canvas = bg.copy()
        for dtex, dw, dh, dhue, dpos in distractors:
            _render_object(canvas, dtex, dpos[t, 0] / POS_UNIT, dpos[t, 1] / POS_UNIT, dw, dh,
                           dhue, 0.0, 0.0)
        cx, cy = pos[t] / POS_UNIT
        _render_object(canvas, tex, cx, cy, w, h, hue[t] / PARAM_UNIT + wave,
                       shear[t] / PARAM_UNIT, phase[t] / PARAM_UNIT + wave)
        if cfg.noise > 0:
            canvas += noise_rng.normal(scale=cfg.noise, size=canvas.shape)
        frames.append(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
        boxes[t] = (cx - w / 2.0, cy - h / 2.0, w, h)
    return Sequence(name or f"synth{cfg.seed:05d}", frames, boxes)


def generate_benchmark(cfg=SynthConfig(), count=100, base_seed=0, prefix="synth"):
    return [generate_sequence(replace(cfg, seed=base_seed + i), f"{prefix}{base_seed + i:05d}")
            for i in range(count)]


def format_box(box):
    return ",".join(f"{v:.4f}".rstrip("0").rstrip(".") for v in box)


def export_sequence(seq, directory):
    """OTB layout: ``img/0001.png ...`` plus ``groundtruth_rect.txt`` (1-indexed x,y,w,h)."""
    img_dir = os.path.join(directory, "img")
    os.makedirs(img_dir, exist_ok=True)
    paths = []
    for i, frame in enumerate(seq.frames):
        path = os.path.join(img_dir, f"{i + 1:04d}.png")
        cv2.imwrite(path, np.ascontiguousarray(frame[:, :, ::-1]))
        paths.append(path)
    with open(os.path.join(directory, "groundtruth_rect.txt"), "w") as fh:
        for x, y, w, h in seq.boxes:
            fh.write(format_box((x + 1, y + 1, w, h)) + "\n")
    return paths


def load_frame(path):
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return np.ascontiguousarray(img[:, :, ::-1])
