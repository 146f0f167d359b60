"""Model-update strategies behind one interface.

Each updater is started with the first-frame target feature and then fed one
:class:`Observation` per tracked frame; ``update`` returns the model to use on
the next frame.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cf import CFConfig, cf_learn
from .convgru import UpdaterNet
from .losses import classification_loss
from .numerics import GradTape, Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("none", "ema", "sgd", "learned")


@dataclass
class TargetModel:
    theta: Tensor
    provenance: str = "initial"
    frame: int = 0


@dataclass
class Observation:
    x_bar: Tensor  # target feature at the estimated box
    z: Tensor | None = None  # search feature the detection ran on
    label: np.ndarray | None = None  # pseudo-label map centred on the detection
    confidence: float = 0.0
    frame: int = 0


@dataclass(frozen=True)
class Projector:
    """The single-sample learner g: identity for templates, CF + crop for correlation filters."""

    mode: str = "template"
    cf: CFConfig = field(default_factory=CFConfig)

    def __post_init__(self):
        if self.mode not in ("template", "cf"):
            raise ValueError(f"unknown projection mode {self.mode!r}")

    def __call__(self, x_bar):
        return g_project(x_bar, self.mode, self.cf)

    def model_size(self, m):
        return self.cf.crop if (self.mode == "cf" and self.cf.crop) else m


def g_project(x_bar, mode="template", cfg=CFConfig()):
    if mode == "template":
        return nx.as_tensor(x_bar)
    if mode == "cf":
        return cf_learn(x_bar, cfg)
    raise ValueError(f"unknown projection mode {mode!r}")


def ema_update(theta, candidate, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA rate {alpha} outside [0, 1]")
    theta, candidate = nx.as_tensor(theta), nx.as_tensor(candidate)
    if alpha == 0.0:
        return theta
    if alpha == 1.0:
        return candidate
    return nx.add(nx.scale(theta, 1.0 - alpha), nx.scale(candidate, alpha))


def sgd_update(theta, samples, iterations, lr, batch_size, rng):
    """``iterations`` steps of minibatch gradient descent on the logistic loss."""
    if not samples:
        if iterations:
            log.warning("sgd update requested with an empty buffer; skipped")
        return nx.as_tensor(theta)
    cur = nx.as_tensor(theta).data
    for _ in range(iterations):
        pick = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        p = Tensor(cur, trainable=True, dtype=cur.dtype)
        with GradTape() as tape:
            losses = [classification_loss(p, samples[i][0], samples[i][1]) for i in pick]
            loss = nx.scale(_sum(losses), 1.0 / len(losses))
        grad = tape.backward(loss)[p]
        cur = cur - cur.dtype.type(lr) * grad
    return Tensor(cur, dtype=cur.dtype)


def _sum(ts):
    total = ts[0]
    for t in ts[1:]:
        total = nx.add(total, t)
    return total


class Updater:
    name = "base"

    def __init__(self, projector=None):
        self.g = projector or Projector()
        self.theta1 = None
        self.current = None

    def start(self, x_bar):
        self.theta1 = self.g(x_bar)
        self.current = TargetModel(self.theta1, "initial", 0)
        return self.current

    def update(self, obs):
        raise NotImplementedError

    @property
    def theta(self):
        return self.current.theta


class NoUpdate(Updater):
    name = "none"

    def update(self, obs):
        return self.current


class EMAUpdater(Updater):
    name = "ema"

    def __init__(self, alpha=0.05, projector=None):
        super().__init__(projector)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"EMA rate {alpha} outside [0, 1]")
        self.alpha = alpha

    def update(self, obs):
        theta = ema_update(self.current.theta, self.g(obs.x_bar), self.alpha)
        self.current = TargetModel(theta, "ema", obs.frame)
        return self.current


@dataclass
class SGDConfig:
    capacity: int = 100
    batch_size: int = 8
    lr: float = 1.0
    long_iters: int = 50
    short_iters: int = 20
    long_interval: int = 10
    short_window: int = 20
    confidence_ratio: float = 0.5
    seed: int = 0


class SGDUpdater(Updater):
    """Short-term updates on low confidence, long-term updates every few frames."""

    name = "sgd"

    def __init__(self, config=None, projector=None):
        super().__init__(projector)
        self.cfg = config or SGDConfig()
        self.buffer = deque(maxlen=self.cfg.capacity)
        self.peaks = []
        self.rng = np.random.default_rng(self.cfg.seed)

    def trigger(self, obs):
        if obs.frame % self.cfg.long_interval == 0:
            return "long"
        if self.peaks and obs.confidence < self.cfg.confidence_ratio * float(np.median(self.peaks)):
            return "short"
        return None

    def update(self, obs):
        if obs.z is not None and obs.label is not None:
            self.buffer.append((obs.z, obs.label))
        kind = self.trigger(obs)
        self.peaks.append(obs.confidence)
        if kind is None:
            return self.current
        if kind == "long":
            samples, iters = list(self.buffer), self.cfg.long_iters
        else:
            samples = list(self.buffer)[-self.cfg.short_window:]
            iters = self.cfg.short_iters
        theta = sgd_update(self.current.theta, samples, iters, self.cfg.lr,
                           self.cfg.batch_size, self.rng)
        self.current = TargetModel(theta, "sgd", obs.frame)
        return self.current


class NotStartedError(RuntimeError):
    pass


class LearnedUpdater(Updater):
    """ConvGRU updater: ingests g(x_bar) every frame, re-emits the model every ``interval`` frames.

    The hidden state starts at zero and its first input is g(x_bar_1); theta_1 is
    kept aside and used until the first emission.
    """

    name = "learned"

    def __init__(self, net, interval=5, projector=None, dropout=0.0, rng=None):
        super().__init__(projector)
        self.net = net
        self.interval = interval
        self.dropout = dropout
        self.rng = rng
        self.hidden = None
        self.since_emit = 0
        self.steps = 0

    def start(self, x_bar):
        super().start(x_bar)
        self.hidden = self.net.initial_state()
        self.since_emit = 0
        self.steps = 0
        self._advance(self.theta1)
        return self.current

    def _advance(self, candidate):
        self.hidden = self.net.step(self.hidden, candidate, self.dropout, self.rng)
        self.since_emit += 1
        self.steps += 1

    def ingest(self, x_bar):
        if self.hidden is None:
            raise NotStartedError("learned updater used before start()")
        self._advance(self.g(x_bar))

    def emit(self):
        if self.hidden is None or self.steps == 0:
            raise NotStartedError("emit before the first ingest")
        return self.net.model(self.hidden, self.theta1)

    def update(self, obs):
        self.ingest(obs.x_bar)
        if self.since_emit >= self.interval:
            self.current = TargetModel(self.emit(), "learned", obs.frame)
            self.since_emit = 0
        return self.current

    def recompute(self, x_bars):
        """Hidden state and emitted model rebuilt from h0 over the whole prefix."""
        hs = self.net.initial_state()
        theta1 = None
        for x in x_bars:
            g = self.g(x)
            theta1 = g if theta1 is None else theta1
            hs = self.net.step(hs, g)
        return hs, self.net.model(hs, theta1)


def make_updater(strategy, projector=None, alpha=0.05, net=None, interval=5, sgd=None):
    if strategy == "none":
        return NoUpdate(projector)
    if strategy == "ema":
        return EMAUpdater(alpha, projector)
    if strategy == "sgd":
        return SGDUpdater(sgd, projector)
    if strategy == "learned":
        if net is None:
            raise ValueError("learned strategy needs an updater network (checkpoint)")
        return LearnedUpdater(net, interval, projector)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
