"""Losses, task construction, truncated BPTT, bucketing, the optimizer and checkpoints."""
import math

import numpy as np
import pytest

from metatrack import checkpoint as ckio
from metatrack import numerics as nx
from metatrack.convgru import UpdaterNet
from metatrack.features import FeatureExtractor
from metatrack.geometry import crop_scale_factor
from metatrack.losses import anchor_loss, classification_loss, label_map, total_loss
from metatrack.metatrain import (AdamState, Trainer, TrainConfig, Track, WindowState,
                                 _logistic_fit, _render_track, assign_bucket, bucket_sequences,
                                 build_task, clip_grads, epoch_tracks, fit_response_calibration,
                                 global_norm, make_checkpoint, optimizer_step, split_checkpoint,
                                 track_loss, train_window)
from metatrack.numerics import NonFiniteError, ShapeError, Tensor
from metatrack.oracles import bptt_suite
from metatrack.synthdata import SynthConfig, generate_sequence

# Upper 1% point of the chi-square distribution with 5 degrees of freedom.
CHI2_5DOF_P01 = 15.0863


def small_cfg(**kw):
    base = dict(unroll=5, buckets=(10, 20), batch_size=2, tracks_per_epoch=4, min_track=8,
                max_track=24, hidden=4, lr=1e-3, dropout=0.1)
    base.update(kw)
    return TrainConfig(**base)


class TestCropScale:
    """The context-padded crop normalization."""

    def test_square(self):
        assert crop_scale_factor(100, 100, 127.0 ** 2) == pytest.approx(0.635)

    def test_rectangular(self):
        # p = 37.5, so the padded box is 125 x 175
        assert crop_scale_factor(50, 100, 127.0 ** 2) == pytest.approx(0.8587, abs=1e-4)

    def test_fixed_point(self):
        # w = h = 24 gives a padded side of 48
        assert crop_scale_factor(24, 24, 48.0 ** 2) == pytest.approx(1.0)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            crop_scale_factor(0, 10, 100.0)


class TestLosses:
    """Classification, anchor and blended losses."""

    def test_zero_response_is_ln2(self):
        z = Tensor(np.random.default_rng(0).standard_normal((14, 14, 8)))
        y = label_map(9, (1.0, -2.0))
        loss = classification_loss(Tensor(np.zeros((6, 6, 8))), z, y)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-6)

    def test_saturated_positive(self):
        z = Tensor(np.ones((3, 3, 1), dtype=np.float64))
        theta = Tensor(np.full((3, 3, 1), 10.0))
        assert classification_loss(theta, z, np.ones((1, 1))).item() < 1e-6

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal((6, 6, 3))
        z = rng.standard_normal((14, 14, 3))
        y = (rng.random((9, 9)) < 0.2).astype(np.float64)
        total = 0.0
        for i in range(9):
            for j in range(9):
                r = np.sum(theta * z[i:i + 6, j:j + 6])
                s = 1.0 / (1.0 + math.exp(-r))
                total -= y[i, j] * math.log(s) + (1 - y[i, j]) * math.log(1 - s)
        got = classification_loss(Tensor(theta, dtype=np.float64), Tensor(z, dtype=np.float64), y)
        assert got.item() == pytest.approx(total / 81, rel=1e-10)

    def test_label_shape_mismatch(self):
        with pytest.raises(ShapeError):
            classification_loss(Tensor(np.zeros((6, 6, 1))), Tensor(np.zeros((14, 14, 1))),
                                np.zeros((8, 8)))

    def test_anchor(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 6, 6, 8))
        assert anchor_loss(Tensor(a), Tensor(a)).item() == 0.0
        assert anchor_loss(Tensor(a + 1.0, dtype=np.float64),
                           Tensor(a, dtype=np.float64)).item() == pytest.approx(1.0)
        ref = np.sum((a - b) ** 2) / a.size
        got = anchor_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
        assert got == pytest.approx(ref, rel=1e-12)
        with pytest.raises(ShapeError):
            anchor_loss(Tensor(a), Tensor(b[:5]))

    @pytest.mark.parametrize("lam", [0.0, 0.2, 1.0])
    def test_blend(self, lam):
        rng = np.random.default_rng(3)
        theta, theta1 = (Tensor(a, dtype=np.float64) for a in rng.standard_normal((2, 6, 6, 2)))
        z = Tensor(rng.standard_normal((10, 10, 2)), dtype=np.float64)
        y = label_map(5, (0, 0))
        total, lc, la = total_loss(theta, z, y, theta1, lam)
        assert total.item() == pytest.approx((1 - lam) * lc.item() + lam * la.item(), rel=1e-12)

    def test_calibrated_response(self):
        rng = np.random.default_rng(4)
        theta = Tensor(rng.standard_normal((6, 6, 3)), dtype=np.float64)
        z = Tensor(rng.standard_normal((14, 14, 3)), dtype=np.float64)
        y = (rng.random((9, 9)) < 0.2).astype(np.float64)
        # scaling theta by a equals a response scale a; bias b shifts every logit
        plain = classification_loss(Tensor(theta.data * 0.3, dtype=np.float64), z, y).item()
        assert classification_loss(theta, z, y, 0.3).item() == pytest.approx(plain, rel=1e-12)
        zero = Tensor(np.zeros((6, 6, 3)), dtype=np.float64)
        b = -2.0
        ref = np.mean(np.logaddexp(0.0, b) - y * b)
        assert classification_loss(zero, z, y, 0.3, b).item() == pytest.approx(ref, rel=1e-12)

    def test_standardized_ignores_theta_scale(self):
        rng = np.random.default_rng(6)
        theta = rng.standard_normal((6, 6, 3))
        z = Tensor(rng.standard_normal((14, 14, 3)), dtype=np.float64)
        y = label_map(9, (1.0, 0.0))
        a = classification_loss(Tensor(theta, dtype=np.float64), z, y, 2.0, -5.0, True).item()
        b = classification_loss(Tensor(7.0 * theta, dtype=np.float64), z, y, 2.0, -5.0,
                                True).item()
        assert a == pytest.approx(b, rel=1e-6)
        r = nx.xcorr_valid(z, Tensor(theta, dtype=np.float64)).data
        q = 2.0 * (r - r.mean()) / np.sqrt(r.var() + 1e-5) - 5.0
        assert a == pytest.approx(np.mean(np.logaddexp(0.0, q) - y * q), rel=1e-10)

    def test_label_map(self):
        y = label_map(9, (0.0, 0.0))
        assert y[4, 4] == 1.0 and y.sum() == 5.0
        y = label_map(9, (2.0, -1.0))
        assert y[6, 3] == 1.0 and y[4, 4] == 0.0


class TestTask:
    """Task construction from a sequence."""

    def test_minimal_task(self):
        seq = generate_sequence(SynthConfig(seed=1, length=4))
        task = build_task(seq.frames, seq.boxes, 2)
        assert len(task.train) == 1
        assert task.z.shape == (14, 14, 8) and task.y.shape == (9, 9)

    def test_stationary_target_label_centred(self):
        seq = generate_sequence(SynthConfig(seed=2, length=3, motion_step=0.0))
        task = build_task(seq.frames, seq.boxes, 3)
        assert task.y[4, 4] == 1.0

    def test_known_offset(self):
        seq = generate_sequence(SynthConfig(seed=3, length=3, motion_step=0.0))
        boxes = seq.boxes.copy()
        s = crop_scale_factor(boxes[2][2], boxes[2][3], 48.0 ** 2)
        boxes[2, 0] += 2 * 8 / s  # two cells to the right
        task = build_task(seq.frames, boxes, 3)
        assert task.y[4, 6] == 1.0 and task.y[4, 4] == 0.0

    def test_too_short(self):
        seq = generate_sequence(SynthConfig(seed=4, length=3))
        with pytest.raises(ValueError):
            build_task(seq.frames, seq.boxes, 4)
        with pytest.raises(ValueError):
            build_task(seq.frames, seq.boxes, 1)


class TestTruncatedBPTT:
    """Window gradients against the hand-unrolled oracle."""

    def test_oracle(self):
        records = bptt_suite(seed=0)
        full = [r for r in records if r["case"].startswith("full")][0]
        trunc = [r for r in records if r["case"].startswith("truncated")][0]
        assert full["exact"]
        assert trunc["error"] <= 1e-6

    def test_zero_learning_trajectory(self):
        """Splitting the run into windows does not change the forward pass."""
        ext = FeatureExtractor()
        seq = generate_sequence(SynthConfig(seed=5, length=8))
        track = Track(seq.name, seq.frames, seq.boxes)
        net = UpdaterNet.create(ext.d, hidden=4, size=ext.m, seed=0)
        trajs = []
        for h in (2, 8):
            cfg = TrainConfig(unroll=h, buckets=(8,), interval=2, dropout=0.0)
            state, traj = WindowState(), []
            while state.t < 8:
                res = train_window(net, track, state, cfg, ext)
                traj += res.trajectory
                state = res.state
            trajs.append(np.array(traj))
        np.testing.assert_allclose(trajs[0], trajs[1], atol=1e-6)

    def test_no_emission_gives_zero_grads(self):
        ext = FeatureExtractor()
        seq = generate_sequence(SynthConfig(seed=6, length=4))
        net = UpdaterNet.create(ext.d, hidden=4, size=ext.m)
        cfg = TrainConfig(unroll=2, buckets=(4,), interval=10, dropout=0.0)
        res = train_window(net, Track("t", seq.frames, seq.boxes), WindowState(), cfg, ext)
        assert all(not g.any() for g in res.grads.values())
        assert res.frames == 1 and res.loss > 0

    def test_past_end(self):
        seq = generate_sequence(SynthConfig(seed=7, length=2))
        with pytest.raises(ValueError):
            train_window(UpdaterNet.create(8, hidden=4), Track("t", seq.frames, seq.boxes),
                         WindowState(t=2), TrainConfig())


class TestBucketing:
    """Bucket choice, subsampling and the short-track drop rule."""

    def test_largest_fitting_bucket(self):
        idx = assign_bucket(60, (25, 50), rng=np.random.default_rng(0))
        assert len(idx) == 50 and np.all(np.diff(idx) == 1)

    def test_interval_two(self):
        idx = assign_bucket(140, (25, 50), rng=np.random.default_rng(1))
        assert len(idx) == 50 and np.all(np.diff(idx) == 2) and idx[-1] < 140

    def test_max_span(self):
        idx = assign_bucket(400, (150,), max_span=200, rng=np.random.default_rng(2))
        assert np.all(np.diff(idx) == 1)

    def test_duplication(self):
        rng = np.random.default_rng(3)
        kept = None
        while kept is None:
            kept = assign_bucket(20, (25, 50), rng=rng)
        assert len(kept) == 25 and np.all(np.diff(kept) >= 0)
        assert set(kept.tolist()) == set(range(20))

    def test_drop_probability_chi_square(self):
        rng = np.random.default_rng(4)
        lengths, draws = (5, 10, 15, 20, 24), 1000
        stat = 0.0
        for n in lengths:
            kept = sum(assign_bucket(n, (25,), rng=rng) is not None for _ in range(draws))
            p = n / 25
            exp_keep, exp_drop = draws * p, draws * (1 - p)
            stat += (kept - exp_keep) ** 2 / exp_keep + (kept - exp_keep) ** 2 / exp_drop
        # one degree of freedom per track length
        assert stat < CHI2_5DOF_P01

    def test_batches_are_uniform(self):
        rng = np.random.default_rng(5)
        lengths = rng.integers(20, 300, size=64)
        batches = bucket_sequences(lengths, (25, 50, 100), 8, rng)
        for b in batches:
            assert 1 <= len(b) <= 8
            assert len({len(s.indices) for s in b}) == 1
        tracks = [s.track for b in batches for s in b]
        assert len(tracks) == len(set(tracks))


class TestOptimizer:
    """Adam with decoupled weight decay."""

    def test_hand_computed_step(self):
        p = {"w": np.array([1.0, -2.0, 0.5], dtype=np.float32)}
        g = {"w": np.array([0.5, -1.0, 0.0], dtype=np.float32)}
        new, st = optimizer_step(p, g, AdamState.zeros(p), lr=0.1, weight_decay=0.01)
        # first step: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        ref = [1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.001,
               -2.0 + 0.1 * 1.0 / (1.0 + 1e-8) + 0.002,
               0.5 - 0.0005]
        np.testing.assert_allclose(new["w"], ref, rtol=1e-6)
        np.testing.assert_allclose(st.m["w"], [0.05, -0.1, 0.0], rtol=1e-6)
        np.testing.assert_allclose(st.v["w"], [0.00025, 0.001, 0.0], rtol=1e-6)
        assert st.t == 1

    def test_zero_gradient_only_decays(self):
        p = {"w": np.array([2.0, -4.0], dtype=np.float32)}
        new, _ = optimizer_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), lr=0.1,
                                weight_decay=0.5)
        np.testing.assert_allclose(new["w"], [1.9, -3.8], rtol=1e-6)

    def test_constant_gradient_step_size(self):
        p = {"w": np.zeros(1, dtype=np.float32)}
        st = AdamState.zeros(p)
        for _ in range(200):
            prev = p["w"].copy()
            p, st = optimizer_step(p, {"w": np.array([3.0])}, st, lr=1e-3, weight_decay=0.0)
        assert float(prev[0] - p["w"][0]) == pytest.approx(1e-3, rel=1e-3)

    def test_clip(self):
        g = {"a": np.array([3.0, 0.0], dtype=np.float32), "b": np.array([4.0], dtype=np.float32)}
        assert global_norm(g) == pytest.approx(5.0)
        clipped, norm = clip_grads(g, 1.0)
        assert norm == pytest.approx(5.0) and global_norm(clipped) == pytest.approx(1.0)
        same, _ = clip_grads(g, 0.0)
        assert same is g


class TestConfig:
    """TrainConfig validation."""

    def test_buckets_multiple_of_unroll(self):
        with pytest.raises(ValueError):
            TrainConfig(unroll=25, buckets=(25, 60))

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=1.5)

    def test_dict_roundtrip(self):
        cfg = small_cfg(lam=0.7)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_response_scale_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(resp_scale=0.0)


class TestCalibration:
    """Fixed response calibration of the classification loss."""

    def test_logistic_fit_recovers_parameters(self):
        rng = np.random.default_rng(5)
        r = rng.standard_normal(200_000) * 3.0
        y = (rng.random(r.size) < 1.0 / (1.0 + np.exp(-(0.5 * r - 2.0)))).astype(float)
        a, b = _logistic_fit(r, y)
        assert a == pytest.approx(0.5, abs=0.02) and b == pytest.approx(-2.0, abs=0.03)

    def test_fit_deterministic(self):
        cfg = small_cfg(calib_tracks=2)
        a, b = fit_response_calibration(cfg)
        assert a > 0 and b < 0  # positives are rare
        assert fit_response_calibration(cfg) == (a, b)

    def test_trainer_stores_calibration(self, tmp_path):
        tr = Trainer(small_cfg(calib_tracks=2), SynthConfig())
        assert not tr.cfg.calibrate and tr.cfg.resp_scale != 1.0
        tr.run(epochs=1, max_steps=1, checkpoint_path=tmp_path / "c.ckpt")
        again = Trainer.from_checkpoint(ckio.load(tmp_path / "c.ckpt"), SynthConfig())
        assert again.cfg == tr.cfg

    def test_disabled(self):
        tr = Trainer(small_cfg(calibrate=False), SynthConfig())
        assert (tr.cfg.resp_scale, tr.cfg.resp_bias) == (1.0, 0.0)


class TestCheckpoint:
    """Binary container and training resume."""

    def test_roundtrip_bitwise(self, tmp_path):
        net = UpdaterNet.create(8, hidden=4, seed=3)
        p = {k: v.data for k, v in net.named_parameters().items()}
        ck = make_checkpoint(net, FeatureExtractor(), small_cfg(), step=7,
                             adam=AdamState.zeros(p))
        path = tmp_path / "a.ckpt"
        ckio.save(path, ck)
        again = ckio.load(path)
        assert again == ck
        assert ckio.to_bytes(again) == path.read_bytes()
        net2, ext, cfg, adam, meta = split_checkpoint(again)
        assert cfg == small_cfg() and meta["step"] == 7 and adam is not None
        for k, v in net2.named_parameters().items():
            assert np.array_equal(v.data, p[k])

    def test_header_layout(self):
        ck = ckio.Checkpoint({"x": np.arange(6, dtype=np.float32).reshape(2, 3)}, {})
        buf = ckio.to_bytes(ck)
        assert buf[:4] == b"MTCK"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert int.from_bytes(buf[8:12], "little") == 1

    def test_corrupt(self):
        buf = ckio.to_bytes(ckio.Checkpoint({"x": np.ones(3, dtype=np.float32)}, {"a": 1}))
        with pytest.raises(ckio.CheckpointError):
            ckio.from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(ckio.CheckpointError):
            ckio.from_bytes(buf[:-3])
        with pytest.raises(ckio.CheckpointError):
            ckio.from_bytes(buf + b"\0")
        with pytest.raises(ckio.CheckpointError):
            ckio.to_bytes(ckio.Checkpoint({"x": np.ones(3)}, {}))

    def test_wrong_payload(self):
        with pytest.raises(ckio.CheckpointError):
            split_checkpoint(ckio.Checkpoint({}, {"format": "other"}))

    def test_resume_is_bitwise(self, tmp_path):
        cfg = small_cfg()
        synth = SynthConfig()
        full = Trainer(cfg, synth)
        rows_full = full.run(epochs=2, max_steps=12)
        assert full.step >= 10

        first = Trainer(cfg, synth)
        rows_a = first.run(epochs=2, max_steps=4, checkpoint_path=tmp_path / "r.ckpt")
        second = Trainer.from_checkpoint(ckio.load(tmp_path / "r.ckpt"), synth)
        rows_b = second.run(epochs=2, max_steps=12)
        assert [r["loss"] for r in rows_a + rows_b] == [r["loss"] for r in rows_full]
        assert second.checkpoint() == full.checkpoint()

    def test_log_written(self, tmp_path):
        tr = Trainer(small_cfg(), SynthConfig())
        tr.run(epochs=1, max_steps=3, log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].split(",")[:5] == ["step", "epoch", "batch", "window", "loss"]
        assert len(lines) >= 4


@pytest.mark.slow
def test_loss_decreases():
    """Training lowers the loss on the tracks it was trained on."""
    # an emission inside every window, so each window has a gradient
    cfg = small_cfg(tracks_per_epoch=6, lr=3e-3, dropout=0.0, epochs=4, interval=2)
    tr = Trainer(cfg, SynthConfig())
    tracks = [_render_track(tr.synth, seed, n, np.arange(n)) for seed, n in
              epoch_tracks(cfg, tr.synth, 0)]
    before = np.mean([track_loss(tr.net, t, tr.cfg, tr.ext) for t in tracks])
    tr.run(epochs=1)
    for _ in range(3):  # revisit the same tracks
        tr.epoch = 0
        tr.run(epochs=1)
    after = np.mean([track_loss(tr.net, t, tr.cfg, tr.ext) for t in tracks])
    assert after < before


def test_non_finite_loss_reported():
    ext = FeatureExtractor()
    seq = generate_sequence(SynthConfig(seed=8, length=4))
    net = UpdaterNet.create(ext.d, hidden=4, size=ext.m)
    big = net.with_arrays({k: (np.full(v.shape, 1e30, np.float32) if k == "out" else v.data)
                           for k, v in net.named_parameters().items()})
    cfg = TrainConfig(unroll=3, buckets=(3,), interval=1, dropout=0.0)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteError):
        train_window(big, Track("t", seq.frames, seq.boxes), WindowState(), cfg, ext)
