"""Synthetic sequences, the tracking loop and geometry helpers."""
import dataclasses

import numpy as np
import pytest

from metatrack.convgru import UpdaterNet
from metatrack.evaluation import iou, load_record
from metatrack.features import FeatureExtractor
from metatrack.geometry import box_center, crop_patch
from metatrack.synthdata import (SynthConfig, export_sequence, format_box, generate_benchmark,
                                 generate_sequence)
from metatrack.tracker import (TrackerConfig, TrackerSpec, cosine_window, detect, init,
                               run_sequence, track_frame)
from metatrack.numerics import Tensor
from metatrack.updaters import NoUpdate


class TestSynth:
    """Determinism, bounds and export."""

    def test_deterministic(self):
        a = generate_sequence(SynthConfig(seed=11, length=10))
        b = generate_sequence(SynthConfig(seed=11, length=10))
        assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
        np.testing.assert_array_equal(a.boxes, b.boxes)
        c = generate_sequence(SynthConfig(seed=12, length=10))
        assert not np.array_equal(a.frames[0], c.frames[0])

    def test_boxes_inside_frame(self):
        seq = generate_sequence(SynthConfig(seed=3, length=150, max_speed=4.0))
        b = seq.boxes
        assert (b[:, 0] >= 0).all() and (b[:, 1] >= 0).all()
        assert (b[:, 0] + b[:, 2] <= 64).all() and (b[:, 1] + b[:, 3] <= 64).all()
        assert seq.frames[0].shape == (64, 64, 3) and seq.frames[0].dtype == np.uint8

    def test_no_drift_keeps_appearance(self):
        """With drift and motion off the target crop never changes apart from noise."""
        cfg = SynthConfig(seed=4, length=20, drift=0.0, motion_step=0.0, noise=0.0)
        seq = generate_sequence(cfg)
        assert np.array_equal(seq.frames[0], seq.frames[-1])

    def test_drift_changes_appearance(self):
        cfg = SynthConfig(seed=4, length=60, motion_step=0.0, noise=0.0, drift=1.0)
        seq = generate_sequence(cfg)
        x, y, w, h = (int(v) for v in seq.boxes[0])
        a = seq.frames[0][y:y + h, x:x + w].astype(float)
        b = seq.frames[-1][y:y + h, x:x + w].astype(float)
        assert np.abs(a - b).mean() > 5.0

    def test_distractors_rendered(self):
        base = SynthConfig(seed=5, length=2, noise=0.0)
        a = generate_sequence(base)
        b = generate_sequence(dataclasses.replace(base, distractors=2))
        assert not np.array_equal(a.frames[0], b.frames[0])

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(min_target=30, max_target=20)
        with pytest.raises(ValueError):
            SynthConfig(drift=-1.0)
        with pytest.raises(ValueError):
            SynthConfig(similarity=1.5)

    def test_benchmark_names(self):
        seqs = generate_benchmark(SynthConfig(length=3), count=3, base_seed=7)
        assert [s.name for s in seqs] == ["synth00007", "synth00008", "synth00009"]

    def test_export_roundtrip(self, tmp_path):
        seq = generate_sequence(SynthConfig(seed=6, length=5))
        export_sequence(seq, tmp_path / "s")
        rec = load_record(str(tmp_path / "s"))
        loaded = rec.load()
        assert all(np.array_equal(a, b) for a, b in zip(seq.frames, loaded.frames))
        np.testing.assert_allclose(loaded.boxes, seq.boxes, atol=1e-4)

    def test_format_box(self):
        assert format_box((1.0, 2.5, 3.125, 4.00001)) == "1,2.5,3.125,4"


class TestGeometry:
    """Crop extraction."""

    def test_crop_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (40, 40, 3)).astype(np.uint8)
        out = crop_patch(img, 20.0, 20.0, 1.0, 16)
        np.testing.assert_array_equal(out, img[12:28, 12:28])

    def test_crop_border_replicates(self):
        img = np.zeros((10, 10, 3), np.uint8)
        img[:, 0] = 200
        out = crop_patch(img, 0.0, 5.0, 1.0, 4)
        assert (out[:, :2] == 200).all()

    def test_box_center(self):
        assert box_center((1.0, 2.0, 4.0, 6.0)) == (3.0, 5.0)


class TestDetection:
    """Response post-processing and peak localisation."""

    def test_cosine_window(self):
        w = cosine_window(9)
        assert w[4, 4] == 1.0 and w[0, 0] == 0.0
        np.testing.assert_allclose(w, w.T)
        assert cosine_window(1).shape == (1, 1)

    def test_detect_finds_planted_template(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((14, 14, 4)).astype(np.float32)
        theta = z[5:11, 3:9].copy()  # offset (+1, -1) from the centre site (4, 4)
        det = detect(Tensor(theta), [Tensor(z)], None, TrackerConfig(scales=(1.0,)))
        assert det.shift == pytest.approx((1.0, -1.0), abs=0.5)
        assert det.scale_index == 0

    def test_scale_penalty(self):
        rng = np.random.default_rng(2)
        z = Tensor(rng.standard_normal((14, 14, 4)))
        theta = Tensor(z.data[4:10, 4:10])
        cfg = TrackerConfig(scale_penalty=0.5)
        det = detect(theta, [z, z, z], None, cfg)
        assert det.scale_index == 1


class TestTracking:
    """The online loop on synthetic sequences."""

    def test_static_target_tracked_exactly(self):
        cfg = SynthConfig(seed=8, length=15, drift=0.0, motion_step=0.0, noise=0.0)
        seq = generate_sequence(cfg)
        run = run_sequence(TrackerSpec(FeatureExtractor()), seq.frames, seq.boxes[0])
        assert iou(run.boxes, seq.boxes).min() > 0.9
        assert np.isnan(run.confidences[0]) and not np.isnan(run.confidences[1:]).any()

    def test_easy_sequence(self):
        seq = generate_sequence(SynthConfig(seed=9, length=60, drift=0.0))
        boxes, _ = run_sequence(TrackerSpec(FeatureExtractor()), seq.frames, seq.boxes[0])
        assert iou(boxes, seq.boxes).mean() > 0.6

    def test_box_stays_in_frame(self):
        seq = generate_sequence(SynthConfig(seed=10, length=40, max_speed=4.0))
        run = run_sequence(TrackerSpec(FeatureExtractor(), strategy="ema", alpha=0.5),
                           seq.frames, seq.boxes[0])
        b = run.boxes
        assert (b[:, 0] >= -1e-9).all() and (b[:, 0] + b[:, 2] <= 64 + 1e-9).all()
        assert (b[:, 2] > 0).all()

    def test_drift_is_zero_without_update(self):
        seq = generate_sequence(SynthConfig(seed=11, length=10))
        run = run_sequence(TrackerSpec(FeatureExtractor()), seq.frames, seq.boxes[0])
        assert not run.drift.any() and run.theta1_norm > 0
        run = run_sequence(TrackerSpec(FeatureExtractor(), strategy="ema", alpha=0.2),
                           seq.frames, seq.boxes[0])
        assert run.drift[2:].min() > 0

    def test_strategies_run(self):
        seq = generate_sequence(SynthConfig(seed=12, length=12))
        for strategy in ("none", "ema", "sgd"):
            run = run_sequence(TrackerSpec(FeatureExtractor(), strategy=strategy),
                               seq.frames, seq.boxes[0])
            assert run.boxes.shape == (12, 4)

    def test_untrained_residual_matches_none(self):
        seq = generate_sequence(SynthConfig(seed=14, length=15))
        ext = FeatureExtractor()
        net = UpdaterNet.create(ext.d, hidden=4, size=ext.m, residual=True)
        a = run_sequence(TrackerSpec(ext), seq.frames, seq.boxes[0])
        b = run_sequence(TrackerSpec(ext, strategy="learned", net=net, interval=2),
                         seq.frames, seq.boxes[0])
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_state_and_errors(self):
        seq = generate_sequence(SynthConfig(seed=13, length=3))
        with pytest.raises(ValueError):
            init(seq.frames[0], (0, 0, 0, 5), NoUpdate(), FeatureExtractor())
        state = init(seq.frames[0], seq.boxes[0], NoUpdate(), FeatureExtractor())
        box, conf = track_frame(state, seq.frames[1])
        assert state.frame_index == 1 and len(box) == 4 and np.isfinite(conf)
