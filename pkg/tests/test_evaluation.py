"""OTB-style metrics, one-pass evaluation and report files."""
import numpy as np
import pytest

from metatrack.evaluation import (THRESHOLDS, center_error, curve_rows, iou, load_dataset,
                                  read_boxes, read_csv, report_rows, rows_to_text, run_ope,
                                  success_auc, write_csv)
from metatrack.features import FeatureExtractor
from metatrack.plotting import alpha_plot, success_plot
from metatrack.synthdata import SynthConfig, export_sequence, generate_benchmark
from metatrack.tracker import RunResult, TrackerSpec


class OracleTracker:
    """Returns the groundtruth."""

    def run(self, seq):
        n = len(seq)
        return RunResult(np.array(seq.boxes), np.zeros(n), np.zeros(n), 1.0)


class StaticTracker:
    """Never moves from the first box."""

    def run(self, seq):
        n = len(seq)
        return RunResult(np.repeat(seq.boxes[:1], n, axis=0), np.zeros(n), np.zeros(n), 1.0)


@pytest.fixture(scope="module")
def small_set():
    return generate_benchmark(SynthConfig(length=12), count=3, base_seed=40)


class TestMetrics:
    """IoU, success curve and AUC conventions."""

    def test_iou_cases(self):
        assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
        assert iou((0, 0, 1, 1), (2, 2, 1, 1)) == 0.0
        assert iou((0, 0, 1, 1), (0.5, 0, 1, 1)) == pytest.approx(1 / 3)
        assert iou((0, 0, 1, 1), (1, 0, 1, 1)) == 0.0

    def test_iou_broadcasts(self):
        a = np.array([[0, 0, 2, 2], [0, 0, 1, 1]])
        np.testing.assert_allclose(iou(a, (0, 0, 2, 2)), [1.0, 0.25])

    def test_grid(self):
        assert len(THRESHOLDS) == 21 and THRESHOLDS[0] == 0.0 and THRESHOLDS[-1] == 1.0

    def test_all_one(self):
        curve, auc = success_auc(np.ones(10))
        assert (curve == 1).all() and auc == 1.0

    def test_all_zero(self):
        curve, auc = success_auc(np.zeros(10))
        assert curve[0] == 1.0 and auc == pytest.approx(1 / 21)

    def test_mixed_hand_count(self):
        curve, auc = success_auc([0.3, 0.6, 0.9])
        # thresholds <= 0.3: 7 points at 1, 0.35..0.6: 6 at 2/3, 0.65..0.9: 6 at 1/3, 0.95, 1.0: 0
        expect = np.array([1.0] * 7 + [2 / 3] * 6 + [1 / 3] * 6 + [0.0] * 2)
        np.testing.assert_allclose(curve, expect)
        assert auc == pytest.approx((7 + 4 + 2) / 21)

    def test_curve_non_increasing(self):
        ious = np.random.default_rng(0).random(100)
        curve, auc = success_auc(ious)
        assert (np.diff(curve) <= 0).all() and 0.0 <= auc <= 1.0

    def test_center_error(self):
        assert center_error((0, 0, 2, 2), (3, 4, 2, 2)) == pytest.approx(5.0)


class TestOPE:
    """run_ope end to end."""

    def test_oracle_is_perfect(self, small_set):
        assert run_ope(OracleTracker(), small_set).auc == 1.0

    def test_static_on_static_target(self):
        seqs = generate_benchmark(SynthConfig(length=10, motion_step=0.0), count=2)
        assert run_ope(StaticTracker(), seqs).auc == 1.0

    def test_sorted_by_name(self, small_set):
        rep = run_ope(OracleTracker(), list(reversed(small_set)))
        assert [r.name for r in rep.results] == sorted(s.name for s in small_set)

    def test_reproducible_and_parallel(self, small_set):
        spec = TrackerSpec(FeatureExtractor(), strategy="ema", alpha=0.1)
        a = rows_to_text(report_rows(run_ope(spec, small_set)))
        b = rows_to_text(report_rows(run_ope(spec, small_set)))
        c = rows_to_text(report_rows(run_ope(spec, small_set, threads=2)))
        assert a == b == c

    def test_skips_unreadable(self, tmp_path, small_set):
        for seq in small_set[:2]:
            export_sequence(seq, tmp_path / seq.name)
        (tmp_path / small_set[1].name / "img" / "0003.png").write_bytes(b"not a png")
        bad = tmp_path / "broken"
        (bad / "img").mkdir(parents=True)
        (bad / "groundtruth_rect.txt").write_text("1,1,0,5\n")
        records, skipped = load_dataset(tmp_path)
        assert [r.name for r in records] == [s.name for s in small_set[:2]]
        assert skipped and skipped[0][0] == "broken"
        rep = run_ope(TrackerSpec(FeatureExtractor()), records)
        assert [r.name for r in rep.results] == [small_set[0].name]
        assert rep.skipped[0][0] == small_set[1].name
        rows = report_rows(rep)
        assert rows[-1][0] == f"SKIPPED:{small_set[1].name}"


class TestReports:
    """CSV and SVG outputs."""

    def test_csv_roundtrip(self, tmp_path, small_set):
        rep = run_ope(OracleTracker(), small_set)
        rows = report_rows(rep)
        write_csv(tmp_path / "r.csv", rows)
        assert read_csv(tmp_path / "r.csv") == rows
        assert rows[0] == ["sequence", "frames", "auc", "mean_iou", "center_error",
                           "model_drift"]
        assert rows[-1][0] == "ALL" and float(rows[-1][2]) == 1.0

    def test_curve_rows(self, small_set):
        rows = curve_rows(run_ope(OracleTracker(), small_set))
        assert len(rows) == 22 and rows[1] == ["0.00", "1.000000"]

    def test_read_boxes_tolerates_separators(self, tmp_path):
        path = tmp_path / "gt.txt"
        path.write_text("1,2,3,4\n5\t6\t7\t8\n\n9 10 11 12\n")
        np.testing.assert_allclose(read_boxes(path), [[0, 1, 3, 4], [4, 5, 7, 8], [8, 9, 11, 12]])

    def test_svg_is_byte_stable(self, tmp_path):
        curves = [("a", 0.5, np.linspace(1, 0, 21)), ("b", 0.4, np.linspace(1, 0.1, 21) ** 2)]
        success_plot(curves, THRESHOLDS, tmp_path / "1.svg")
        success_plot(curves, THRESHOLDS, tmp_path / "2.svg")
        one = (tmp_path / "1.svg").read_bytes()
        assert one == (tmp_path / "2.svg").read_bytes()
        assert b"<svg" in one and b"Success plot" in one
        alpha_plot([0.01, 0.02, 0.03], [0.5, 0.6, 0.55], tmp_path / "a.svg", 0.45)
        assert b"best alpha=0.02" in (tmp_path / "a.svg").read_bytes()
