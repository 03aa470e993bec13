"""Metrics tests: confusion counting and the OA/AA/Kappa formulas."""

import numpy as np
import pytest

from ssmae import seeds
from ssmae.errors import LabelError, MetricError
from ssmae.metrics import ConfusionMatrix, confusion, format_report, metrics, write_confusion_csv


def direct_formula_oracle(counts: np.ndarray):
    """OA/AA/Kappa straight from the definitions, written independently."""
    counts = counts.astype(float)
    total = counts.sum()
    oa = counts.trace() / total
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    recalls = [counts[c, c] / row[c] for c in range(len(counts)) if row[c] > 0]
    aa = sum(recalls) / len(recalls)
    p_e = float(row @ col) / total**2
    kappa = (oa - p_e) / (1 - p_e)
    return oa, aa, kappa


class TestConfusion:
    def test_perfect_predictions_are_diagonal(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert np.array_equal(cm.counts, np.diag([1, 2, 1]))

    def test_empty_input_gives_zero_matrix(self):
        cm = confusion([], [], 3)
        assert np.array_equal(cm.counts, np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(MetricError):
            metrics(cm)

    def test_hand_tally(self):
        preds = [0, 1, 1, 2, 0, 2]
        truths = [0, 1, 2, 2, 1, 0]
        cm = confusion(preds, truths, 3)
        expected = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]])
        assert np.array_equal(cm.counts, expected)

    def test_out_of_range_rejected(self):
        with pytest.raises(LabelError):
            confusion([3], [0], 3)
        with pytest.raises(LabelError):
            confusion([0], [-1], 3)


class TestMetrics:
    def test_perfect_diagonal(self):
        result = metrics(ConfusionMatrix(np.diag([50, 50])))
        assert result.oa == 1.0 and result.aa == 1.0 and result.kappa == 1.0

    def test_chance_agreement_gives_zero_kappa(self):
        # all predictions class 0 on balanced 2-class truth
        cm = ConfusionMatrix(np.array([[25, 0], [25, 0]]))
        result = metrics(cm)
        assert result.oa == 0.5
        assert result.kappa == 0.0

    def test_random_matrices_match_direct_formula(self):
        rng = seeds.generator(50)
        for _ in range(200):
            counts = rng.integers(0, 40, size=(4, 4))
            counts[0, 0] += 1  # keep the matrix nonempty
            result = metrics(ConfusionMatrix(counts.astype(np.int64)))
            oa, aa, kappa = direct_formula_oracle(counts)
            assert abs(result.oa - oa) <= 1e-12
            assert abs(result.aa - aa) <= 1e-12
            assert abs(result.kappa - kappa) <= 1e-12

    def test_consistent_class_permutation_invariance(self):
        rng = seeds.generator(51)
        counts = rng.integers(1, 30, size=(5, 5)).astype(np.int64)
        base = metrics(ConfusionMatrix(counts))
        perm = rng.permutation(5)
        permuted = metrics(ConfusionMatrix(counts[np.ix_(perm, perm)]))
        assert permuted.oa == pytest.approx(base.oa, abs=1e-14)
        assert permuted.aa == pytest.approx(base.aa, abs=1e-14)
        assert permuted.kappa == pytest.approx(base.kappa, abs=1e-14)

    def test_count_scaling_invariance(self):
        rng = seeds.generator(52)
        counts = rng.integers(1, 20, size=(3, 3)).astype(np.int64)
        base = metrics(ConfusionMatrix(counts))
        scaled = metrics(ConfusionMatrix(counts * 7))
        assert scaled.oa == pytest.approx(base.oa, abs=1e-14)
        assert scaled.aa == pytest.approx(base.aa, abs=1e-14)
        assert scaled.kappa == pytest.approx(base.kappa, abs=1e-14)

    def test_kappa_one_iff_no_off_diagonal(self):
        rng = seeds.generator(53)
        diag = metrics(ConfusionMatrix(np.diag(rng.integers(1, 20, size=4)).astype(np.int64)))
        assert diag.kappa == pytest.approx(1.0, abs=1e-14)
        counts = np.diag([10, 10, 10, 10]).astype(np.int64)
        counts[0, 1] = 1
        assert metrics(ConfusionMatrix(counts)).kappa < 1.0

    def test_degenerate_single_cell(self):
        # p_e = 1 can only happen with all mass in one diagonal cell
        # (Cauchy-Schwarz equality), and then p_o = 1 so Kappa is 1
        cm = ConfusionMatrix(np.array([[10, 0], [0, 0]], dtype=np.int64))
        assert metrics(cm).kappa == 1.0

    def test_aa_skips_unpopulated_classes(self):
        counts = np.array([[8, 2, 0], [1, 9, 0], [0, 0, 0]], dtype=np.int64)
        result = metrics(ConfusionMatrix(counts))
        assert result.skipped_classes == 1
        assert result.aa == pytest.approx((0.8 + 0.9) / 2)


class TestReports:
    def test_report_contains_summary_lines(self):
        cm = confusion([0, 1, 1], [0, 1, 0], 2)
        text = format_report(cm, metrics(cm))
        assert "OA" in text and "AA" in text and "Kappa" in text
        assert text.count("\n") >= 5

    def test_confusion_csv(self, tmp_path):
        cm = confusion([0, 1, 1], [0, 1, 0], 2)
        path = tmp_path / "confusion.csv"
        write_confusion_csv(cm, path)
        rows = path.read_text().strip().splitlines()
        assert len(rows) == 3
        assert rows[1].split(",")[1:] == ["1", "1"]
