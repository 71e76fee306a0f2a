import math

import numpy as np
import pytest

from spdsim.errors import ConfigError, ContractError, DataError
from spdsim.model import perplexity, reference_executor
from spdsim.sensitivity import (ESB, ISB, SB, SensitivityReport,
                                classify_blocks, rank_blocks, scan,
                                sensitivity_scores, suffix_ppl_curve)


class TestScores:
    def test_flat_curve_all_zero(self):
        assert sensitivity_scores([5.0, 5.0, 5.0]) == [0.0, 0.0]

    def test_simple_arithmetic(self):
        assert sensitivity_scores([12.0, 10.0, 10.0]) == [2.0, 0.0]

    def test_telescoping_identity(self, rng):
        curve = list(10.0 + rng.random(9))
        s = sensitivity_scores(curve)
        assert math.fsum(s) == pytest.approx(curve[0] - curve[-1],
                                             rel=0, abs=1e-12)

    def test_wrong_length_rejected(self):
        with pytest.raises(ContractError):
            sensitivity_scores([])


class TestClassify:
    def test_paper_threshold_example(self):
        report = classify_blocks([0.01, 0.2, 30.0], tau1=0.05, tau2=10.0)
        assert report.categories == [ISB, SB, ESB]

    def test_all_isb_ranked_by_score(self):
        report = classify_blocks([0.04, 0.01, 0.02], tau1=0.05, tau2=10.0)
        assert report.categories == [ISB] * 3
        assert report.ranking == [1, 2, 0]

    def test_negative_scores_are_insensitive(self):
        report = classify_blocks([-0.3, 0.0], tau1=0.05, tau2=10.0)
        assert report.categories == [ISB, ISB]
        assert report.ranking == [0, 1]

    def test_partition_property(self, rng):
        scores = list(rng.normal(scale=20.0, size=16))
        report = classify_blocks(scores)
        assert len(report.categories) == 16
        assert all(c in (ISB, SB, ESB) for c in report.categories)
        assert sorted(report.ranking) == list(range(16))

    def test_tie_break_by_block_index(self):
        assert rank_blocks([1.0, 1.0, 0.5]) == [2, 0, 1]

    def test_bad_thresholds_rejected(self):
        with pytest.raises(ConfigError):
            classify_blocks([0.1], tau1=5.0, tau2=1.0)


class TestSuffixCurve:
    def test_last_entry_is_all_tp_and_matches_reference(self, small_model,
                                                        small_calib):
        curve = suffix_ppl_curve(small_model, 4, small_calib)
        assert len(curve) == small_model.config.n_layers + 1
        ref = perplexity(reference_executor(small_model), small_calib)
        assert abs(curve[-1] - ref) / ref < 1e-6

    def test_d1_scan_is_flat(self, small_model, small_calib):
        curve = suffix_ppl_curve(small_model, 1, small_calib)
        scores = sensitivity_scores(curve)
        assert max(abs(s) for s in scores) <= 1e-9

    def test_deterministic(self, small_model, small_calib):
        r1 = scan(small_model, 2, small_calib)
        r2 = scan(small_model, 2, small_calib)
        assert r1.suffix_ppl == r2.suffix_ppl
        assert r1.scores == r2.scores
        assert r1.ranking == r2.ranking

    def test_empty_calibration_rejected(self, small_model):
        class Empty:
            samples = []

        with pytest.raises(DataError):
            suffix_ppl_curve(small_model, 2, Empty())


class TestReportIO:
    def test_json_round_trip(self, tmp_path):
        report = classify_blocks([0.01, 0.2], suffix_ppl=[11.0, 10.5, 10.3])
        path = str(tmp_path / "r.json")
        report.save_json(path)
        loaded = SensitivityReport.load_json(path)
        assert loaded.to_dict() == report.to_dict()

    def test_csv_written(self, tmp_path):
        report = classify_blocks([0.01, 0.2], suffix_ppl=[11.0, 10.5, 10.3])
        path = tmp_path / "r.csv"
        report.save_csv(str(path))
        text = path.read_text()
        assert "spd_start_block" in text
        assert "category" in text
