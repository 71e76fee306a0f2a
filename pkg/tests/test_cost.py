import json

import pytest

from spdsim.cost import (CostReport, SystemProfile, allreduce_cost,
                         builtin_profile, plan_cost, sweep_cost_csv)
from spdsim.errors import ConfigError
from spdsim.model import ModelConfig
from spdsim.parallel import SyncPlan


def oracle_allreduce(tensor_bytes, D, bw, lat):
    return 2.0 * (D - 1) / D * tensor_bytes / bw + 2.0 * (D - 1) * lat


class TestAllreduceCost:
    def test_single_device_costs_nothing(self):
        p = SystemProfile(D=1, intra_bw=1e9, per_collective_latency=1e-5)
        assert allreduce_cost(1 << 20, p) == 0.0

    def test_closed_form(self):
        p = SystemProfile(D=4, intra_bw=2e9, per_collective_latency=3e-6)
        got = allreduce_cost(1000, p)
        assert got == pytest.approx(oracle_allreduce(1000, 4, 2e9, 3e-6),
                                    rel=1e-12)

    def test_linear_in_bytes_without_latency(self):
        p = SystemProfile(D=8, intra_bw=300e9, per_collective_latency=0.0)
        assert allreduce_cost(2000, p) == pytest.approx(
            2 * allreduce_cost(1000, p), rel=1e-12)

    def test_bandwidth_ratio(self):
        hbw = builtin_profile("hbw")
        lbw = builtin_profile("lbw")
        hbw.per_collective_latency = 0.0
        lbw.per_collective_latency = 0.0
        ratio = allreduce_cost(1 << 20, lbw) / allreduce_cost(1 << 20, hbw)
        assert ratio == pytest.approx(30.0, rel=1e-12)

    def test_two_node_uses_bottleneck_link(self):
        p = builtin_profile("hbw2")
        assert p.effective_bw() == 25e9

    def test_rejects_nonpositive_bytes(self):
        with pytest.raises(ConfigError):
            allreduce_cost(0, builtin_profile("hbw"))

    def test_rejects_zero_bandwidth(self):
        with pytest.raises(ConfigError):
            SystemProfile(intra_bw=0.0).validate()

    def test_unknown_builtin(self):
        with pytest.raises(ConfigError):
            builtin_profile("warp-drive")


class TestPlanCost:
    cfg = ModelConfig(n_layers=10)

    def test_full_tp_speedup_is_one(self):
        p = builtin_profile("hbw")
        r = plan_cost(SyncPlan.all_tp(10), self.cfg, p)
        assert r.allreduce_count == 20
        assert r.speedup_vs_full_tp == pytest.approx(1.0, rel=1e-12)

    def test_all_spd_halves_traffic(self):
        p = builtin_profile("lbw")
        full = plan_cost(SyncPlan.all_tp(10), self.cfg, p)
        spd = plan_cost(SyncPlan.all_spd(10), self.cfg, p)
        assert spd.allreduce_count == 10
        assert spd.total_transfer_bytes * 2 == full.total_transfer_bytes
        assert spd.speedup_vs_full_tp == pytest.approx(2.0, rel=1e-12)

    def test_seventy_percent_budget_formula(self):
        # L=10, k=7 SPD blocks, compute = 3 single-allreduce times:
        # speedup = (20 + 30) / (13 + 30)
        p = builtin_profile("hbw")
        p.per_collective_latency = 0.0
        one = allreduce_cost(
            self.cfg.max_seq * self.cfg.d_model * p.element_size, p)
        p.compute_time_per_block = 3.0 * one
        plan = SyncPlan.suffix_spd(10, 3)
        r = plan_cost(plan, self.cfg, p)
        assert r.allreduce_count == 13
        assert r.speedup_vs_full_tp == pytest.approx(50.0 / 43.0, rel=1e-12)

    def test_speedup_monotone_in_spd_count(self):
        p = builtin_profile("lbw", compute_time_per_block=1e-5)
        speedups = [plan_cost(SyncPlan.suffix_spd(10, 10 - k), self.cfg,
                              p).speedup_vs_full_tp for k in range(11)]
        assert all(b > a for a, b in zip(speedups, speedups[1:]))

    def test_low_bandwidth_gains_more(self):
        plan = SyncPlan.suffix_spd(10, 5)
        compute = 1e-4
        hbw = builtin_profile("hbw", compute_time_per_block=compute)
        lbw = builtin_profile("lbw", compute_time_per_block=compute)
        s_h = plan_cost(plan, self.cfg, hbw).speedup_vs_full_tp
        s_l = plan_cost(plan, self.cfg, lbw).speedup_vs_full_tp
        assert s_l > s_h

    def test_batch_and_seq_scale_bytes(self):
        p = builtin_profile("hbw")
        r1 = plan_cost(SyncPlan.all_tp(10), self.cfg, p, batch=1, seq_len=64)
        r2 = plan_cost(SyncPlan.all_tp(10), self.cfg, p, batch=2, seq_len=128)
        assert r2.total_transfer_bytes == 4 * r1.total_transfer_bytes

    def test_report_json(self, tmp_path):
        r = plan_cost(SyncPlan.suffix_spd(10, 6), self.cfg,
                      builtin_profile("hbw"))
        path = tmp_path / "cost.json"
        r.save_json(str(path))
        d = json.loads(path.read_text())
        assert d["allreduce_count"] == r.allreduce_count
        assert len(d["per_block"]) == 10


def test_sweep_csv_round_trip(tmp_path):
    rows = [{"budget": 2, "mode": "zs", "profile": "hbw", "perplexity": 10.5,
             "allreduce_count": 14, "total_transfer_bytes": 12345,
             "transfer_latency_s": 1e-4, "total_latency_s": 2e-4,
             "speedup_vs_full_tp": 1.1}]
    path = tmp_path / "sweep.csv"
    sweep_cost_csv(rows, str(path))
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("budget,mode,profile")
    assert "zs" in lines[1] and "hbw" in lines[1]
