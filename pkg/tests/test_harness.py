import math
from dataclasses import replace

import numpy as np
import pytest

from snncl.continual import RunConfig
from snncl.core import LifLayer, LifParams, Network, init_network
from snncl.data import synth_generate
from snncl.errors import ContractError
from snncl.harness import (REPORT_FIELDS, ReportRow, evaluate, mode_config, prepare_experiment,
                           interleaved_latency, read_report_csv, rows_to_csv, run_experiment, sweep,
                           sweep_csv)
from snncl.training import parse_checkpoint
from snncl.replay import LatentStore

TINY = RunConfig(hidden=(12, 10, 8), t_step=10, t_pre=20, e_pre=4, e_cl=3, l_ins=2, batch_size=8,
                 cl_batch_size=4, test_fraction=0.25)


@pytest.fixture(scope="module")
def tiny():
    ds = synth_generate(4, 12, 10, seed=1)
    return ds, prepare_experiment(TINY, ds)


@pytest.fixture(scope="module")
def reports(tiny):
    ds, prep = tiny
    return {m: run_experiment(TINY, ds, m, prepared=prep, figures=False)
            for m in ("replay4ncl", "spikinglr", "no-replay")}


@pytest.fixture(scope="module")
def l_sweep(tiny):
    # 10 input channels, then narrower layers, so each later cut stores less
    ds, _ = tiny
    return sweep(replace(TINY, hidden=(8, 6, 4), e_cl=1), "l_ins", [1, 2, 3, 4], ds, figures=False)


def oracle_net(classes):
    return Network([LifLayer(2.0 * np.eye(classes), np.zeros((classes, classes)), LifParams(),
                             recurrent=False)])


class TestEvaluate:
    def test_oracle_single_sample(self):
        x = np.zeros((1, 5, 3), np.uint8)
        x[0, :, 2] = 1
        r = evaluate(oracle_net(3), (x, np.array([2])), 5, l_ins=1)
        assert r.accuracy == 1.0 and r.correct == 1 and r.total == 1
        assert r.confusion[2, 2] == 1

    def test_random_net_near_chance(self):
        rng = np.random.default_rng(0)
        n, c = 600, 4
        x = (rng.random((n, 10, 8)) < 0.3).astype(np.uint8)
        y = rng.integers(0, c, n)
        net = init_network([8, 6, c], seed=0, gain=3.0)
        acc = evaluate(net, (x, y), 10, l_ins=1).accuracy
        sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
        assert abs(acc - 1 / c) <= 3 * sigma

    def test_filter_partitions_combined(self, tiny):
        ds, prep = tiny
        net = prep.net
        full = evaluate(net, prep.test, TINY.t_step, cfg=TINY)
        old = evaluate(net, prep.test, TINY.t_step, [0, 1, 2], cfg=TINY)
        new = evaluate(net, prep.test, TINY.t_step, [3], cfg=TINY)
        assert old.correct + new.correct == full.correct
        assert old.total + new.total == full.total
        assert full.confusion.sum() == full.total
        assert np.trace(full.confusion) == full.correct

    def test_empty_after_filter(self):
        x = np.zeros((2, 5, 3), np.uint8)
        with pytest.raises(ContractError):
            evaluate(oracle_net(3), (x, np.array([0, 1])), 5, [2], l_ins=1)

    def test_deterministic(self, tiny):
        _, prep = tiny
        a = evaluate(prep.net, prep.test, 10, cfg=TINY)
        b = evaluate(prep.net, prep.test, 10, cfg=TINY)
        assert a.accuracy == b.accuracy and np.array_equal(a.confusion, b.confusion)


class TestReportCsv:
    def row(self, i):
        return ReportRow(i, 0.1 * i, 1 / 3, 0.7, 1.0, 0.123456789 * i, 10 * i, 7 * i, 10 * i,
                         7 * i + 1.0 * i, 1234)

    def test_lossless(self):
        rows = [self.row(i) for i in range(4)]
        assert read_report_csv(rows_to_csv(rows)) == rows

    def test_leading_columns(self):
        rows = [self.row(1), self.row(2)]
        back, lead = read_report_csv(rows_to_csv(rows, {"t_step": [20, 100]}))
        assert back == rows and [d["t_step"] for d in lead] == ["20", "100"]

    def test_header(self):
        assert rows_to_csv([]).strip().split(",") == list(REPORT_FIELDS)
        with pytest.raises(ContractError):
            read_report_csv("a,b\n1,2\n")


class TestModeConfig:
    def test_spikinglr(self):
        cfg = mode_config(RunConfig(eta_pre=3e-3), "spikinglr")
        assert (cfg.t_step, cfg.adaptive_threshold, cfg.effective_eta_cl) == (100, False, 3e-3)
        assert cfg.effective_chunk == RunConfig().effective_chunk

    def test_others_unchanged(self):
        base = RunConfig()
        assert mode_config(base, "replay4ncl") == base == mode_config(base, "no-replay")

    def test_unknown(self):
        with pytest.raises(ContractError):
            mode_config(RunConfig(), "ewc")


class TestRunExperiment:
    def test_row_invariants(self, reports):
        for rep in reports.values():
            assert [r.epoch for r in rep.rows] == list(range(TINY.e_cl + 1))
            for r in rep.rows:
                for f in ("old_top1", "new_top1", "combined_top1", "new_train_top1"):
                    assert 0.0 <= getattr(r, f) <= 1.0
            for prev, cur in zip(rep.rows, rep.rows[1:]):
                for f in ("wall_latency", "latency_model", "synop_count", "neuron_updates",
                          "energy_proxy"):
                    assert getattr(cur, f) >= getattr(prev, f) >= 0

    def test_combined_is_weighted_mean(self, reports, tiny):
        _, prep = tiny
        n_new = int(np.sum(prep.test.labels == 3))
        n_old = len(prep.test) - n_new
        for rep in reports.values():
            for r in rep.rows:
                mean = (r.old_top1 * n_old + r.new_top1 * n_new) / (n_old + n_new)
                assert r.combined_top1 == pytest.approx(mean, abs=1e-12)

    def test_latent_bytes(self, reports):
        assert reports["no-replay"].store is None
        assert reports["no-replay"].final.latent_bytes == 0
        for mode in ("replay4ncl", "spikinglr"):
            rep = reports[mode]
            assert rep.final.latent_bytes == rep.store.total_bytes > 0
        assert reports["replay4ncl"].store.total_bytes < reports["spikinglr"].store.total_bytes

    def test_spikinglr_costs_more(self, reports):
        fast, slow = reports["replay4ncl"].final, reports["spikinglr"].final
        assert slow.neuron_updates == 10 * fast.neuron_updates
        assert fast.energy_proxy < slow.energy_proxy

    def test_frozen_layers_unchanged(self, reports):
        for rep in reports.values():
            assert rep.frozen_digests_before == rep.frozen_digests_after
            assert len(rep.frozen_digests_before) == TINY.l_ins - 1

    def test_pretrained_net_not_mutated(self, reports, tiny):
        _, prep = tiny
        assert prep.net.digest() != reports["replay4ncl"].net.digest()
        again = run_experiment(TINY, tiny[0], "replay4ncl", prepared=prep, figures=False)
        assert again.net.digest() == reports["replay4ncl"].net.digest()

    def test_deterministic(self, reports, tiny):
        ds, prep = tiny
        again = run_experiment(TINY, ds, "replay4ncl", prepared=prep, figures=False)
        first = reports["replay4ncl"]
        assert [r.deterministic() for r in again.rows] == [r.deterministic() for r in first.rows]
        assert again.checkpoint == first.checkpoint
        assert again.store.to_bytes() == first.store.to_bytes()

    def test_checkpoint_holds_trained_net(self, reports):
        rep = reports["replay4ncl"]
        ck = parse_checkpoint(rep.checkpoint)
        assert ck.net.digest() == rep.net.digest()
        assert ck.extra["mode"] == "replay4ncl"

    def test_manifest(self, reports, tiny):
        ds, _ = tiny
        m = reports["spikinglr"].manifest
        assert m["mode"] == "spikinglr"
        assert m["effective"]["t_step"] == 100
        assert m["dataset"]["sha256"] == ds.digest()
        assert RunConfig.from_dict(m["config"]) == TINY
        assert m["latent_store"]["total_bytes"] == reports["spikinglr"].store.total_bytes

    def test_supplied_store_is_used(self, reports, tiny):
        ds, prep = tiny
        store = reports["replay4ncl"].store
        rep = run_experiment(TINY, ds, "replay4ncl", prepared=prep, store=store, figures=False)
        assert rep.store is store

    def test_stage_in_error(self, tiny):
        ds, prep = tiny
        wrong = LatentStore("bitpack", TINY.t_step, 12)
        with pytest.raises(ContractError, match=r"\[replay4ncl/cl-train\]"):
            run_experiment(TINY, ds, "replay4ncl", prepared=prep,
                           store=_one_entry(wrong), figures=False)

    def test_writes_outputs(self, reports, tmp_path):
        rep = reports["replay4ncl"]
        out = rep.write(tmp_path / "r", figures=True)
        names = sorted(p.name for p in out.iterdir())
        assert names == ["checkpoint.bin", "latent_store.lrs", "manifest.json", "report.csv",
                         "report.png"]
        assert read_report_csv((out / "report.csv").read_text()) == rep.rows
        assert LatentStore.load(out / "latent_store.lrs").to_bytes() == rep.store.to_bytes()


class TestInterleavedLatency:
    def test_same_training_as_separate_runs(self, reports, tiny):
        ds, prep = tiny
        modes = ("spikinglr", "replay4ncl", "no-replay")
        hist, nets = interleaved_latency(TINY, ds, modes, prepared=prep)
        for mode in modes:
            rep, epochs = reports[mode], hist[mode]
            assert nets[mode].digest() == rep.net.digest()
            assert [e.epoch for e in epochs] == [1, 2, 3]
            assert np.cumsum([e.ops.synops for e in epochs]).tolist() == \
                [r.synop_count for r in rep.rows[1:]]
            assert all(e.wall_latency > 0 for e in epochs)


def _one_entry(store):
    from snncl.replay import compress_latent
    store.append(compress_latent(np.zeros((store.timesteps, store.width), np.uint8), store.codec))
    return store


class TestSweep:
    def test_l_ins_bytes_non_increasing(self, l_sweep):
        sizes = [rep.final.latent_bytes for rep in l_sweep.values()]
        assert list(l_sweep) == [1, 2, 3, 4]
        assert all(b < a for a, b in zip(sizes, sizes[1:]))

    def test_singleton_equals_direct_run(self, tiny):
        ds, prep = tiny
        cfg = replace(TINY, e_cl=1)
        one = sweep(cfg, "t_step", [10], ds, prepared=prep, figures=False)[10]
        direct = run_experiment(cfg, ds, prepared=prep, figures=False)
        assert [r.deterministic() for r in one.rows] == [r.deterministic() for r in direct.rows]

    def test_t_step_axis_latency(self, tiny):
        ds, prep = tiny
        reps = sweep(replace(TINY, e_cl=2), "t_step", [100, 20], ds, prepared=prep, figures=False)
        assert len(reps) == 2
        assert reps[20].final.latency_model < reps[100].final.latency_model
        assert reps[20].final.wall_latency < reps[100].final.wall_latency

    def test_sweep_csv(self, l_sweep):
        rows, lead = read_report_csv(sweep_csv(l_sweep, "l_ins"))
        assert len(rows) == sum(len(r.rows) for r in l_sweep.values())
        assert {d["l_ins"] for d in lead} == {"1", "2", "3", "4"}

    def test_bad_axis(self, tiny):
        ds, prep = tiny
        with pytest.raises(ContractError):
            sweep(TINY, "beta", [0.9], ds, prepared=prep)
        with pytest.raises(ContractError):
            sweep(TINY, "t_step", [], ds, prepared=prep)
