import dataclasses

import numpy as np
import pytest

from hpusim.metrics import (EfficiencyReport, EnergyModel, energy_report, mfu_projection,
                            normalize, normalized_throughput, timeline_efficiency)
from hpusim.model import WorkloadConfig
from hpusim.sim import SimPolicy, Topology, simulate

from conftest import make_device


@pytest.fixture(scope="module")
def hetero_run(cfg, llama):
    topo = cfg.topology("l40s-4proto")
    tl, rep = simulate(llama, WorkloadConfig(16, 256, 16), topo, cfg.policy(), cfg.cost_model())
    return topo, tl, rep


def test_energy_model_lookup(cfg):
    em = cfg.energy_model()
    assert em.fraction(cfg.device("l40s")) == 0.55
    assert em.fraction(cfg.device("a100-pcie")) == 0.80
    assert em.fraction(cfg.device("hpu")) == 0.80
    with pytest.raises(ValueError):
        EnergyModel({"x": 1.5})


def test_watts_formula(cfg, hetero_run):
    topo, _, rep = hetero_run
    em = cfg.energy_model()
    eff = energy_report(rep, topo, em)
    expected = 350 * 0.55 * rep.per_device_busy["GPU"]
    expected += sum(150 * 0.03 * rep.per_device_busy[f"HPU{i}"] for i in range(4))
    assert eff.watts == pytest.approx(expected)
    assert eff.tokens_per_s_per_watt == pytest.approx(eff.tokens_per_s / eff.watts)


def test_normalize_self_is_one(cfg, hetero_run):
    topo, _, rep = hetero_run
    eff = energy_report(rep, topo, cfg.energy_model())
    assert normalize(eff, eff).ratio == 1.0
    assert normalized_throughput(rep, rep) == 1.0


def test_zero_throughput_zero_efficiency(cfg, hetero_run):
    topo, _, rep = hetero_run
    idle = dataclasses.replace(rep, tokens_per_s=0.0)
    assert energy_report(idle, topo, cfg.energy_model()).tokens_per_s_per_watt == 0.0


def test_idle_hpu_adds_no_power(cfg, hetero_run):
    topo, _, rep = hetero_run
    em = cfg.energy_model()
    extra = Topology(topo.gpu, topo.hpus + (topo.hpus[0],), topo.links + (topo.links[0],))
    busy = dict(rep.per_device_busy, HPU4=0.0)
    padded = dataclasses.replace(rep, per_device_busy=busy)
    assert energy_report(padded, extra, em).watts == energy_report(rep, topo, em).watts


def test_efficiency_independent_of_time_unit(cfg, hetero_run):
    topo, tl, rep = hetero_run
    em = cfg.energy_model()
    tokens = rep.batch_size * 16
    base = timeline_efficiency(tl, tokens, topo, em)
    assert base == pytest.approx(energy_report(rep, topo, em).tokens_per_s_per_watt, rel=1e-9)
    for k in (2, 1000):
        scaled = dataclasses.replace(tl, start=tl.start * k, end=tl.end * k)
        assert timeline_efficiency(scaled, tokens, topo, em, 1e-9 / k) == pytest.approx(base, rel=1e-12)


def test_report_json_schema():
    r = EfficiencyReport("a", 10.0, 5.0, 2.0)
    d = r.to_dict()
    assert d["schema"] == "hpusim.efficiency_report/1"
    assert '"tokens_per_s_per_watt": 2.0' in r.to_json()


def test_mfu_gpu_only_low(cfg, llama):
    gpu = cfg.device("l40s")
    for b in (1, 8, 16):
        w = WorkloadConfig(b, 1024, 64)
        _, rep = simulate(llama, w, Topology(gpu), SimPolicy(), cfg.cost_model())
        assert 0.001 < mfu_projection(rep, llama, w, gpu) <= 0.02


def test_mfu_gpu_only_at_batch16_in_band(cfg, llama):
    gpu = cfg.device("l40s")
    w = WorkloadConfig(16, 1024, 1024)
    _, rep = simulate(llama, w, Topology(gpu), SimPolicy(), cfg.cost_model())
    assert 0.01 <= mfu_projection(rep, llama, w, gpu) <= 0.02


def test_mfu_infinite_bandwidth_hits_compute_efficiency(cfg, llama):
    gpu = make_device(bw=1e30, flops=1e15, cap=1 << 50)
    w = WorkloadConfig(64, 128, 8)
    _, rep = simulate(llama, w, Topology(gpu), SimPolicy(), cfg.cost_model())
    assert mfu_projection(rep, llama, w, gpu) == pytest.approx(0.80, rel=1e-3)


def test_mfu_needs_gpu(cfg, hetero_run, llama):
    _, _, rep = hetero_run
    with pytest.raises(ValueError):
        mfu_projection(rep, llama, WorkloadConfig(1, 1, 1), cfg.device("hpu"))


def test_hetero_mfu_counts_linear_only(cfg, hetero_run, llama):
    topo, _, rep = hetero_run
    mfu = mfu_projection(rep, llama, WorkloadConfig(16, 256, 16), topo.gpu)
    assert mfu == pytest.approx(rep.linear_flops / (rep.generation_s * topo.gpu.peak_flops))
    assert np.isfinite(mfu) and 0 < mfu < 1
