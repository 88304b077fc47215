import dataclasses
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hpusim.model import ModelConfig, WorkloadConfig, attention_step_work
from hpusim.sim import (CostModel, InfeasiblePolicy, Kind, OutOfMemory, Partition, SimPolicy,
                        Topology, balance_report, partition_tasks, simulate, to_ns)

from conftest import make_device

FIXTURES = Path(__file__).parent / "fixtures"


def tiny_topology(num_hpus, host_hop=False, gpu_bw=1e12, hpu_bw=2e11):
    gpu = make_device("gpu", "gpu", bw=gpu_bw, flops=5e13)
    hpu = make_device("hpu", "hpu", bw=hpu_bw, flops=1e12)
    return Topology.build(gpu, hpu, num_hpus, host_hop=host_hop)


class FlatCost(CostModel):
    """Stage times proportional to the work items, for closed-form checks."""

    def __init__(self, linear=1e-6, attn=1e-6, xfer=1e-7):
        super().__init__()
        object.__setattr__(self, "_c", (linear, attn, xfer))

    def gpu_linear_time(self, m, gpu, batch, part, lm_head=False):
        return self._c[0] * batch / (2 if part != "all" else 1)

    def gpu_attention_time(self, m, gpu, batch, ctx):
        return np.full(np.shape(ctx), self._c[1] * batch * m.num_kv_heads)

    def hpu_attention_time(self, m, hpu, head_seqs, ctx):
        return np.full(np.shape(ctx), self._c[1] * head_seqs)

    def transfer_time(self, nbytes, msgs, link, host_hop=None):
        return self._c[2]

    def prefill_time(self, m, gpu, batch, input_len):
        return 5e-6


# partitioning -------------------------------------------------------------

def test_batch_parallel_even():
    a = partition_tasks(64, 32, "batch_parallel", 4)
    assert [len(b) for b in a.batches] == [16] * 4
    assert all(len(h) == 32 for h in a.heads)
    assert not a.needs_merge


def test_head_parallel_even():
    a = partition_tasks(64, 32, Partition.HEAD_PARALLEL, 4)
    assert [len(h) for h in a.heads] == [8] * 4
    assert all(len(b) == 64 for b in a.batches)
    assert a.needs_merge


def test_remainder_round_robin_from_zero():
    a = partition_tasks(10, 32, "batch_parallel", 4)
    assert [len(b) for b in a.batches] == [3, 3, 2, 2]
    assert [b.start for b in a.batches] == [0, 3, 6, 8]


@given(batch=st.integers(1, 200), heads=st.integers(1, 64), hpus=st.integers(1, 9),
       part=st.sampled_from(list(Partition)))
def test_every_task_assigned_once(batch, heads, hpus, part):
    a = partition_tasks(batch, heads, part, hpus)
    tasks = [t for i in range(hpus) for t in a.tasks(i)]
    assert sorted(tasks) == [(b, h) for b in range(batch) for h in range(heads)]
    sizes = [len(b) for b in a.batches] if part == Partition.BATCH_PARALLEL else [len(h) for h in a.heads]
    assert max(sizes) - min(sizes) <= 1


def test_partition_needs_an_hpu():
    with pytest.raises(ValueError):
        partition_tasks(4, 4, "batch_parallel", 0)


# closed forms -------------------------------------------------------------

def test_gpu_only_closed_form(llama, l40s):
    w = WorkloadConfig(16, 64, 8)
    cost = CostModel()
    tl, rep = simulate(llama, w, Topology(l40s), SimPolicy(), cost)
    L = llama.num_layers
    lin_all = to_ns(cost.gpu_linear_time(llama, l40s, 16, "all"))
    pre = to_ns(cost.gpu_linear_time(llama, l40s, 16, "pre"))
    post = to_ns(cost.gpu_linear_time(llama, l40s, 16, "post"))
    attn = to_ns(cost.gpu_attention_time(llama, l40s, 16, 64 + np.arange(1, 9)))
    expected = pre + (w.output_len * L - 1) * lin_all + post + L * int(attn.sum())
    assert round(rep.generation_s * 1e9) == expected
    assert rep.gpu_runs_attention
    assert rep.breakdown["gpu_linear"] + rep.breakdown["gpu_attention"] == pytest.approx(1.0)


def test_gpu_only_attention_dominates_at_2k(llama, l40s):
    _, rep = simulate(llama, WorkloadConfig(16, 1024, 64), Topology(l40s))
    assert rep.breakdown["gpu_attention"] > 0.5


def test_one_hpu_one_subbatch_is_serial(tiny):
    w = WorkloadConfig(4, 8, 3)
    tl, rep = simulate(tiny, w, tiny_topology(1), SimPolicy(num_subbatches=1))
    gen = tl.step > 0
    gen &= ~((tl.kind == Kind.XFER) & (tl.layer < 0))
    assert round(rep.generation_s * 1e9) == int((tl.end - tl.start)[gen].sum())


def test_pipelining_overlaps(tiny):
    w = WorkloadConfig(8, 8, 4)
    cost = FlatCost(linear=1e-6, attn=0.5e-6)
    _, serial = simulate(tiny, w, tiny_topology(1), SimPolicy(num_subbatches=1), cost)
    tl, piped = simulate(tiny, w, tiny_topology(1), SimPolicy(num_subbatches=2), cost)
    sum_gen = int((tl.end - tl.start)[(tl.step > 0) & (tl.layer >= 0)].sum())
    assert piped.generation_s * 1e9 < sum_gen
    assert piped.tokens_per_s > serial.tokens_per_s


# structural properties ------------------------------------------------------

def check_timeline(tl, m, w, num_hpus, partition):
    assert tl.overlaps() == 0
    # every recorded dependency finished before its dependant started
    for e in range(len(tl)):
        deps = tl.dep_idx[tl.dep_ptr[e]:tl.dep_ptr[e + 1]]
        if deps.size:
            assert tl.start[e] >= tl.end[deps].max()
    # attention sits between its inbound and outbound transfers
    for i in range(num_hpus):
        tx = (tl.resource == 3 + 3 * i) & (tl.layer >= 0)
        att = tl.resource == 2 + 3 * i
        rx = tl.resource == 4 + 3 * i
        assert tx.sum() == att.sum() == rx.sum()
        assert np.all(tl.start[att] >= tl.end[tx])
        assert np.all(tl.start[rx] >= tl.end[att])
    # work conservation per decode step
    if num_hpus:
        att = (tl.kind == Kind.ATTENTION) & (tl.resource != 0)
        for t in range(1, w.output_len + 1):
            got = int(tl.work_bytes[att & (tl.step == t)].sum())
            assert got == attention_step_work(m, w.batch_size, w.input_len + t).bytes


scenario = st.fixed_dictionaries(dict(
    batch=st.integers(1, 12), inp=st.integers(1, 24), out=st.integers(1, 4),
    hpus=st.integers(0, 3), nsb=st.integers(1, 3), kv=st.sampled_from([1, 2, 4]),
    part=st.sampled_from(list(Partition)), merge=st.sampled_from([0.0, 1e-6, 5e-5]),
    hop=st.booleans(), layers=st.integers(1, 3)))


@settings(max_examples=100, deadline=None)
@given(s=scenario)
def test_random_scenarios_are_well_formed(s):
    m = ModelConfig("r", s["layers"], 256, 4, s["kv"], 64, 512)
    w = WorkloadConfig(s["batch"], s["inp"], s["out"])
    policy = SimPolicy(min(s["nsb"], s["batch"]), s["part"], s["merge"])
    topo = tiny_topology(s["hpus"], s["hop"])
    tl, rep = simulate(m, w, topo, policy)
    check_timeline(tl, m, w, s["hpus"], s["part"])
    assert sum(rep.breakdown.values()) == pytest.approx(1.0, abs=1e-9)
    tl2, rep2 = simulate(m, w, topo, policy)
    for f in ("resource", "kind", "start", "end", "step", "subbatch"):
        assert np.array_equal(getattr(tl, f), getattr(tl2, f))
    assert rep == rep2


@settings(max_examples=40, deadline=None)
@given(batch=st.integers(2, 16), hpus=st.integers(1, 4), merge=st.floats(1e-7, 1e-4),
       heads=st.sampled_from([1, 2, 4]))
def test_batch_parallel_beats_head_parallel(batch, hpus, merge, heads):
    m = ModelConfig("r", 2, 256, 4, heads, 64, 512)
    w = WorkloadConfig(batch, 16, 3)
    topo = tiny_topology(hpus)
    _, bp = simulate(m, w, topo, SimPolicy(2, Partition.BATCH_PARALLEL, merge))
    _, hp = simulate(m, w, topo, SimPolicy(2, Partition.HEAD_PARALLEL, merge))
    assert bp.tokens_per_s >= hp.tokens_per_s


def test_throughput_monotone_in_merge_overhead(tiny):
    w = WorkloadConfig(8, 16, 3)
    rates = [simulate(tiny, w, tiny_topology(2), SimPolicy(2, "head_parallel", mo))[1].tokens_per_s
             for mo in (0, 1e-7, 1e-6, 1e-5, 1e-4)]
    assert rates == sorted(rates, reverse=True)


def test_head_parallel_emits_merges(tiny):
    w = WorkloadConfig(4, 8, 2)
    tl, rep = simulate(tiny, w, tiny_topology(2), SimPolicy(1, "head_parallel", 1e-6))
    merges = tl.kind == Kind.MERGE
    assert merges.sum() == w.output_len * tiny.num_layers
    assert np.all(tl.resource[merges] == 1)
    # one merge vector per batch element per HPU, at the configured cost
    assert np.all(tl.end[merges] - tl.start[merges] == 4 * 2 * 1000)
    assert rep.breakdown["merge"] > 0


# errors ---------------------------------------------------------------------

def test_gpu_only_oom(llama, l40s):
    with pytest.raises(OutOfMemory):
        simulate(llama, WorkloadConfig(32, 1024, 1024), Topology(l40s))


def test_hpu_pool_oom(cfg, llama):
    topo = cfg.topology("l40s-4proto")
    with pytest.raises(OutOfMemory):
        simulate(llama, WorkloadConfig(65, 1024, 1024), topo)


def test_too_many_subbatches(tiny):
    with pytest.raises(InfeasiblePolicy):
        simulate(tiny, WorkloadConfig(2, 4, 1), tiny_topology(1), SimPolicy(num_subbatches=3))
    with pytest.raises(ValueError):
        SimPolicy(num_subbatches=0)
    with pytest.raises(ValueError):
        SimPolicy(merge_overhead=-1)


def test_offload_off_runs_gpu_only(tiny):
    _, rep = simulate(tiny, WorkloadConfig(4, 8, 2), tiny_topology(2), SimPolicy(offload=False))
    assert rep.gpu_runs_attention and rep.num_hpus == 0


# balance ------------------------------------------------------------------------

def test_symmetric_balance():
    m = ModelConfig("s", 2, 256, 4, 4, 64, 512)
    # GPU: 8 sequences; busiest HPU: 4 sequences x 4 heads
    cost = FlatCost(linear=2e-6, attn=1e-6)
    rep = balance_report(m, WorkloadConfig(8, 8, 8), tiny_topology(2), SimPolicy(2), cost)
    assert rep.imbalance == 1.0
    assert rep.bottleneck == "balanced"


def test_prototype_batch64_is_hpu_bound(cfg, llama):
    rep = balance_report(llama, WorkloadConfig(64, 1024, 1024), cfg.topology("l40s-4proto"),
                         cfg.policy(), cfg.cost_model())
    assert rep.bottleneck == "hpu"
    assert rep.hpu_time > rep.gpu_time


def test_small_batch_gains_little(cfg, llama):
    w = WorkloadConfig(8, 1024, 1024)
    rep = balance_report(llama, w, cfg.topology("l40s-4proto"), cfg.policy(), cfg.cost_model())
    assert rep.bottleneck == "gpu" and rep.hpu_utilization < 0.25
    _, het = simulate(llama, w, cfg.topology("l40s-4proto"), cfg.policy(), cfg.cost_model())
    _, gpu = simulate(llama, w, cfg.topology("l40s-only"), cfg.policy(), cfg.cost_model())
    assert het.tokens_per_s / gpu.tokens_per_s < 1.5


# export ---------------------------------------------------------------------

def golden_run(tiny):
    return simulate(tiny, WorkloadConfig(3, 4, 2), tiny_topology(2, host_hop=True),
                    SimPolicy(2, "batch_parallel"))


def test_timeline_csv_golden(tiny):
    tl, _ = golden_run(tiny)
    text = tl.to_csv()
    assert text.splitlines()[0] == "resource,kind,start_ns,end_ns,step,subbatch"
    assert text == (FIXTURES / "timeline_tiny.csv").read_text()


def test_timeline_csv_step_filter(tiny):
    tl, _ = golden_run(tiny)
    rows = tl.to_csv(max_step=1).splitlines()[1:]
    assert rows and all(int(r.split(",")[4]) <= 1 for r in rows)


def test_report_fields(tiny):
    _, rep = golden_run(tiny)
    d = rep.to_dict()
    assert set(d["breakdown"]) == {"gpu_linear", "gpu_attention", "hpu_attention", "network",
                                   "merge", "idle"}
    assert set(d["per_device_busy"]) >= {"GPU", "HPU0", "HPU1"}
    assert all(0 <= v <= 1 for v in d["per_device_busy"].values())
    assert dataclasses.replace(rep) == rep
