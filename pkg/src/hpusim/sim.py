"""Deterministic event simulation of decode on a GPU with optional HPU cards.

The schedule is static. Per generated token and per layer, each sub-batch
runs GPU linear work, ships its descriptors to the HPUs, waits for the
attention results and only then starts its next layer. Sub-batches are
issued round robin, so while one sub-batch is in attention the GPU works on
another. Every resource (GPU, HOST, each HPU and each link direction) is a
FIFO in issue order; an event starts at the later of its resource becoming
free and its inputs arriving. Times are integer nanoseconds.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import protocol
from .attention import UtilCurve, engine_throughput_model
from .kvcache import INTERLEAVE_BLOCK, capacity_report, activation_reserve
from .model import (DeviceSpec, ModelConfig, WorkloadConfig, attention_layer_work,
                    layer_linear_work, lm_head_work,
                    linear_step_work, prefill_work)
from .protocol import LinkModel
from .roofline import DEFAULT_COMPUTE_EFFICIENCY, DEFAULT_MEMORY_EFFICIENCY, estimate

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


class SimulationError(Exception):
    pass


class OutOfMemory(SimulationError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InfeasiblePolicy(SimulationError):
    pass


class Partition(str, enum.Enum):
    BATCH_PARALLEL = "batch_parallel"
    HEAD_PARALLEL = "head_parallel"


class Kind(enum.IntEnum):
    LINEAR = 0
    ATTENTION = 1
    XFER = 2
    MERGE = 3


GPU_RES, HOST_RES = 0, 1


def hpu_res(i: int) -> int:
    return 2 + 3 * i


def tx_res(i: int) -> int:
    return 3 + 3 * i


def rx_res(i: int) -> int:
    return 4 + 3 * i


def resource_names(num_hpus: int) -> list[str]:
    names = ["GPU", "HOST"]
    for i in range(num_hpus):
        names += [f"HPU{i}", f"LINK{i}.tx", f"LINK{i}.rx"]
    return names


@dataclass(frozen=True)
class Topology:
    gpu: DeviceSpec
    hpus: tuple[DeviceSpec, ...] = ()
    links: tuple[LinkModel, ...] = ()
    host_hop: LinkModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "hpus", tuple(self.hpus))
        object.__setattr__(self, "links", tuple(self.links))
        if len(self.links) != len(self.hpus):
            raise ValueError("one link per HPU required")

    @property
    def num_hpus(self) -> int:
        return len(self.hpus)

    @classmethod
    def build(cls, gpu: DeviceSpec, hpu: DeviceSpec | None = None, num_hpus: int = 0,
              host_hop: bool = False, per_message_overhead: float = 5e-6,
              small_transfer_knee: int = 1 << 20, floor_size: int = 4096,
              floor_fraction: float = 0.10) -> Topology:
        """GPU plus ``num_hpus`` identical cards; links run at the slower
        endpoint's rate. ``host_hop`` adds a second hop through the host."""
        if num_hpus and hpu is None:
            raise ValueError("num_hpus > 0 needs an HPU device")
        hpus = (hpu,) * num_hpus

        def link(bw, lat):
            return LinkModel(bw, lat, per_message_overhead, small_transfer_knee,
                             floor_size, floor_fraction)

        links = tuple(link(min(gpu.link_bandwidth, h.link_bandwidth),
                           max(gpu.link_latency, h.link_latency)) for h in hpus)
        hop = link(hpu.link_bandwidth, hpu.link_latency) if (host_hop and hpu) else None
        return cls(gpu, hpus, links, hop)


@dataclass(frozen=True)
class SimPolicy:
    num_subbatches: int = 2
    partition: Partition = Partition.BATCH_PARALLEL
    merge_overhead: float = 2e-6
    offload: bool = True

    def __post_init__(self):
        object.__setattr__(self, "partition", Partition(self.partition))
        if self.num_subbatches < 1:
            raise ValueError("num_subbatches must be >= 1")
        if self.merge_overhead < 0:
            raise ValueError("merge_overhead must be >= 0")


@dataclass(frozen=True)
class CostModel:
    """Maps work to seconds. Subclass and override methods to inject
    synthetic costs."""

    memory_efficiency: float = DEFAULT_MEMORY_EFFICIENCY
    compute_efficiency: float = DEFAULT_COMPUTE_EFFICIENCY
    gpu_attention_efficiency: float = 0.60
    util_curve: UtilCurve = field(default_factory=UtilCurve)

    def gpu_linear_time(self, m: ModelConfig, gpu: DeviceSpec, batch: int, part: str,
                        lm_head: bool = False) -> float:
        if part == "none":
            work = None
        else:
            work = layer_linear_work(m, batch, weights_only=False, part=part)
        if lm_head:
            head = lm_head_work(m, batch, weights_only=False)
            work = head if work is None else work + head
        return estimate(work, gpu, self.memory_efficiency, self.compute_efficiency).time

    def gpu_attention_time(self, m: ModelConfig, gpu: DeviceSpec, batch: int, ctx) -> np.ndarray:
        ctx = np.asarray(ctx, dtype=np.float64)
        per_ctx = attention_layer_work(m, batch, 1)
        t_mem = per_ctx.bytes * ctx / (gpu.mem_bandwidth * self.gpu_attention_efficiency)
        t_cmp = per_ctx.flops * ctx / (gpu.peak_flops * self.compute_efficiency)
        return np.maximum(t_mem, t_cmp)

    def hpu_attention_time(self, m: ModelConfig, hpu: DeviceSpec, head_seqs: int, ctx) -> np.ndarray:
        est = engine_throughput_model(np.asarray(ctx), hpu, heads=head_seqs,
                                      head_dim=m.head_dim, group_size=m.group_size,
                                      bytes_per_elem=m.bytes_per_param, curve=self.util_curve)
        return np.asarray(est.est_time, dtype=np.float64)

    def transfer_time(self, nbytes: int, msgs: int, link: LinkModel,
                      host_hop: LinkModel | None = None) -> float:
        t = protocol.transfer_time(nbytes, msgs, link)
        if host_hop is not None:
            t += protocol.transfer_time(nbytes, msgs, host_hop)
        return t

    def merge_time(self, vectors: int, merge_overhead: float) -> float:
        return vectors * merge_overhead

    def prefill_time(self, m: ModelConfig, gpu: DeviceSpec, batch: int, input_len: int) -> float:
        return estimate(prefill_work(m, batch, input_len), gpu,
                        self.memory_efficiency, self.compute_efficiency).time


def to_ns(seconds) -> np.ndarray | int:
    """Round half up to integer nanoseconds."""
    a = np.floor(np.asarray(seconds, dtype=np.float64) * 1e9 + 0.5).astype(np.int64)
    return a if a.ndim else int(a)


# partitioning -------------------------------------------------------------

def _balanced(n: int, parts: int) -> list[range]:
    """Contiguous slices whose sizes differ by at most one; the first
    ``n % parts`` slices get the extra element."""
    base, extra = divmod(n, parts)
    out, pos = [], 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append(range(pos, pos + size))
        pos += size
    return out


def _strided(r: range, s: int, n: int) -> tuple[int, int, int]:
    """Bounds of the members of ``r`` congruent to ``s`` modulo ``n``."""
    first = r.start + (s - r.start) % n
    return first, max(first, r.stop), n


@dataclass(frozen=True)
class Assignment:
    partition: Partition
    batches: tuple[range, ...]   # per HPU
    heads: tuple[range, ...]     # per HPU

    @property
    def needs_merge(self) -> bool:
        return self.partition == Partition.HEAD_PARALLEL

    def tasks(self, hpu: int) -> list[tuple[int, int]]:
        return [(b, h) for b in self.batches[hpu] for h in self.heads[hpu]]

    def sizes(self) -> list[int]:
        return [len(b) * len(h) for b, h in zip(self.batches, self.heads)]


def partition_tasks(batch_size: int, num_heads: int, partition: Partition | str,
                    num_hpus: int) -> Assignment:
    """Split the (batch element, KV head) task grid over ``num_hpus`` cards."""
    if num_hpus < 1:
        raise ValueError("num_hpus must be >= 1")
    partition = Partition(partition)
    if partition == Partition.BATCH_PARALLEL:
        batches = _balanced(batch_size, num_hpus)
        heads = [range(num_heads)] * num_hpus
    else:
        batches = [range(batch_size)] * num_hpus
        heads = _balanced(num_heads, num_hpus)
    return Assignment(partition, tuple(batches), tuple(heads))


# timeline -------------------------------------------------------------------

@dataclass
class Timeline:
    """Struct-of-arrays event trace."""

    resource: np.ndarray
    kind: np.ndarray
    start: np.ndarray
    end: np.ndarray
    step: np.ndarray
    subbatch: np.ndarray
    work_bytes: np.ndarray
    pred: np.ndarray
    resource_names: list[str]
    layer: np.ndarray | None = None
    dep_ptr: np.ndarray | None = None
    dep_idx: np.ndarray | None = None

    CSV_COLUMNS = ("resource", "kind", "start_ns", "end_ns", "step", "subbatch")

    def __len__(self) -> int:
        return len(self.start)

    def events(self):
        kinds = [k.name.capitalize() if k != Kind.XFER else "Xfer" for k in Kind]
        for i in range(len(self)):
            yield (self.resource_names[self.resource[i]], kinds[self.kind[i]],
                   int(self.start[i]), int(self.end[i]), int(self.step[i]), int(self.subbatch[i]))

    def write_csv(self, fh, max_step: int | None = None) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for row in self.events():
            if max_step is not None and row[4] > max_step:
                continue
            w.writerow(row)

    def to_csv(self, max_step: int | None = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, max_step)
        return buf.getvalue()

    def overlaps(self) -> int:
        """Number of adjacent event pairs that overlap on some resource."""
        order = np.lexsort((self.start, self.resource))
        r, s, e = self.resource[order], self.start[order], self.end[order]
        same = r[1:] == r[:-1]
        return int(np.count_nonzero(same & (s[1:] < e[:-1])))


@dataclass
class StepReport:
    batch_size: int
    num_hpus: int
    tokens_per_s: float
    e2e_tokens_per_s: float
    generation_s: float
    prefill_s: float
    representative_step_s: float
    breakdown: dict
    per_device_busy: dict
    linear_flops: int
    attention_flops: int
    gpu_runs_attention: bool
    num_events: int

    def to_dict(self) -> dict:
        return asdict(self)


# scheduling kernels -----------------------------------------------------

@njit(cache=True)
def _schedule(res, dur, dep_ptr, dep_idx, n_res):
    n = res.shape[0]
    start = np.empty(n, np.int64)
    end = np.empty(n, np.int64)
    pred = np.empty(n, np.int64)
    free = np.zeros(n_res, np.int64)
    last = np.full(n_res, -1, np.int64)
    for e in range(n):
        r = res[e]
        t = free[r]
        p = last[r]
        for j in range(dep_ptr[e], dep_ptr[e + 1]):
            d = dep_idx[j]
            if end[d] >= t:
                t = end[d]
                p = d
        start[e] = t
        end[e] = t + dur[e]
        pred[e] = p
        free[r] = end[e]
        last[r] = e
    return start, end, pred


@njit(cache=True)
def _critical_path(start, end, pred, category, last_event, window_start, n_cat):
    """Walk binding predecessors back from ``last_event``; returns time per
    category inside the window, with unexplained time in the final slot."""
    acc = np.zeros(n_cat + 1, np.int64)
    e = last_event
    covered_from = end[e]
    while e >= 0 and end[e] > window_start:
        s = max(start[e], window_start)
        acc[category[e]] += end[e] - s
        covered_from = s
        e = pred[e]
    acc[n_cat] += covered_from - window_start
    return acc


CATEGORIES = ("gpu_linear", "gpu_attention", "hpu_attention", "network", "merge")


# simulation ---------------------------------------------------------------

def _check_memory(m, w, topo, policy, assignment, offload, calib):
    gpu = topo.gpu
    if not offload:
        rep = capacity_report(gpu, m, w, 0.0, **calib)
        if rep.oom:
            raise OutOfMemory(
                f"batch {w.batch_size} does not fit on {gpu.name}: max {rep.max_batch_exact}", rep)
        return
    need = m.weight_bytes + activation_reserve(
        gpu, calib.get("reserve_fraction", 0.05), calib.get("framework_overhead", 1_500_000_000))
    if need > gpu.mem_capacity:
        raise OutOfMemory(f"weights and reserve exceed {gpu.name} capacity")
    per_head_token = 2 * m.head_dim * m.bytes_per_param * m.num_layers
    spill = calib.get("spill_reserve", 0)
    for i, hpu in enumerate(topo.hpus):
        # one slot per resident sequence, each rounded to the interleave block
        per_seq = -(-w.max_context * per_head_token * len(assignment.heads[i]) // INTERLEAVE_BLOCK)
        per_seq *= INTERLEAVE_BLOCK
        used = per_seq * len(assignment.batches[i])
        if used + spill > hpu.mem_capacity:
            raise OutOfMemory(f"HPU{i} ({hpu.name}) needs {used} bytes of KV, "
                              f"has {hpu.mem_capacity - spill}")


def simulate(m: ModelConfig, w: WorkloadConfig, topo: Topology,
             policy: SimPolicy = SimPolicy(), cost: CostModel | None = None,
             capacity_kwargs: dict | None = None) -> tuple[Timeline, StepReport]:
    """Simulate prefill then ``w.output_len`` decode steps.

    Decode step ``t`` (1-based) attends over ``w.input_len + t`` tokens.
    Without HPUs (or with ``policy.offload`` off) attention runs on the GPU
    and the batch is not split.
    """
    cost = cost or CostModel()
    calib = dict(capacity_kwargs or {})
    offload = policy.offload and topo.num_hpus > 0
    n_hpu = topo.num_hpus if offload else 0
    B, T, L = w.batch_size, w.output_len, m.num_layers
    nsb = policy.num_subbatches if offload else 1
    if nsb > B:
        raise InfeasiblePolicy(f"{nsb} sub-batches for batch {B}")
    assignment = partition_tasks(B, m.num_kv_heads, policy.partition, n_hpu) if offload else None
    _check_memory(m, w, topo, policy, assignment, offload, calib)

    ctx = w.input_len + np.arange(1, T + 1)
    n_res = 2 + 3 * max(topo.num_hpus, 0)

    # sub-batch composition: per sub-batch batch size and per-HPU head-seqs
    if offload and policy.partition == Partition.BATCH_PARALLEL:
        # sequence b joins sub-batch b % nsb, so no sub-batch is empty and
        # each HPU's share of a sub-batch differs from the others by <= 1
        sb_hpu_seqs = [[len(range(*_strided(r, s, nsb))) for r in assignment.batches]
                       for s in range(nsb)]
        sb_batch = [sum(row) for row in sb_hpu_seqs]
        sb_hpu_heads = [[k * m.num_kv_heads for k in row] for row in sb_hpu_seqs]
    elif offload:
        sb_batch = [len(r) for r in _balanced(B, nsb)]
        sb_hpu_heads = [[b * len(assignment.heads[i]) for i in range(n_hpu)] for b in sb_batch]
    else:
        sb_batch = [B]
        sb_hpu_heads = [[]]

    # block templates ------------------------------------------------------
    # each entry: (resource, kind, duration spec, local deps, bytes spec)
    blocks = []
    for s in range(nsb):
        b = sb_batch[s]
        first = to_ns(cost.gpu_linear_time(m, topo.gpu, b, "pre"))
        mid = to_ns(cost.gpu_linear_time(m, topo.gpu, b, "all"))
        wrap = to_ns(cost.gpu_linear_time(m, topo.gpu, b, "all", lm_head=m.include_lm_head))
        ev = [dict(res=GPU_RES, kind=Kind.LINEAR, dur=("gpu", first, wrap, mid), deps=(), nbytes=0)]
        completion = []
        if not offload:
            gdur = to_ns(cost.gpu_attention_time(m, topo.gpu, b, ctx))
            ev.append(dict(res=GPU_RES, kind=Kind.ATTENTION, dur=("ctx", gdur), deps=(0,),
                           nbytes=("ctx", attention_layer_work(m, b, 1).bytes * ctx)))
            completion = [1]
        else:
            for i in range(n_hpu):
                hs = sb_hpu_heads[s][i]
                if hs == 0:
                    continue
                out_b, out_f = protocol.request_bytes(hs, m.group_size, m.head_dim)
                back_b, back_f = protocol.response_bytes(hs, m.group_size, m.head_dim)
                x_out = to_ns(cost.transfer_time(out_b, out_f, topo.links[i], topo.host_hop))
                x_back = to_ns(cost.transfer_time(back_b, back_f, topo.links[i], topo.host_hop))
                adur = to_ns(cost.hpu_attention_time(m, topo.hpus[i], hs, ctx))
                j = len(ev)
                ev.append(dict(res=tx_res(i), kind=Kind.XFER, dur=("const", x_out), deps=(0,), nbytes=0))
                ev.append(dict(res=hpu_res(i), kind=Kind.ATTENTION, dur=("ctx", adur), deps=(j,),
                               nbytes=("ctx", 2 * m.head_dim * m.bytes_per_param * hs * ctx)))
                ev.append(dict(res=rx_res(i), kind=Kind.XFER, dur=("const", x_back), deps=(j + 1,),
                               nbytes=0))
                completion.append(j + 2)
            if assignment.needs_merge:
                vectors = sb_batch[s] * sum(1 for i in range(n_hpu) if sb_hpu_heads[s][i])
                mdur = to_ns(cost.merge_time(vectors, policy.merge_overhead))
                ev.append(dict(res=HOST_RES, kind=Kind.MERGE, dur=("const", mdur),
                               deps=tuple(completion), nbytes=0))
                completion = [len(ev) - 1]
        ev[0]["deps"] = ("prev",) * len(completion)
        blocks.append((ev, completion))

    # prefill ------------------------------------------------------------------
    pre_res, pre_kind, pre_dur, pre_deps = [GPU_RES], [Kind.LINEAR], [
        to_ns(cost.prefill_time(m, topo.gpu, B, w.input_len))], [[]]
    if offload:
        seq_kv = w.input_len * 2 * m.head_dim * m.bytes_per_param * m.num_layers
        for i in range(n_hpu):
            if not assignment.sizes()[i]:
                continue
            nbytes = seq_kv * len(assignment.batches[i]) * len(assignment.heads[i])
            pre_res.append(tx_res(i))
            pre_kind.append(Kind.XFER)
            pre_dur.append(to_ns(cost.transfer_time(nbytes, 1, topo.links[i], topo.host_hop)))
            pre_deps.append([0])
    n_pre = len(pre_res)
    # prefill events all start together, so the longest one finishes last;
    # decoding waits for it
    first_dep = int(np.argmax([pre_dur[0]] + [pre_dur[0] + d for d in pre_dur[1:]]))

    # assemble arrays ----------------------------------------------------------
    TL = T * L
    offs, period = [], 0
    for ev, _ in blocks:
        offs.append(period)
        period += len(ev)
    dep_counts = [[len(e["deps"]) for e in ev] for ev, _ in blocks]
    doffs, dperiod = [], 0
    for counts in dep_counts:
        row = []
        for c in counts:
            row.append(dperiod)
            dperiod += c
        doffs.append(row)
    n_tail = nsb
    n_ev = n_pre + TL * period + n_tail
    n_pre_deps = sum(len(d) for d in pre_deps)
    n_tail_deps = sum(len(c) for _, c in blocks)
    n_deps = n_pre_deps + TL * dperiod + n_tail_deps

    idx_dtype = np.int64
    res = np.empty(n_ev, np.int16)
    kind = np.empty(n_ev, np.int8)
    dur = np.empty(n_ev, np.int64)
    step = np.empty(n_ev, np.int32)
    sbat = np.empty(n_ev, np.int16)
    layer = np.empty(n_ev, np.int16)
    nbytes_arr = np.zeros(n_ev, np.int64)
    dep_count = np.empty(n_ev, np.int64)
    dep_idx = np.empty(n_deps, idx_dtype)

    res[:n_pre] = pre_res
    kind[:n_pre] = pre_kind
    dur[:n_pre] = pre_dur
    step[:n_pre] = 0
    sbat[:n_pre] = -1
    layer[:n_pre] = -1
    dep_count[:n_pre] = [len(d) for d in pre_deps]
    dep_idx[:n_pre_deps] = [x for d in pre_deps for x in d]

    tl = np.arange(TL)
    t_of = tl // L                      # 0-based token step
    l_of = tl % L
    stop = n_pre + TL * period
    for s, (ev, completion) in enumerate(blocks):
        for j, e in enumerate(ev):
            sl = slice(n_pre + offs[s] + j, stop, period)
            res[sl] = e["res"]
            kind[sl] = e["kind"]
            step[sl] = t_of + 1
            sbat[sl] = s
            layer[sl] = l_of
            spec = e["dur"]
            if spec[0] == "gpu":
                _, first, wrap, mid = spec
                d = np.full(TL, mid, np.int64)
                d[l_of == 0] = wrap
                d[0] = first
                dur[sl] = d
            elif spec[0] == "ctx":
                dur[sl] = spec[1][t_of]
            else:
                dur[sl] = spec[1]
            if e["nbytes"]:
                nbytes_arr[sl] = np.asarray(e["nbytes"][1], dtype=np.int64)[t_of]
            dep_count[sl] = len(e["deps"])
            base = n_pre_deps + doffs[s][j]
            for k, dep in enumerate(e["deps"]):
                dsl = slice(base + k, n_pre_deps + TL * dperiod, dperiod)
                if dep == "prev":
                    target = n_pre + (tl - 1) * period + offs[s] + completion[k]
                    target[0] = first_dep
                else:
                    target = n_pre + tl * period + offs[s] + dep
                dep_idx[dsl] = target

    # tails: the post-attention half of the last layer of the last step
    pos = n_pre_deps + TL * dperiod
    for s, (ev, completion) in enumerate(blocks):
        e_i = stop + s
        res[e_i] = GPU_RES
        kind[e_i] = Kind.LINEAR
        dur[e_i] = to_ns(cost.gpu_linear_time(m, topo.gpu, sb_batch[s], "post",
                                              lm_head=m.include_lm_head))
        step[e_i] = T
        sbat[e_i] = s
        layer[e_i] = L - 1
        dep_count[e_i] = len(completion)
        for c in completion:
            dep_idx[pos] = n_pre + (TL - 1) * period + offs[s] + c
            pos += 1

    dep_ptr = np.zeros(n_ev + 1, np.int64)
    np.cumsum(dep_count, out=dep_ptr[1:])
    start, end, pred = _schedule(res.astype(np.int64), dur, dep_ptr, dep_idx, n_res)

    timeline = Timeline(res, kind, start, end, step, sbat, nbytes_arr, pred,
                        resource_names(topo.num_hpus), layer, dep_ptr, dep_idx)
    report = _report(m, w, topo, timeline, n_pre, offload)
    return timeline, report


def _category(timeline: Timeline) -> np.ndarray:
    cat = np.empty(len(timeline), np.int64)
    k, r = timeline.kind, timeline.resource
    cat[k == Kind.LINEAR] = 0
    cat[(k == Kind.ATTENTION) & (r == GPU_RES)] = 1
    cat[(k == Kind.ATTENTION) & (r != GPU_RES)] = 2
    cat[k == Kind.XFER] = 3
    cat[k == Kind.MERGE] = 4
    return cat


def _report(m, w, topo, tl: Timeline, n_pre, offload) -> StepReport:
    gen = tl.step > 0
    gen[:n_pre] = False
    g0 = int(tl.start[gen].min())
    g1 = int(tl.end.max())
    last = int(np.argmax(tl.end))
    span = g1 - g0
    acc = _critical_path(tl.start, tl.end, tl.pred, _category(tl), last, g0, len(CATEGORIES))
    breakdown = {name: float(acc[i] / span) for i, name in enumerate(CATEGORIES)}
    breakdown["idle"] = float(acc[-1] / span)

    lo = np.maximum(tl.start, g0)
    busy_ns = np.bincount(tl.resource, weights=np.maximum(tl.end - lo, 0),
                          minlength=len(tl.resource_names))
    busy = {name: float(busy_ns[i] / span) for i, name in enumerate(tl.resource_names)}

    step_end = np.zeros(w.output_len + 1, np.int64)
    np.maximum.at(step_end, tl.step[gen], tl.end[gen])
    step_end[0] = g0
    rep_step = max(1, (w.output_len + 1) // 2)
    tokens = w.batch_size * w.output_len
    lin = linear_step_work(m, w.batch_size).flops * w.output_len
    ctx = w.input_len + np.arange(1, w.output_len + 1)
    attn = int(attention_layer_work(m, w.batch_size, 1).flops * m.num_layers * int(ctx.sum()))
    return StepReport(
        batch_size=w.batch_size,
        num_hpus=topo.num_hpus if offload else 0,
        tokens_per_s=tokens / (span * 1e-9),
        e2e_tokens_per_s=tokens / (g1 * 1e-9),
        generation_s=span * 1e-9,
        prefill_s=g0 * 1e-9,
        representative_step_s=float(step_end[rep_step] - step_end[rep_step - 1]) * 1e-9,
        breakdown=breakdown,
        per_device_busy=busy,
        linear_flops=int(lin),
        attention_flops=attn,
        gpu_runs_attention=not offload,
        num_events=len(tl),
    )


# analytic balance ---------------------------------------------------------

@dataclass(frozen=True)
class BalanceReport:
    gpu_time: float
    hpu_time: float
    imbalance: float
    bottleneck: str
    hpu_utilization: float


def balance_report(m: ModelConfig, w: WorkloadConfig, topo: Topology,
                   policy: SimPolicy = SimPolicy(), cost: CostModel | None = None) -> BalanceReport:
    """Per-step GPU linear time against the busiest HPU's attention time at
    the mean decode context, ignoring transfers and overlap."""
    cost = cost or CostModel()
    if topo.num_hpus == 0 or not policy.offload:
        raise ValueError("balance needs at least one HPU with offload enabled")
    nsb = min(policy.num_subbatches, w.batch_size)
    assignment = partition_tasks(w.batch_size, m.num_kv_heads, policy.partition, topo.num_hpus)
    ctx = w.mean_context
    gpu_t = sum(cost.gpu_linear_time(m, topo.gpu, len(r), "all") * m.num_layers
                for r in _balanced(w.batch_size, nsb) if len(r))
    hpu_ts = [float(cost.hpu_attention_time(m, h, n, ctx)) * m.num_layers if n else 0.0
              for h, n in zip(topo.hpus, assignment.sizes())]
    hpu_t = max(hpu_ts)
    lo, hi = min(gpu_t, hpu_t), max(gpu_t, hpu_t)
    imbalance = hi / lo if lo > 0 else math.inf
    if math.isclose(gpu_t, hpu_t, rel_tol=1e-12):
        side = "balanced"
    else:
        side = "hpu" if hpu_t > gpu_t else "gpu"
    return BalanceReport(gpu_t, hpu_t, imbalance, side, hpu_t / hi if hi else 0.0)


def report_json(report: StepReport) -> str:
    return json.dumps({"schema": "hpusim.step_report/1", **report.to_dict()},
                      indent=2, sort_keys=True) + "\n"
