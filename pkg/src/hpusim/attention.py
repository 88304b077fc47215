"""Functional model of the HPU attention engine.

One task is one KV head of one sequence together with the ``g`` query heads
that share it. Inputs and outputs are fp16; dot products and the softmax run
in fp32 with a running max, streaming K/V from the store tile by tile in
address order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvcache import KvStore, SequenceSlot
from .model import DeviceSpec

MAX_GROUP_SIZE = 8
MAX_CHUNK = 256


class AttentionError(Exception):
    pass


class DimensionMismatch(AttentionError):
    pass


class SlotEmpty(AttentionError):
    pass


class ChunkTooLarge(AttentionError):
    pass


class OverlappingTasks(AttentionError):
    pass


@dataclass
class HeadTask:
    q: np.ndarray            # (g, d) fp16
    k_new: np.ndarray        # (d,) fp16
    v_new: np.ndarray        # (d,) fp16
    slot: SequenceSlot
    head: int                # (layer, kv-head) index inside the slot
    seq_len: int             # tokens attended over, including the new one

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float16))
        self.k_new = np.asarray(self.k_new, dtype=np.float16)
        self.v_new = np.asarray(self.v_new, dtype=np.float16)
        g, d = self.q.shape
        if not 1 <= g <= MAX_GROUP_SIZE:
            raise DimensionMismatch(f"group size {g} outside 1..{MAX_GROUP_SIZE}")
        if d != self.slot.head_dim or self.k_new.shape != (d,) or self.v_new.shape != (d,):
            raise DimensionMismatch(
                f"q {self.q.shape}, k {self.k_new.shape}, v {self.v_new.shape} "
                f"vs head_dim {self.slot.head_dim}")
        if not 0 <= self.head < self.slot.num_heads:
            raise DimensionMismatch(f"head {self.head} not in slot")
        if self.seq_len < 1:
            raise DimensionMismatch("seq_len must be >= 1")

    @property
    def group_size(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]


@dataclass
class AttnOutput:
    out: np.ndarray          # (g, d) fp16
    max_score: np.ndarray    # (g,) fp32
    denom: np.ndarray        # (g,) fp32
    weight_sum: np.ndarray   # (g,) fp32, sum of the normalised attention weights


def attend(task: HeadTask, store: KvStore, tile_tokens: int | None = None) -> AttnOutput:
    """Append the task's new K/V, then attend over the whole head."""
    slot, h = task.slot, task.head
    have = int(slot.head_tokens[h])
    if have != task.seq_len - 1:
        if have == 0:
            raise SlotEmpty(f"sequence {slot.seq_id} head {h} has no context for L={task.seq_len}")
        raise DimensionMismatch(f"head holds {have} tokens, task expects {task.seq_len - 1}")
    store.append_token(slot, task.k_new, task.v_new, head=h)
    return _attend_cached(task.q, store, slot, h, tile_tokens)


def _attend_cached(q16, store, slot, head, tile_tokens=None) -> AttnOutput:
    g, d = q16.shape
    q = q16.astype(np.float32)
    scale = np.float32(1.0 / np.sqrt(d))
    run_max = np.full(g, -np.inf, dtype=np.float32)
    denom = np.zeros(g, dtype=np.float32)
    acc = np.zeros((g, d), dtype=np.float32)
    tile_max, tile_sum = [], []
    for k16, v16 in store.stream_head(slot, head, tile_tokens):
        s = (q @ k16.astype(np.float32).T) * scale           # (g, T)
        m_tile = s.max(axis=1)
        m_new = np.maximum(run_max, m_tile)
        corr = np.exp(run_max - m_new)
        p = np.exp(s - m_new[:, None])
        denom = denom * corr + p.sum(axis=1)
        acc = acc * corr[:, None] + p @ v16.astype(np.float32)
        run_max = m_new
        tile_max.append(m_tile)
        tile_sum.append(np.exp(s - m_tile[:, None]).sum(axis=1))
    if not tile_max:
        raise SlotEmpty(f"sequence {slot.seq_id} head {head} is empty")
    out = (acc / denom[:, None]).astype(np.float16)
    # independent re-accumulation of the weights, per tile against its own max
    tm, ts = np.array(tile_max), np.array(tile_sum)
    weight_sum = (ts * np.exp(tm - run_max)).sum(axis=0) / denom
    return AttnOutput(out, run_max, denom, weight_sum.astype(np.float32))


def attend_chunk(tasks: list[HeadTask], store: KvStore) -> list[AttnOutput]:
    """Run up to 256 tasks; results equal running each task alone, in order."""
    if len(tasks) > MAX_CHUNK:
        raise ChunkTooLarge(f"{len(tasks)} tasks > {MAX_CHUNK}")
    seen = set()
    for t in tasks:
        key = (t.slot.kv_base_addr, t.head)
        if key in seen:
            raise OverlappingTasks(f"two tasks target sequence {t.slot.seq_id} head {t.head}")
        seen.add(key)
    return [attend(t, store) for t in tasks]


# performance model -------------------------------------------------------

@dataclass(frozen=True)
class UtilCurve:
    """Saturating memory utilisation ``floor + (ceiling - floor) L / (L + L_half)``,
    with ``L_half`` chosen so that util(anchor_len) == anchor."""

    floor: float = 0.25
    ceiling: float = 0.90
    anchor_len: int = 2048
    anchor: float = 0.73

    def __post_init__(self):
        if not 0 < self.floor < self.anchor < self.ceiling <= 1:
            raise ValueError("need 0 < floor < anchor < ceiling <= 1")

    @property
    def half_len(self) -> float:
        return self.anchor_len * (self.ceiling - self.anchor) / (self.anchor - self.floor)

    def __call__(self, seq_len):
        L = np.asarray(seq_len, dtype=np.float64)
        # L counts tokens; L = 1 pins the curve to its floor
        x = np.maximum(L - 1, 0)
        lh = self.half_len * (self.anchor_len - 1) / self.anchor_len
        util = self.floor + (self.ceiling - self.floor) * x / (x + lh)
        return util if util.ndim else float(util)


@dataclass(frozen=True)
class EngineEstimate:
    bytes_read: object
    est_time: object
    mem_util: object


def engine_throughput_model(seq_len, dev: DeviceSpec, heads: int = 1, head_dim: int = 128,
                            group_size: int = 1, bytes_per_elem: int = 2,
                            curve: UtilCurve = UtilCurve()) -> EngineEstimate:
    """Time for the engine to stream ``heads`` KV heads of length ``seq_len``.

    Vectorised over ``seq_len``. The engine is memory bound at the curve's
    utilisation unless the GQA group makes it compute bound at peak FLOPs.
    """
    L = np.asarray(seq_len, dtype=np.float64)
    nbytes = 2 * L * head_dim * bytes_per_elem * heads
    flops = 4 * group_size * L * head_dim * heads
    util = np.asarray(curve(L))
    t = np.maximum(nbytes / (dev.mem_bandwidth * util), flops / dev.peak_flops)
    if L.ndim == 0:
        return EngineEstimate(int(nbytes), float(t), float(util))
    return EngineEstimate(nbytes, t, util)
