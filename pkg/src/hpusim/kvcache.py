"""Functional KV-cache store for one HPU card.

The card's HBM is modelled as ``num_ports`` independent ports; logical
addresses are striped across them in 64-byte blocks (round robin). Each
sequence owns one contiguous slot laid out head-major::

    slot = [head 0: K[max_tokens, d] | V[max_tokens, d]] [head 1: ...] ...

where "head" enumerates every (layer, kv-head) pair the card holds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DeviceKind, DeviceSpec, ModelConfig, WorkloadConfig, kv_bytes_per_token

INTERLEAVE_BLOCK = 64
PAGE_BYTES = 1 << 20


class KvCacheError(Exception):
    pass


class CapacityExceeded(KvCacheError):
    pass


class SlotFull(KvCacheError):
    pass


class AddressError(KvCacheError):
    pass


@dataclass(frozen=True)
class KvLayout:
    region_size: int
    num_ports: int = 8
    region_base: int = 0
    interleave_block: int = INTERLEAVE_BLOCK

    def __post_init__(self):
        if self.interleave_block != INTERLEAVE_BLOCK:
            raise ValueError("interleave block is fixed at 64 bytes")
        if self.num_ports < 1:
            raise ValueError("num_ports must be >= 1")
        if self.region_size <= 0 or self.region_size % (self.interleave_block * self.num_ports):
            raise ValueError("region_size must be a positive multiple of 64 * num_ports")

    @property
    def row_bytes(self) -> int:
        return self.interleave_block * self.num_ports


def interleave(addr: int, layout: KvLayout) -> tuple[int, int]:
    """Map a region-relative byte address to ``(port, offset within port)``."""
    if not 0 <= addr < layout.region_size:
        raise AddressError(f"address {addr:#x} outside region of {layout.region_size} bytes")
    blk, within = divmod(addr, layout.interleave_block)
    port = blk % layout.num_ports
    offset = (addr // layout.row_bytes) * layout.interleave_block + within
    return port, offset


def deinterleave(port: int, offset: int, layout: KvLayout) -> int:
    row, within = divmod(offset, layout.interleave_block)
    return row * layout.row_bytes + port * layout.interleave_block + within


@dataclass
class SequenceSlot:
    seq_id: int
    kv_base_addr: int
    max_tokens: int
    head_stride: int
    num_heads: int
    head_dim: int
    bytes_per_elem: int = 2
    head_tokens: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.head_tokens is None:
            self.head_tokens = np.zeros(self.num_heads, dtype=np.int64)

    @property
    def cur_tokens(self) -> int:
        return int(self.head_tokens.max(initial=0))

    @property
    def size(self) -> int:
        return _round_up(self.num_heads * self.head_stride, INTERLEAVE_BLOCK)

    @property
    def row_bytes(self) -> int:
        return self.head_dim * self.bytes_per_elem

    def k_addr(self, head: int, token: int) -> int:
        return self.kv_base_addr + head * self.head_stride + token * self.row_bytes

    def v_addr(self, head: int, token: int) -> int:
        return self.k_addr(head, token) + self.max_tokens * self.row_bytes


def _round_up(n: int, k: int) -> int:
    return -(-n // k) * k


class KvStore:
    """Sparse, interleaved KV-cache memory with a first-fit slot allocator.

    Physical memory is allocated lazily in 1 MiB pages, so a 16 GiB card
    costs nothing until it is written.
    """

    def __init__(self, layout: KvLayout, head_dim: int, num_heads: int,
                 bytes_per_elem: int = 2, spill_reserve: int = 0):
        if head_dim <= 0 or num_heads <= 0:
            raise ValueError("head_dim and num_heads must be > 0")
        self.layout = layout
        self.head_dim = head_dim
        self.num_heads = num_heads
        self.bytes_per_elem = bytes_per_elem
        self.spill_reserve = _round_up(spill_reserve, layout.row_bytes)
        if self.spill_reserve > layout.region_size:
            raise ValueError("spill reserve larger than region")
        usable = layout.region_size - self.spill_reserve
        self._free: list[tuple[int, int]] = [(0, usable)] if usable else []
        self.slots: dict[int, SequenceSlot] = {}
        self._next_id = 0
        self._rows_per_page = PAGE_BYTES // layout.row_bytes or 1
        self._page_bytes = self._rows_per_page * layout.row_bytes
        self._pages: dict[int, np.ndarray] = {}
        self.port_reads = np.zeros(layout.num_ports, dtype=np.int64)
        self.port_writes = np.zeros(layout.num_ports, dtype=np.int64)

    @classmethod
    def for_model(cls, m: ModelConfig, capacity: int, num_ports: int = 8,
                  heads_share: int | None = None, spill_reserve: int = 0) -> KvStore:
        """Store holding ``heads_share`` (layer, kv-head) pairs of ``m`` per
        sequence; defaults to all of them."""
        heads = heads_share if heads_share is not None else m.num_layers * m.num_kv_heads
        row = INTERLEAVE_BLOCK * num_ports
        layout = KvLayout(region_size=capacity - capacity % row, num_ports=num_ports)
        return cls(layout, m.head_dim, heads, m.bytes_per_param, spill_reserve)

    # allocation -------------------------------------------------------

    def slot_bytes(self, max_tokens: int) -> int:
        return _round_up(self.num_heads * 2 * max_tokens * self.head_dim * self.bytes_per_elem,
                         INTERLEAVE_BLOCK)

    @property
    def free_bytes(self) -> int:
        return sum(size for _, size in self._free)

    def alloc_sequence(self, seq_len_budget: int, seq_id: int | None = None) -> SequenceSlot:
        if seq_len_budget < 1:
            raise ValueError("seq_len_budget must be >= 1")
        need = self.slot_bytes(seq_len_budget)
        for i, (start, size) in enumerate(self._free):
            if size >= need:
                if size == need:
                    del self._free[i]
                else:
                    self._free[i] = (start + need, size - need)
                break
        else:
            raise CapacityExceeded(
                f"need {need} contiguous bytes, {self.free_bytes} free in {len(self._free)} extents")
        if seq_id is None:
            seq_id = self._next_id
        if seq_id in self.slots:
            raise ValueError(f"sequence {seq_id} already allocated")
        self._next_id = max(self._next_id, seq_id + 1)
        slot = SequenceSlot(seq_id, start, seq_len_budget,
                            head_stride=2 * seq_len_budget * self.head_dim * self.bytes_per_elem,
                            num_heads=self.num_heads, head_dim=self.head_dim,
                            bytes_per_elem=self.bytes_per_elem)
        self.slots[seq_id] = slot
        return slot

    def free(self, slot: SequenceSlot) -> None:
        del self.slots[slot.seq_id]
        extents = sorted(self._free + [(slot.kv_base_addr, slot.size)])
        merged: list[tuple[int, int]] = []
        for start, size in extents:
            if merged and merged[-1][0] + merged[-1][1] == start:
                merged[-1] = (merged[-1][0], merged[-1][1] + size)
            else:
                merged.append((start, size))
        self._free = merged

    # raw access ---------------------------------------------------------

    def _page(self, idx: int, create: bool) -> np.ndarray | None:
        page = self._pages.get(idx)
        if page is None and create:
            page = np.zeros((self.layout.num_ports, self._rows_per_page, INTERLEAVE_BLOCK),
                            dtype=np.uint8)
            self._pages[idx] = page
        return page

    def _spans(self, addr: int, n: int):
        if n < 0 or addr < 0 or addr + n > self.layout.region_size:
            raise AddressError(f"range [{addr:#x}, {addr + n:#x}) outside region")
        pos, end = addr, addr + n
        while pos < end:
            idx, lo = divmod(pos, self._page_bytes)
            hi = min(end - idx * self._page_bytes, self._page_bytes)
            yield idx, lo, hi
            pos = idx * self._page_bytes + hi

    def _block_index(self, lo: int, hi: int):
        b0, b1 = lo // INTERLEAVE_BLOCK, -(-hi // INTERLEAVE_BLOCK)
        blk = np.arange(b0, b1)
        ports = blk % self.layout.num_ports
        rows = blk // self.layout.num_ports
        return b0, ports, rows

    def read(self, addr: int, n: int) -> bytes:
        out = bytearray()
        for idx, lo, hi in self._spans(addr, n):
            b0, ports, rows = self._block_index(lo, hi)
            self.port_reads += np.bincount(ports, minlength=self.layout.num_ports)
            page = self._page(idx, create=False)
            if page is None:
                out += bytes(hi - lo)
                continue
            flat = page[ports, rows].reshape(-1)
            start = lo - b0 * INTERLEAVE_BLOCK
            out += flat[start:start + hi - lo].tobytes()
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        done = 0
        for idx, lo, hi in self._spans(addr, len(buf)):
            b0, ports, rows = self._block_index(lo, hi)
            self.port_writes += np.bincount(ports, minlength=self.layout.num_ports)
            page = self._page(idx, create=True)
            flat = page[ports, rows].reshape(-1)
            start = lo - b0 * INTERLEAVE_BLOCK
            flat[start:start + hi - lo] = buf[done:done + hi - lo]
            page[ports, rows] = flat.reshape(-1, INTERLEAVE_BLOCK)
            done += hi - lo

    # token-level access -----------------------------------------------

    def _as_half(self, x, shape) -> np.ndarray:
        a = np.asarray(x)
        if a.dtype != np.float16:
            a = a.astype(np.float16)
        if a.shape != shape:
            raise ValueError(f"expected shape {shape}, got {a.shape}")
        return a.astype("<f2", copy=False)

    def append_token(self, slot: SequenceSlot, k, v, head: int | None = None) -> None:
        """Append one token's K/V.

        With ``head=None`` ``k`` and ``v`` carry every head, shape
        ``(num_heads, head_dim)``; otherwise a single ``(head_dim,)`` row.
        """
        heads = range(slot.num_heads) if head is None else [head]
        d = slot.head_dim
        if head is None:
            k = self._as_half(k, (slot.num_heads, d))
            v = self._as_half(v, (slot.num_heads, d))
        else:
            if not 0 <= head < slot.num_heads:
                raise IndexError(f"head {head} out of range")
            k = self._as_half(k, (d,))[None]
            v = self._as_half(v, (d,))[None]
        for i, h in enumerate(heads):
            t = int(slot.head_tokens[h])
            if t >= slot.max_tokens:
                raise SlotFull(f"sequence {slot.seq_id} head {h} holds {t} tokens")
        for i, h in enumerate(heads):
            t = int(slot.head_tokens[h])
            self.write(slot.k_addr(h, t), k[i].tobytes())
            self.write(slot.v_addr(h, t), v[i].tobytes())
            slot.head_tokens[h] = t + 1

    def load_context(self, slot: SequenceSlot, head: int, k, v) -> None:
        """Bulk-write ``(n, head_dim)`` K and V rows as the head's first ``n`` tokens."""
        if not 0 <= head < slot.num_heads:
            raise IndexError(f"head {head} out of range")
        k = np.asarray(k, dtype=np.float16)
        n = k.shape[0] if k.ndim == 2 else 0
        k = self._as_half(k, (n, slot.head_dim))
        v = self._as_half(v, (n, slot.head_dim))
        if n > slot.max_tokens:
            raise SlotFull(f"{n} tokens > slot budget {slot.max_tokens}")
        if n:
            self.write(slot.k_addr(head, 0), k.tobytes())
            self.write(slot.v_addr(head, 0), v.tobytes())
        slot.head_tokens[head] = n

    def read_head(self, slot: SequenceSlot, head: int, ntokens: int | None = None):
        """Return ``(K, V)`` for one head as ``(ntokens, head_dim)`` fp16 arrays."""
        n = int(slot.head_tokens[head]) if ntokens is None else ntokens
        nbytes = n * slot.row_bytes
        k = np.frombuffer(self.read(slot.k_addr(head, 0), nbytes), dtype="<f2")
        v = np.frombuffer(self.read(slot.v_addr(head, 0), nbytes), dtype="<f2")
        return k.reshape(n, slot.head_dim), v.reshape(n, slot.head_dim)

    def stream_head(self, slot: SequenceSlot, head: int, tile_tokens: int | None = None):
        """Yield ``(K_tile, V_tile)`` pairs in address order.

        The default tile covers 64 full interleave rows of K, so each tile
        touches every port the same number of times.
        """
        n = int(slot.head_tokens[head])
        if tile_tokens is None:
            tile_tokens = max(1, 64 * self.layout.row_bytes // slot.row_bytes)
        for t0 in range(0, n, tile_tokens):
            t1 = min(n, t0 + tile_tokens)
            nbytes = (t1 - t0) * slot.row_bytes
            k = np.frombuffer(self.read(slot.k_addr(head, t0), nbytes), dtype="<f2")
            v = np.frombuffer(self.read(slot.v_addr(head, t0), nbytes), dtype="<f2")
            yield k.reshape(-1, slot.head_dim), v.reshape(-1, slot.head_dim)

    # image export -----------------------------------------------------

    def export_image(self, path) -> tuple[Path, Path]:
        """Write ``<path>.bin`` (touched pages, physical order) and
        ``<path>.json`` (layout and slot table)."""
        path = Path(path)
        bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
        pages = sorted(self._pages)
        with open(bin_path, "wb") as fh:
            for idx in pages:
                fh.write(self._pages[idx].tobytes())
        manifest = {
            "format": "hpusim-kv-image",
            "version": 1,
            "layout": {"region_size": self.layout.region_size,
                       "num_ports": self.layout.num_ports,
                       "region_base": self.layout.region_base,
                       "interleave_block": self.layout.interleave_block},
            "head_dim": self.head_dim,
            "num_heads": self.num_heads,
            "bytes_per_elem": self.bytes_per_elem,
            "spill_reserve": self.spill_reserve,
            "page_bytes": self._page_bytes,
            "pages": pages,
            "slots": [{"seq_id": s.seq_id, "kv_base_addr": s.kv_base_addr,
                       "max_tokens": s.max_tokens, "head_tokens": s.head_tokens.tolist()}
                      for s in sorted(self.slots.values(), key=lambda s: s.kv_base_addr)],
        }
        man_path.write_text(json.dumps(manifest, indent=2) + "\n")
        return bin_path, man_path

    @classmethod
    def import_image(cls, path) -> KvStore:
        path = Path(path)
        man = json.loads(path.with_suffix(".json").read_text())
        if man.get("format") != "hpusim-kv-image":
            raise ValueError("not a KV image manifest")
        store = cls(KvLayout(**man["layout"]), man["head_dim"], man["num_heads"],
                    man["bytes_per_elem"], man["spill_reserve"])
        raw = np.fromfile(path.with_suffix(".bin"), dtype=np.uint8)
        shape = (store.layout.num_ports, store._rows_per_page, INTERLEAVE_BLOCK)
        size = math.prod(shape)
        if raw.size != size * len(man["pages"]):
            raise ValueError("image size does not match manifest")
        for i, idx in enumerate(man["pages"]):
            store._pages[idx] = raw[i * size:(i + 1) * size].reshape(shape).copy()
        for s in man["slots"]:
            slot = store.alloc_sequence(s["max_tokens"], seq_id=s["seq_id"])
            if slot.kv_base_addr != s["kv_base_addr"]:
                raise ValueError("slot table does not replay onto the allocator")
            slot.head_tokens[:] = s["head_tokens"]
        store.port_reads[:] = 0
        store.port_writes[:] = 0
        return store


# capacity planning ----------------------------------------------------

@dataclass(frozen=True)
class CapacityReport:
    device_capacity: int
    weights_bytes: int
    kv_bytes: int
    activation_reserve: int
    max_batch: int
    oom: bool
    max_batch_exact: int = 0
    per_sequence_bytes: int = 0


def activation_reserve(dev: DeviceSpec, reserve_fraction: float = 0.05,
                       framework_overhead: int = 1_500_000_000) -> int:
    return int(round(dev.mem_capacity * reserve_fraction)) + int(framework_overhead)


def _on_grid(n: int, grid: str) -> int:
    if n <= 0:
        return 0
    if grid == "pow2":
        return 1 << (n.bit_length() - 1)
    if grid == "linear":
        return n
    raise ValueError(f"unknown batch grid {grid!r}")


def capacity_report(dev: DeviceSpec, m: ModelConfig, w: WorkloadConfig,
                    offload_fraction: float = 0.0, hpu_pool=(),
                    reserve_fraction: float = 0.05, framework_overhead: int = 1_500_000_000,
                    spill_reserve: int = 0, batch_grid: str = "pow2") -> CapacityReport:
    """Memory fit of ``w`` on ``dev`` with a fraction of the KV cache offloaded.

    ``max_batch`` is the largest batch on ``batch_grid`` (powers of two by
    default, the batch sweep used in the experiments) that fits;
    ``max_batch_exact`` is the unrestricted integer bound. With
    ``offload_fraction > 0`` the HPU pool bounds the batch as well.
    """
    if not 0 <= offload_fraction <= 1:
        raise ValueError("offload_fraction must be in [0, 1]")
    seq_kv = w.max_context * kv_bytes_per_token(m)
    resident = seq_kv - int(math.floor(seq_kv * offload_fraction))
    weights = m.weight_bytes if dev.kind == DeviceKind.GPU else 0
    reserve = (activation_reserve(dev, reserve_fraction, framework_overhead)
               if dev.kind == DeviceKind.GPU else int(spill_reserve))
    free = dev.mem_capacity - weights - reserve
    if free < 0:
        exact = 0
    elif resident == 0:
        exact = None
    else:
        exact = free // resident
    if offload_fraction > 0:
        offloaded = seq_kv - resident
        pool = sum(hpu_pool_sequences(h, m, w, offloaded, spill_reserve) for h in hpu_pool)
        exact = pool if exact is None else min(exact, pool)
    if exact is None:
        raise ValueError("batch unbounded: nothing resident on the device and no HPU pool")
    kv = w.batch_size * resident
    return CapacityReport(
        device_capacity=dev.mem_capacity,
        weights_bytes=weights,
        kv_bytes=kv,
        activation_reserve=reserve,
        max_batch=_on_grid(exact, batch_grid),
        oom=w.batch_size > exact,
        max_batch_exact=exact,
        per_sequence_bytes=resident,
    )


def hpu_pool_sequences(hpu: DeviceSpec, m: ModelConfig, w: WorkloadConfig,
                       per_sequence: int | None = None, spill_reserve: int = 0,
                       num_ports: int = 8) -> int:
    """Whole sequences one HPU card can hold with the slot allocator's rounding."""
    if per_sequence is None:
        per_sequence = w.max_context * kv_bytes_per_token(m)
    row = INTERLEAVE_BLOCK * num_ports
    usable = hpu.mem_capacity - hpu.mem_capacity % row - _round_up(spill_reserve, row)
    slot = _round_up(per_sequence, INTERLEAVE_BLOCK)
    return max(0, usable // slot) if slot else 0
