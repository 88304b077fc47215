"""Random attention tasks, engine-vs-oracle checks and golden wire frames."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import protocol
from .attention import MAX_GROUP_SIZE, DimensionMismatch, HeadTask, attend
from .kvcache import KvLayout, KvStore
from .oracle import reference_attention


@dataclass
class TaskCase:
    task: HeadTask
    k: np.ndarray      # (L, d) fp16, including the new token
    v: np.ndarray


def scratch_store(head_dim: int, max_len: int, num_heads: int = 1, slots: int = 1,
                  num_ports: int = 8) -> KvStore:
    """Store just large enough for ``slots`` sequences of ``max_len`` tokens."""
    row = 64 * num_ports
    per = num_heads * 2 * max_len * head_dim * 2
    size = -(-(per * slots + row) // row) * row
    return KvStore(KvLayout(region_size=size, num_ports=num_ports), head_dim, num_heads)


def random_case(rng: np.random.Generator, store: KvStore, g: int, L: int,
                seq_id: int | None = None) -> TaskCase:
    """Allocate a slot, preload ``L - 1`` tokens and build the task for token ``L``."""
    d = store.head_dim
    k = rng.standard_normal((L, d)).astype(np.float16)
    v = rng.standard_normal((L, d)).astype(np.float16)
    q = rng.standard_normal((g, d)).astype(np.float16)
    slot = store.alloc_sequence(L, seq_id)
    store.load_context(slot, 0, k[:-1], v[:-1])
    return TaskCase(HeadTask(q, k[-1], v[-1], slot, 0, L), k, v)


@dataclass(frozen=True)
class CheckRow:
    group_size: int
    head_dim: int
    tasks: int
    max_len: int
    max_abs_err: float
    passed: bool


def attn_check(seed: int = 0, tasks: int = 1000, group_sizes=(1, 2, 4, 8),
               head_dims=(8, 64, 128), max_len: int = 4096, tol: float = 2e-3) -> list[CheckRow]:
    """Run ``tasks`` random tasks spread over the (g, d) grid and compare the
    engine with the float64 oracle. Rows are per shape."""
    for g in group_sizes:
        if not 1 <= g <= MAX_GROUP_SIZE:
            raise DimensionMismatch(f"group size {g} outside 1..{MAX_GROUP_SIZE}")
    shapes = list(itertools.product(group_sizes, head_dims))
    rng = np.random.default_rng(seed)
    stats = {s: [0, 0, 0.0] for s in shapes}
    stores = {d: scratch_store(d, max_len) for d in head_dims}
    for i in range(tasks):
        g, d = shapes[i % len(shapes)]
        # every shape sees L = 1 once, the rest are uniform
        L = 1 if i < len(shapes) else int(rng.integers(1, max_len + 1))
        store = stores[d]
        case = random_case(rng, store, g, L)
        out = attend(case.task, store).out
        err = float(np.abs(out.astype(np.float64) - reference_attention(case.task.q, case.k, case.v)).max())
        if L == 1 and not np.array_equal(out.view(np.uint16),
                                          np.broadcast_to(case.v[0], out.shape).view(np.uint16)):
            err = max(err, np.inf)
        store.free(case.task.slot)
        st = stats[(g, d)]
        st[0] += 1
        st[1] = max(st[1], L)
        st[2] = max(st[2], err)
    return [CheckRow(g, d, n, mx, e, e <= tol) for (g, d), (n, mx, e) in stats.items() if n]


# golden frames ------------------------------------------------------------

def random_descriptor(rng: np.random.Generator, g: int, d: int, head_id: int = 0,
                      batch_id: int = 0) -> protocol.Descriptor:
    return protocol.Descriptor(
        head_id=head_id, batch_id=batch_id,
        kv_base_addr=int(rng.integers(0, 1 << 40)) & ~63,
        seq_len=int(rng.integers(1, 4097)),
        q=rng.standard_normal((g, d)).astype(np.float16),
        k_new=rng.standard_normal(d).astype(np.float16),
        v_new=rng.standard_normal(d).astype(np.float16))


def golden_frames(seed: int = 0) -> dict[str, bytes]:
    """Deterministic request/response frames used as wire fixtures."""
    rng = np.random.default_rng(seed)
    single = [random_descriptor(rng, 1, 128)]
    mixed = [random_descriptor(rng, g, d, head_id=i, batch_id=i // 2)
             for i, (g, d) in enumerate([(1, 8), (2, 8), (4, 64), (8, 128)])]
    full = [random_descriptor(rng, 1, 8, head_id=i % 32, batch_id=i // 32) for i in range(256)]
    results = [protocol.Result(dsc.head_id, dsc.batch_id,
                               rng.standard_normal((dsc.group_size, dsc.head_dim)).astype(np.float16))
               for dsc in mixed]
    return {
        "request_single_g1_d128": protocol.encode_chunk(single),
        "request_mixed": protocol.encode_chunk(mixed),
        "request_full_256": protocol.encode_chunk(full),
        "response_mixed": protocol.encode_response(results),
    }


def write_vectors(out_dir, seed: int = 0) -> list[Path]:
    """Write ``.hpuc`` frames and a small KV image into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, frame in golden_frames(seed).items():
        p = out / f"{name}.hpuc"
        p.write_bytes(frame)
        paths.append(p)
    rng = np.random.default_rng(seed)
    store = scratch_store(8, 64, num_heads=2, slots=2, num_ports=4)
    for _ in range(2):
        slot = store.alloc_sequence(64)
        for h in range(2):
            n = int(rng.integers(1, 65))
            store.load_context(slot, h, rng.standard_normal((n, 8)), rng.standard_normal((n, 8)))
    paths.extend(store.export_image(out / "kv_image"))
    return paths
