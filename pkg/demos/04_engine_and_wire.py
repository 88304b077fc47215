"""
The attention engine and its wire format
========================================

Store a KV cache in the interleaved layout, run one decode token through the
engine, check it against the float64 oracle, then ship it as a frame.
"""

import numpy as np

from hpusim import protocol
from hpusim.attention import attend
from hpusim.kvcache import KvLayout, interleave
from hpusim.oracle import reference_attention
from hpusim.testvectors import random_case, scratch_store

# 64-byte blocks rotate across ports, so a streaming read touches all of them.
layout = KvLayout(region_size=4096, num_ports=4)
print("addr -> (port, offset):", [interleave(a, layout) for a in (0, 64, 128, 192, 256)])

rng = np.random.default_rng(0)
store = scratch_store(head_dim=128, max_len=2048)
case = random_case(rng, store, g=4, L=2048)
res = attend(case.task, store)
ref = reference_attention(case.task.q, case.k, case.v)
print(f"\nGQA group 4, 2048 tokens: max |engine - oracle| = "
      f"{np.abs(res.out.astype(np.float64) - ref).max():.2e}")

# One request frame per chunk of up to 256 descriptors.
descs = [protocol.Descriptor(head_id=h, batch_id=0, kv_base_addr=h << 20, seq_len=2048,
                             q=case.task.q, k_new=case.task.k_new, v_new=case.task.v_new)
         for h in range(32)]
frame = protocol.encode_chunk(descs)
print(f"\n32 descriptors -> {len(frame)} byte frame, round trip ok: "
      f"{protocol.decode_chunk(frame) == descs}")

link = protocol.LinkModel(16e9)
chunked = protocol.transfer_time(*protocol.request_bytes(256, 1, 128), link)
one, _ = protocol.request_bytes(1, 1, 128)
singles = protocol.transfer_time(one * 256, 256, link)
print(f"256 descriptors: {chunked * 1e6:.0f} us chunked vs {singles * 1e6:.0f} us one by one")
