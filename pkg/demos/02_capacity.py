"""
How many sequences fit
======================

KV cache per token, the batch ceiling on an L40S, and what moving the cache
to HPU cards buys.
"""

from hpusim.config import load_config
from hpusim.kvcache import capacity_report, hpu_pool_sequences
from hpusim.model import WorkloadConfig, kv_bytes_per_token

cfg = load_config()
llama = cfg.model("llama2-7b")
w = WorkloadConfig(1, 1024, 1024)   # 2K context

per_token = kv_bytes_per_token(llama)
print(f"KV cache: {per_token / 2**20:.2f} MiB per token, "
      f"{per_token * w.max_context / 2**30:.2f} GiB per 2K sequence")

l40s = cfg.device("l40s")
r = capacity_report(l40s, llama, w, 0.0, **cfg.capacity_kwargs())
print(f"L40S alone: batch {r.max_batch} on the power-of-two grid "
      f"({r.max_batch_exact} exactly)")

proto = cfg.device("hpu-prototype")
one = hpu_pool_sequences(proto, llama, w, per_token * w.max_context, 0, cfg.num_ports())
for cards in (1, 2, 4, 8):
    print(f"{cards} prototype card(s): {one * cards} sequences")
