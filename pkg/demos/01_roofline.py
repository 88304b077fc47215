"""
Why decode attention starves a GPU
==================================

Walk the roofline for Llama-2-7B on an A100 and an L40S, then look at the
operational intensity of batched linear layers against decode attention.
"""

import numpy as np

from hpusim.config import load_config
from hpusim.model import attention_step_work, linear_step_work
from hpusim.roofline import crossover_batch, mfu_mbu_curve

cfg = load_config()
llama = cfg.model("llama2-7b")

# Peak FLOPs over bandwidth is the OI a kernel needs to stop being memory bound.
for name in ("a100-pcie", "l40s", "h100-nvl", "hpu"):
    dev = cfg.device(name)
    print(f"{name:>10}: needs OI >= {dev.perf_per_bw:7.2f} FLOP/B")

# Linear layers gain intensity with batch size because the weights are
# read once per step. The down projection crosses the ridge here:
a100 = cfg.device("a100-pcie")
print("\nA100 crossover batch (weights only):", crossover_batch(llama, a100))
print("A100 crossover batch (with activations):", crossover_batch(llama, a100, weights_only=False))

# Decode attention does not: every sequence streams its own KV cache.
for b in (1, 16, 256):
    lin = linear_step_work(llama, b)
    att = attention_step_work(llama, b, 2048)
    print(f"batch {b:>3}: linear OI {lin.oi:8.2f}   attention OI {att.oi:.2f}")

# MFU along the batch axis for both kinds of kernel.
batches = 2 ** np.arange(10)
gemm = mfu_mbu_curve(llama, a100, batches, "gemm")
gemv = mfu_mbu_curve(llama, a100, batches, "gemv", ctx_len=2048)
print("\nbatch  gemm_mfu  gemv_mfu")
for g, v in zip(gemm, gemv):
    print(f"{g.batch:>5}  {g.mfu:8.3f}  {v.mfu:8.4f}")
