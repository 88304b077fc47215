"""
GPU plus HPUs, step by step
===========================

Simulate decode with attention offloaded to four prototype cards and
compare throughput, time breakdown and energy against GPU-only baselines.
"""

from hpusim.config import load_config
from hpusim.metrics import energy_report, mfu_projection, normalize
from hpusim.sim import simulate

cfg = load_config()
llama = cfg.model("llama2-7b")
em = cfg.energy_model()


def run(topo_name, batch, num_hpus=None):
    topo = cfg.topology(topo_name, num_hpus)
    w = cfg.workload(batch_size=batch)
    tl, rep = simulate(llama, w, topo, cfg.policy(), cfg.cost_model(), cfg.capacity_kwargs())
    return topo, w, tl, rep


base_topo, base_w, _, base = run("l40s-only", 16)
base_eff = energy_report(base, base_topo, em)
print(f"L40S alone, batch 16: {base.tokens_per_s:.0f} tok/s, "
      f"MFU {mfu_projection(base, llama, base_w, base_topo.gpu):.3f}")

for b in (16, 32, 64):
    topo, w, tl, rep = run("l40s-4proto", b)
    eff = normalize(energy_report(rep, topo, em), base_eff)
    share = ", ".join(f"{k} {v:.0%}" for k, v in rep.breakdown.items() if v > 0.005)
    print(f"\n+4 prototypes, batch {b}: {rep.tokens_per_s / base.tokens_per_s:.2f}x throughput, "
          f"{eff.ratio:.2f}x tokens/s/W")
    print(f"  critical path: {share}")
    print(f"  {len(tl)} events, {tl.overlaps()} overlaps")

# The GPU only reaches high utilisation once the batch is large enough,
# which needs many cards to hold the cache.
topo, w, _, rep = run("l40s-4proto", 512, num_hpus=32)
print(f"\nbatch 512 over 32 cards: MFU {mfu_projection(rep, llama, w, topo.gpu):.2f}")

# First few events of a small run, as the CSV the CLI writes.
_, _, tl, _ = run("l40s-4proto", 8)
print("\n" + "\n".join(tl.to_csv(max_step=1).splitlines()[:12]))
