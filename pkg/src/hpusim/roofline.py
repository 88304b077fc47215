"""Two-segment roofline: time estimates, boundedness, MFU/MBU and crossover."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .model import (DeviceSpec, KernelWork, ModelConfig,
                    attention_layer_work, gemm_work, linear_step_work)

DEFAULT_MEMORY_EFFICIENCY = 0.90
DEFAULT_COMPUTE_EFFICIENCY = 0.80


class Bound(str, enum.Enum):
    MEMORY = "memory_bound"
    COMPUTE = "compute_bound"
    BALANCED = "balanced"


@dataclass(frozen=True)
class KernelEstimate:
    time: float
    bound: Bound
    achieved_flops: float
    achieved_bw: float
    oi: float

    def mfu(self, dev: DeviceSpec) -> float:
        return self.achieved_flops / dev.peak_flops

    def mbu(self, dev: DeviceSpec) -> float:
        return self.achieved_bw / dev.mem_bandwidth


@dataclass(frozen=True)
class UtilizationPoint:
    batch: int
    mfu: float
    mbu: float
    oi: float = 0.0
    time: float = 0.0
    bound: Bound = Bound.MEMORY


def classify(work: KernelWork, dev: DeviceSpec) -> Bound:
    oi, ridge = work.oi_exact, dev.perf_per_bw_exact
    if oi < ridge:
        return Bound.MEMORY
    if oi > ridge:
        return Bound.COMPUTE
    return Bound.BALANCED


def estimate(work: KernelWork, dev: DeviceSpec, efficiency: float = 1.0,
             compute_efficiency: float | None = None) -> KernelEstimate:
    """Roofline time for ``work`` on ``dev``.

    ``efficiency`` derates memory bandwidth; ``compute_efficiency`` derates the
    FLOP rate and defaults to the same value, giving
    ``time = max(flops/peak, bytes/bw) / efficiency``.
    """
    if compute_efficiency is None:
        compute_efficiency = efficiency
    for eff in (efficiency, compute_efficiency):
        if not 0 < eff <= 1:
            raise ValueError("efficiency must be in (0, 1]")
    if work.bytes <= 0:
        raise ValueError("cannot estimate zero-byte work")
    t_compute = work.flops / (dev.peak_flops * compute_efficiency)
    t_memory = work.bytes / (dev.mem_bandwidth * efficiency)
    time = max(t_compute, t_memory)
    return KernelEstimate(
        time=time,
        bound=classify(work, dev),
        achieved_flops=work.flops / time,
        achieved_bw=work.bytes / time,
        oi=work.oi,
    )


def _down_proj(m: ModelConfig, batch: int, weights_only: bool) -> KernelWork:
    return gemm_work(batch, m.ffn_dim, m.hidden_dim, m.bytes_per_param, weights_only)


def crossover_batch(m: ModelConfig, dev: DeviceSpec, weights_only: bool = True,
                    kernel: str = "down_proj", limit: int = 1 << 40) -> int | None:
    """Smallest batch whose linear OI reaches the device ridge point.

    ``kernel`` is ``"down_proj"`` (the representative FC layer) or ``"step"``
    (all linear layers). Returns ``None`` when activation traffic caps the OI
    below the ridge for every batch size.
    """
    ridge = dev.perf_per_bw_exact

    def work(b):
        if kernel == "step":
            return linear_step_work(m, b, weights_only)
        return _down_proj(m, b, weights_only)

    if not weights_only:
        # oi(b) = b*F / (W + b*A) rises towards F/A without reaching it
        one = work(1)
        per_batch_act = work(2).bytes - one.bytes
        if per_batch_act and Fraction(one.flops, per_batch_act) <= ridge:
            return None
    lo, hi = 1, 1
    while work(hi).oi_exact < ridge:
        hi *= 2
        if hi > limit:
            return None
    while lo < hi:
        mid = (lo + hi) // 2
        if work(mid).oi_exact >= ridge:
            hi = mid
        else:
            lo = mid + 1
    return lo


def mfu_mbu_curve(m: ModelConfig, dev: DeviceSpec, batches: Iterable[int],
                  kernel: str = "gemm", ctx_len: int = 2048,
                  weights_only: bool = False,
                  memory_efficiency: float = DEFAULT_MEMORY_EFFICIENCY,
                  compute_efficiency: float = DEFAULT_COMPUTE_EFFICIENCY,
                  ) -> list[UtilizationPoint]:
    """MFU/MBU of the representative GEMM (down projection) or GEMV (decode
    attention of one layer) across a batch sweep."""
    batches = list(batches)
    if not batches:
        raise ValueError("batch sweep must be non-empty")
    points = []
    for b in batches:
        if kernel == "gemm":
            work = _down_proj(m, b, weights_only)
        elif kernel == "gemv":
            work = attention_layer_work(m, b, ctx_len)
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
        est = estimate(work, dev, memory_efficiency, compute_efficiency)
        points.append(UtilizationPoint(b, est.mfu(dev), est.mbu(dev), est.oi,
                                       est.time, est.bound))
    return points
