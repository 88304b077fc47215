"""Headline metrics from simulator reports: normalised throughput, MFU and
tokens/s/W."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DeviceKind, DeviceSpec, ModelConfig, WorkloadConfig
from .sim import StepReport, Timeline, Topology

SCHEMA_VERSION = "hpusim.efficiency_report/1"


class Accounting(str, enum.Enum):
    DELTA_OVER_IDLE = "delta_over_idle"


@dataclass(frozen=True)
class EnergyModel:
    """Per-device share of TDP drawn above idle while busy.

    Keys are device preset names; ``default_gpu`` and ``default_hpu`` cover
    devices without their own entry.
    """

    active_fraction: dict = field(default_factory=dict)
    idle_power: dict = field(default_factory=dict)
    accounting: Accounting = Accounting.DELTA_OVER_IDLE

    def __post_init__(self):
        for name, f in self.active_fraction.items():
            if not 0 <= f <= 1:
                raise ValueError(f"active_fraction[{name}] = {f} outside [0, 1]")

    def _lookup(self, table: dict, dev: DeviceSpec, fallback: float) -> float:
        if dev.name in table:
            return table[dev.name]
        return table.get(f"default_{dev.kind.value}", fallback)

    def fraction(self, dev: DeviceSpec) -> float:
        return self._lookup(self.active_fraction, dev, 0.80)

    def idle(self, dev: DeviceSpec) -> float:
        return self._lookup(self.idle_power, dev, 0.0)

    def active_watts(self, dev: DeviceSpec, busy: float) -> float:
        return dev.tdp * self.fraction(dev) * busy


@dataclass
class EfficiencyReport:
    label: str
    tokens_per_s: float
    watts: float
    tokens_per_s_per_watt: float
    normalized_vs: str = ""
    ratio: float = 1.0

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def device_busy(report: StepReport, topo: Topology) -> list[tuple[DeviceSpec, float]]:
    """(device, busy fraction) for the GPU and each HPU; links and host excluded."""
    out = [(topo.gpu, report.per_device_busy.get("GPU", 0.0))]
    for i, hpu in enumerate(topo.hpus):
        out.append((hpu, report.per_device_busy.get(f"HPU{i}", 0.0)))
    return out


def energy_report(report: StepReport, topo: Topology, em: EnergyModel,
                  label: str = "") -> EfficiencyReport:
    watts = sum(em.active_watts(dev, busy) for dev, busy in device_busy(report, topo))
    tps = report.tokens_per_s
    eff = tps / watts if watts > 0 and tps > 0 else 0.0
    return EfficiencyReport(label or _label(report, topo), tps, watts, eff)


def timeline_efficiency(tl: Timeline, tokens: int, topo: Topology, em: EnergyModel,
                        seconds_per_tick: float = 1e-9) -> float:
    """Tokens/s/W straight from a timeline over its generation window.

    Ticks are converted with ``seconds_per_tick``, so the result does not
    depend on the unit the timeline was recorded in.
    """
    gen = (tl.step > 0) & (tl.layer >= 0) if tl.layer is not None else tl.step > 0
    t0, t1 = int(tl.start[gen].min()), int(tl.end.max())
    span = t1 - t0
    busy = np.bincount(tl.resource, weights=np.maximum(tl.end - np.maximum(tl.start, t0), 0),
                       minlength=len(tl.resource_names)) / span
    watts = em.active_watts(topo.gpu, busy[0])
    watts += sum(em.active_watts(h, busy[2 + 3 * i]) for i, h in enumerate(topo.hpus))
    tps = tokens / (span * seconds_per_tick)
    return tps / watts if watts > 0 else 0.0


def _label(report: StepReport, topo: Topology) -> str:
    n = report.num_hpus
    base = f"{topo.gpu.name}-b{report.batch_size}"
    return f"{base}+{n}x{topo.hpus[0].name}" if n else base


def normalize(report: EfficiencyReport, baseline: EfficiencyReport) -> EfficiencyReport:
    """Copy of ``report`` with its efficiency expressed relative to ``baseline``."""
    ratio = (report.tokens_per_s_per_watt / baseline.tokens_per_s_per_watt
             if baseline.tokens_per_s_per_watt > 0 else 0.0)
    return EfficiencyReport(report.label, report.tokens_per_s, report.watts,
                            report.tokens_per_s_per_watt, baseline.label, ratio)


def normalized_throughput(report: StepReport, baseline: StepReport) -> float:
    return report.tokens_per_s / baseline.tokens_per_s


def mfu_projection(report: StepReport, m: ModelConfig, w: WorkloadConfig,
                   gpu: DeviceSpec) -> float:
    """Achieved GPU FLOP rate over peak during generation.

    Heterogeneous runs count only linear FLOPs since attention left the GPU;
    GPU-only runs count attention as well.
    """
    if gpu.kind != DeviceKind.GPU:
        raise ValueError(f"{gpu.name} is not a GPU")
    if report.generation_s <= 0:
        return 0.0
    flops = report.linear_flops
    if report.gpu_runs_attention:
        flops += report.attention_flops
    return flops / (report.generation_s * gpu.peak_flops)


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", text)
