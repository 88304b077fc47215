"""Cost models, a functional attention engine and an event simulator for
LLM decode on a GPU paired with high-bandwidth attention cards (HPUs)."""

__version__ = "0.1.0"

from .model import DeviceKind, DeviceSpec, KernelWork, ModelConfig, WorkloadConfig
from .sim import CostModel, Partition, SimPolicy, StepReport, Timeline, Topology, simulate

__all__ = [
    "CostModel", "DeviceKind", "DeviceSpec", "KernelWork", "ModelConfig", "Partition",
    "SimPolicy", "StepReport", "Timeline", "Topology", "WorkloadConfig", "simulate",
]
