"""Preset tree loading: YAML with deep merge, `inherits:` and unit suffixes."""

from __future__ import annotations

import copy
import os
import re
from importlib import resources
from pathlib import Path

import yaml

from .attention import UtilCurve
from .model import DeviceSpec, ModelConfig, WorkloadConfig
from .sim import CostModel, SimPolicy, Topology

CONFIG_DIR_ENV = "HPUSIM_CONFIG_DIR"
CONFIG_FILE = "hpusim.yaml"


class ConfigError(Exception):
    pass


_UNITS = {
    "": 1, "B": 1, "KiB": 1 << 10, "MiB": 1 << 20, "GiB": 1 << 30, "TiB": 1 << 40,
    "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12,
    "B/s": 1, "MB/s": 1e6, "GB/s": 1e9, "TB/s": 1e12,
    "FLOPS": 1, "GFLOPS": 1e9, "TFLOPS": 1e12, "PFLOPS": 1e15,
    "s": 1, "ms": 1e-3, "us": 1e-6, "ns": 1e-9,
    "W": 1,
}
_QTY = re.compile(r"^\s*([-+]?\d[\d_]*(?:\.\d*)?(?:[eE][-+]?\d+)?)\s*([A-Za-z/]*)\s*$")


def quantity(value) -> float | int:
    """``"1.55 TB/s"`` -> 1.55e12. Binary byte units and plain integers stay ints."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a quantity, got {value!r}")
    if isinstance(value, (int, float)):
        return value
    match = _QTY.match(str(value))
    if not match or match.group(2) not in _UNITS:
        raise ConfigError(f"cannot parse quantity {value!r}")
    num, unit = match.groups()
    scale = _UNITS[unit]
    if isinstance(scale, int) and re.fullmatch(r"[-+]?[\d_]+", num):
        return int(num) * scale
    out = float(num) * scale
    return int(round(out)) if unit.endswith("iB") or unit == "B" else out


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _read_yaml(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def default_tree() -> dict:
    text = resources.files("hpusim").joinpath("presets.yaml").read_text()
    return yaml.safe_load(text)


def load_config(path=None) -> Config:
    """Shipped presets, overlaid by ``path`` or else by ``hpusim.yaml`` in
    the directory named by ``$HPUSIM_CONFIG_DIR`` when present."""
    tree = default_tree()
    if path is None and os.environ.get(CONFIG_DIR_ENV):
        candidate = Path(os.environ[CONFIG_DIR_ENV]) / CONFIG_FILE
        if candidate.exists():
            path = candidate
    if path is not None:
        tree = deep_merge(tree, _read_yaml(path))
    return Config(tree)


class Config:
    """Resolved preset tree with typed builders."""

    def __init__(self, tree: dict):
        self.tree = tree

    def section(self, name: str) -> dict:
        return self.tree.get(name) or {}

    def entry(self, section: str, name: str, _seen=()) -> dict:
        entries = self.section(section)
        if name not in entries:
            raise ConfigError(f"unknown {section[:-1]} preset {name!r}; "
                              f"choose from {sorted(entries)}")
        if name in _seen:
            raise ConfigError(f"inheritance cycle through {section}.{name}")
        raw = dict(entries[name] or {})
        parent = raw.pop("inherits", None)
        if parent is None:
            return raw
        return deep_merge(self.entry(section, parent, _seen + (name,)), raw)

    def calib(self, *keys, default=None):
        node = self.section("calibration")
        for k in keys:
            if not isinstance(node, dict) or k not in node:
                return default
            node = node[k]
        return node

    # builders -------------------------------------------------------------

    def device(self, name: str) -> DeviceSpec:
        e = self.entry("devices", name)
        try:
            return DeviceSpec(name=name, kind=e["kind"],
                              mem_bandwidth=float(quantity(e["mem_bandwidth"])),
                              mem_capacity=int(quantity(e["mem_capacity"])),
                              peak_flops=float(quantity(e["peak_flops"])),
                              link_bandwidth=float(quantity(e["link_bandwidth"])),
                              link_latency=float(quantity(e["link_latency"])),
                              tdp=float(quantity(e["tdp"])))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"device {name}: {exc}") from exc

    def model(self, name: str) -> ModelConfig:
        e = self.entry("models", name)
        try:
            return ModelConfig(name=name, **e)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model {name}: {exc}") from exc

    def workload(self, name: str = "default", **overrides) -> WorkloadConfig:
        e = {**self.entry("workloads", name), **{k: v for k, v in overrides.items() if v is not None}}
        try:
            return WorkloadConfig(**e)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"workload {name}: {exc}") from exc

    def link_kwargs(self) -> dict:
        return dict(
            per_message_overhead=float(quantity(self.calib("link", "per_message_overhead", default=5e-6))),
            small_transfer_knee=int(quantity(self.calib("link", "small_transfer_knee", default=1 << 20))),
            floor_size=int(quantity(self.calib("link", "small_transfer_floor", default=4096))),
            floor_fraction=float(self.calib("link", "small_transfer_floor_fraction", default=0.10)),
        )

    def topology(self, name: str, num_hpus: int | None = None) -> Topology:
        e = self.entry("topologies", name)
        gpu = self.device(e["gpu"])
        hpu = self.device(e["hpu"]) if e.get("hpu") else None
        n = e.get("num_hpus", 0) if num_hpus is None else num_hpus
        try:
            return Topology.build(gpu, hpu, n, bool(e.get("host_hop", False)), **self.link_kwargs())
        except ValueError as exc:
            raise ConfigError(f"topology {name}: {exc}") from exc

    def policy(self, **overrides) -> SimPolicy:
        e = {**self.section("policy"), **{k: v for k, v in overrides.items() if v is not None}}
        if "merge_overhead" in e:
            e["merge_overhead"] = float(quantity(e["merge_overhead"]))
        try:
            return SimPolicy(**e)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"policy: {exc}") from exc

    def util_curve(self) -> UtilCurve:
        return UtilCurve(floor=self.calib("engine", "util_floor", default=0.25),
                         ceiling=self.calib("engine", "util_ceiling", default=0.90),
                         anchor_len=self.calib("engine", "util_anchor_len", default=2048),
                         anchor=self.calib("engine", "util_anchor", default=0.73))

    def cost_model(self) -> CostModel:
        return CostModel(
            memory_efficiency=self.calib("roofline", "memory_efficiency", default=0.90),
            compute_efficiency=self.calib("roofline", "compute_efficiency", default=0.80),
            gpu_attention_efficiency=self.calib("gpu_attention_efficiency", default=0.60),
            util_curve=self.util_curve())

    def capacity_kwargs(self) -> dict:
        return dict(
            reserve_fraction=float(self.calib("capacity", "reserve_fraction", default=0.05)),
            framework_overhead=int(quantity(self.calib("capacity", "framework_overhead",
                                                       default=1_500_000_000))),
            spill_reserve=int(quantity(self.calib("capacity", "hpu_spill_reserve", default=0))),
            batch_grid=self.calib("capacity", "batch_grid", default="pow2"),
        )

    def num_ports(self) -> int:
        return int(self.calib("kvcache", "num_ports", default=8))

    def energy_model(self):
        from .metrics import EnergyModel
        fractions = self.calib("energy", "active_fraction", default={}) or {}
        idle = self.calib("energy", "idle_power", default={}) or {}
        return EnergyModel(
            active_fraction={k: float(v) for k, v in fractions.items()},
            idle_power={k: float(quantity(v)) for k, v in idle.items()})
