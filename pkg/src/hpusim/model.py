"""Model, workload and device descriptions plus exact FLOP/byte accounting.

All counts are Python ints (exact); operational intensity is kept as a
``Fraction`` and only turned into a float at the reporting boundary.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction


class DeviceKind(str, enum.Enum):
    GPU = "gpu"
    HPU = "hpu"


class WorkLabel(str, enum.Enum):
    LINEAR_GEMM = "linear_gemm"
    ATTENTION_GEMV = "attention_gemv"
    SOFTMAX = "softmax"
    OTHER = "other"


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer dimensions (Llama-style, SwiGLU FFN)."""

    name: str
    num_layers: int
    hidden_dim: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_dim: int
    bytes_per_param: int = 2
    total_params: int | None = None
    vocab_size: int = 32000
    include_lm_head: bool = False

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_q_heads", "num_kv_heads",
                     "head_dim", "ffn_dim", "bytes_per_param", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError("num_q_heads must be a multiple of num_kv_heads")
        if self.hidden_dim != self.num_q_heads * self.head_dim:
            raise ValueError("hidden_dim must equal num_q_heads * head_dim")
        if self.total_params is None:
            object.__setattr__(self, "total_params", self.derived_params())

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    def layer_matrices(self) -> dict[str, tuple[int, int]]:
        """(in_features, out_features) of every linear projection in one layer."""
        h, kv, f = self.hidden_dim, self.kv_dim, self.ffn_dim
        return {
            "q": (h, h), "k": (h, kv), "v": (h, kv), "o": (h, h),
            "gate": (h, f), "up": (h, f), "down": (f, h),
        }

    def layer_linear_params(self) -> int:
        return sum(i * o for i, o in self.layer_matrices().values())

    def linear_params(self) -> int:
        n = self.num_layers * self.layer_linear_params()
        if self.include_lm_head:
            n += self.vocab_size * self.hidden_dim
        return n

    def derived_params(self) -> int:
        # embeddings + LM head + per-layer projections + two RMSNorms per layer + final norm
        per_layer = self.layer_linear_params() + 2 * self.hidden_dim
        return (2 * self.vocab_size * self.hidden_dim
                + self.num_layers * per_layer + self.hidden_dim)

    @property
    def weight_bytes(self) -> int:
        return self.total_params * self.bytes_per_param


@dataclass(frozen=True)
class WorkloadConfig:
    batch_size: int
    input_len: int
    output_len: int

    def __post_init__(self):
        if self.batch_size < 1 or self.input_len < 1 or self.output_len < 1:
            raise ValueError("batch_size, input_len and output_len must be >= 1")

    @property
    def max_context(self) -> int:
        return self.input_len + self.output_len

    @property
    def mean_context(self) -> float:
        # generation step t (1-based) attends over input_len + t tokens
        return self.input_len + (self.output_len + 1) / 2


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    kind: DeviceKind
    mem_bandwidth: float
    mem_capacity: int
    peak_flops: float
    link_bandwidth: float
    link_latency: float
    tdp: float

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        for name in ("mem_bandwidth", "mem_capacity", "peak_flops",
                     "link_bandwidth", "link_latency", "tdp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{self.name}: {name} must be > 0")

    @property
    def perf_per_bw_exact(self) -> Fraction:
        return Fraction(self.peak_flops) / Fraction(self.mem_bandwidth)

    @property
    def perf_per_bw(self) -> float:
        return self.peak_flops / self.mem_bandwidth


@dataclass(frozen=True)
class KernelWork:
    flops: int
    bytes: int
    label: WorkLabel = WorkLabel.OTHER

    def __post_init__(self):
        if self.flops < 0:
            raise ValueError("flops must be >= 0")
        if self.bytes < 0:
            raise ValueError("bytes must be >= 0")

    @property
    def oi_exact(self) -> Fraction:
        if self.bytes == 0:
            raise ZeroDivisionError("operational intensity undefined for zero-byte work")
        return Fraction(self.flops, self.bytes)

    @property
    def oi(self) -> float:
        return float(self.oi_exact)

    def __add__(self, other: KernelWork) -> KernelWork:
        label = self.label if self.label == other.label else WorkLabel.OTHER
        return KernelWork(self.flops + other.flops, self.bytes + other.bytes, label)

    def scaled(self, n: int) -> KernelWork:
        return KernelWork(self.flops * n, self.bytes * n, self.label)


def gemm_work(batch: int, in_features: int, out_features: int,
              bytes_per_param: int = 2, weights_only: bool = True) -> KernelWork:
    """One ``batch x in`` by ``in x out`` product; one multiply-add = 2 FLOPs."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    flops = 2 * batch * in_features * out_features
    nbytes = in_features * out_features * bytes_per_param
    if not weights_only:
        nbytes += batch * (in_features + out_features) * bytes_per_param
    return KernelWork(flops, nbytes, WorkLabel.LINEAR_GEMM)


# projections executed before / after the attention core of a layer
PRE_ATTENTION = ("q", "k", "v")
POST_ATTENTION = ("o", "gate", "up", "down")


def layer_linear_work(m: ModelConfig, batch: int, weights_only: bool = True,
                      part: str = "all") -> KernelWork:
    """Linear work of one layer; ``part`` selects 'pre', 'post' or 'all'."""
    names = {"pre": PRE_ATTENTION, "post": POST_ATTENTION,
             "all": PRE_ATTENTION + POST_ATTENTION}[part]
    mats = m.layer_matrices()
    work = KernelWork(0, 0, WorkLabel.LINEAR_GEMM)
    for name in names:
        work = work + gemm_work(batch, *mats[name], m.bytes_per_param, weights_only)
    return work


def lm_head_work(m: ModelConfig, batch: int, weights_only: bool = True) -> KernelWork:
    return gemm_work(batch, m.hidden_dim, m.vocab_size, m.bytes_per_param, weights_only)


def linear_step_work(m: ModelConfig, batch: int, weights_only: bool = True) -> KernelWork:
    """All linear-layer work for generating one token for ``batch`` sequences."""
    work = layer_linear_work(m, batch, weights_only).scaled(m.num_layers)
    if m.include_lm_head:
        work = work + lm_head_work(m, batch, weights_only)
    return work


def attention_layer_work(m: ModelConfig, batch: int, ctx_len: int) -> KernelWork:
    """Decode attention (QK^T and A.V for one new token) of a single layer."""
    if ctx_len < 1:
        raise ValueError("ctx_len must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    flops = 4 * batch * m.num_q_heads * ctx_len * m.head_dim
    nbytes = 2 * batch * m.num_kv_heads * ctx_len * m.head_dim * m.bytes_per_param
    return KernelWork(flops, nbytes, WorkLabel.ATTENTION_GEMV)


def attention_step_work(m: ModelConfig, batch: int, ctx_len: int) -> KernelWork:
    return attention_layer_work(m, batch, ctx_len).scaled(m.num_layers)


def softmax_step_work(m: ModelConfig, batch: int, ctx_len: int) -> KernelWork:
    """Softmax over the attention scores, reported apart from the GEMV headline.

    Counted as 5 FLOPs per score (max, subtract, exp, sum, divide) and one
    fp32 read plus one fp32 write per score.
    """
    scores = batch * m.num_q_heads * ctx_len * m.num_layers
    return KernelWork(5 * scores, 8 * scores, WorkLabel.SOFTMAX)


def kv_bytes_per_token(m: ModelConfig) -> int:
    return 2 * m.num_layers * m.num_kv_heads * m.head_dim * m.bytes_per_param


def prefill_work(m: ModelConfig, batch: int, input_len: int) -> KernelWork:
    """Summarization stage as a single lumped GPU kernel.

    Linear layers over ``batch * input_len`` tokens plus causal attention
    (``ctx`` runs 1..input_len); bytes are weights plus the KV cache write.
    """
    tokens = batch * input_len
    linear = linear_step_work(m, tokens, weights_only=True)
    causal_pairs = batch * input_len * (input_len + 1) // 2
    attn_flops = 4 * m.num_q_heads * m.head_dim * causal_pairs * m.num_layers
    kv_write = tokens * kv_bytes_per_token(m)
    return KernelWork(linear.flops + attn_flops, linear.bytes + kv_write, WorkLabel.OTHER)
