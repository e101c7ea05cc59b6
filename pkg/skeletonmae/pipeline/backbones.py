"""
Graph Backbones
GIN, GCN and GAT layers over a joint graph, and encoder stacks built from them
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .errors import AdjacencyError, LayerConfigError, ShapeMismatchError
from .skeleton import Adjacency, SkeletonLayout, normalize_adjacency, raw_from_normalized

logger = logging.getLogger(__name__)

GIN = "gin"
GCN = "gcn"
GAT = "gat"
BACKBONES = (GIN, GCN, GAT)

PRELU = "prelu"
RELU = "relu"
NO_ACTIVATION = "none"

PRELU_INIT = 0.25
GAT_NEGATIVE_SLOPE = 0.2


def glorot_uniform(fan_in: int, fan_out: int, shape: Sequence[int],
                   generator: Optional[torch.Generator]) -> torch.Tensor:
    """Uniform in ±sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(*shape, generator=generator) * 2.0 - 1.0) * bound


class Linear(nn.Module):
    """x @ W + b with W stored as (in_dim, out_dim)"""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(glorot_uniform(in_dim, out_dim, (in_dim, out_dim), generator))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = numerics.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Activation(nn.Module):
    """PReLU (learnable slope), ReLU or identity"""

    def __init__(self, kind: str):
        super().__init__()
        if kind not in (PRELU, RELU, NO_ACTIVATION):
            raise LayerConfigError(f"Unknown activation '{kind}'")
        self.kind = kind
        self.slope = nn.Parameter(torch.full((1,), PRELU_INIT)) if kind == PRELU else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == PRELU:
            return numerics.prelu(x, self.slope.to(x.dtype))
        if self.kind == RELU:
            return numerics.relu(x)
        return x


@dataclass(frozen=True)
class GraphLayerConfig:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = PRELU
    gat_heads: int = 1

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise LayerConfigError(f"Unknown backbone '{self.kind}'; expected one of {BACKBONES}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise LayerConfigError(f"Layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind == GAT and (self.gat_heads < 1 or self.out_dim % self.gat_heads != 0):
            raise LayerConfigError(f"gat_heads={self.gat_heads} must divide out_dim={self.out_dim}")


@dataclass(frozen=True)
class GraphTopology:
    """Raw and normalized adjacency of one layout; each layer picks the form it needs"""

    raw: Adjacency
    normalized: Adjacency

    @classmethod
    def from_adjacency(cls, adjacency: Adjacency) -> "GraphTopology":
        if adjacency.normalized:
            return cls(raw=raw_from_normalized(adjacency), normalized=adjacency)
        return cls(raw=adjacency, normalized=normalize_adjacency(adjacency))

    @classmethod
    def from_layout(cls, layout: SkeletonLayout) -> "GraphTopology":
        return cls.from_adjacency(layout.adjacency())

    @property
    def joint_count(self) -> int:
        return self.raw.size

    def for_kind(self, kind: str) -> Adjacency:
        return self.normalized if kind == GCN else self.raw


def _check_features(h: torch.Tensor, adjacency: Adjacency, in_dim: int, op: str) -> None:
    if h.dim() < 2 or h.shape[-1] != in_dim or h.shape[-2] != adjacency.size:
        raise ShapeMismatchError(op, h.shape, (adjacency.size, in_dim))


class GINLayer(nn.Module):
    """h'_v = act(MLP((1 + eps) h_v + sum of neighbour features)) over the raw adjacency"""

    def __init__(self, config: GraphLayerConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        self.eps = nn.Parameter(torch.zeros(1))
        self.lin1 = Linear(config.in_dim, config.out_dim, generator=generator)
        self.hidden_act = Activation(PRELU)
        self.lin2 = Linear(config.out_dim, config.out_dim, generator=generator)
        self.act = Activation(config.activation)

    def forward(self, h: torch.Tensor, adjacency: Adjacency) -> torch.Tensor:
        if adjacency.normalized:
            raise AdjacencyError("GIN aggregates over the raw adjacency; got a normalized matrix")
        _check_features(h, adjacency, self.config.in_dim, "gin_forward")
        neighbours = numerics.matmul(adjacency.like(h), h)
        aggregated = (1.0 + self.eps.to(h.dtype)) * h + neighbours
        return self.act(self.lin2(self.hidden_act(self.lin1(aggregated))))


class GCNLayer(nn.Module):
    """h' = act(Ã h W + b) over the normalized adjacency"""

    def __init__(self, config: GraphLayerConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        self.linear = Linear(config.in_dim, config.out_dim, generator=generator)
        self.act = Activation(config.activation)

    def forward(self, h: torch.Tensor, adjacency: Adjacency) -> torch.Tensor:
        if not adjacency.normalized:
            raise AdjacencyError("GCN requires the normalized adjacency; got a raw matrix")
        _check_features(h, adjacency, self.config.in_dim, "gcn_forward")
        propagated = numerics.matmul(adjacency.like(h), h)
        return self.act(self.linear(propagated))


class GATLayer(nn.Module):
    """Multi-head additive attention over the 1-hop neighbourhood including self; heads concatenated"""

    def __init__(self, config: GraphLayerConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        self.heads = config.gat_heads
        self.head_dim = config.out_dim // config.gat_heads
        self.linear = Linear(config.in_dim, config.out_dim, bias=False, generator=generator)
        self.att_src = nn.Parameter(glorot_uniform(self.head_dim, 1, (self.heads, self.head_dim), generator))
        self.att_dst = nn.Parameter(glorot_uniform(self.head_dim, 1, (self.heads, self.head_dim), generator))
        self.bias = nn.Parameter(torch.zeros(config.out_dim))
        self.act = Activation(config.activation)

    def attention(self, z: torch.Tensor, adjacency: Adjacency) -> torch.Tensor:
        """Attention weights alpha[..., i, j, head] over neighbours j of node i."""
        src = (z * self.att_src.to(z.dtype)).sum(dim=-1)        # (..., N, H)
        dst = (z * self.att_dst.to(z.dtype)).sum(dim=-1)        # (..., N, H)
        logits = F.leaky_relu(dst.unsqueeze(-2) + src.unsqueeze(-3), GAT_NEGATIVE_SLOPE)
        n = adjacency.size
        allowed = (adjacency.matrix + torch.eye(n, dtype=adjacency.matrix.dtype)) > 0
        logits = logits.masked_fill(~allowed.unsqueeze(-1), float("-inf"))
        return torch.softmax(logits, dim=-2)

    def forward(self, h: torch.Tensor, adjacency: Adjacency) -> torch.Tensor:
        if adjacency.normalized:
            raise AdjacencyError("GAT attends over the raw adjacency; got a normalized matrix")
        _check_features(h, adjacency, self.config.in_dim, "gat_forward")
        z = self.linear(h)
        z = z.reshape(*z.shape[:-1], self.heads, self.head_dim)   # (..., N, H, F)
        alpha = self.attention(z, adjacency)                      # (..., N, N, H)
        out = torch.einsum("...ijh,...jhf->...ihf", alpha, z)
        out = out.reshape(*out.shape[:-2], self.config.out_dim)
        return self.act(out + self.bias)


LAYER_TYPES = {GIN: GINLayer, GCN: GCNLayer, GAT: GATLayer}


def build_layer(config: GraphLayerConfig, generator: Optional[torch.Generator] = None) -> nn.Module:
    return LAYER_TYPES[config.kind](config, generator=generator)


class EncoderStack(nn.Module):
    """Sequential graph layers of one backbone kind; output is the hidden feature H"""

    def __init__(self, configs: Sequence[GraphLayerConfig], generator: Optional[torch.Generator] = None):
        super().__init__()
        if not configs:
            raise LayerConfigError("Encoder stack needs at least one layer")
        kinds = {c.kind for c in configs}
        if len(kinds) != 1:
            raise LayerConfigError(f"Encoder stack mixes backbones {sorted(kinds)}")
        for k, (current, following) in enumerate(zip(configs, configs[1:])):
            if current.out_dim != following.in_dim:
                raise LayerConfigError(
                    f"Layer {k} out_dim {current.out_dim} does not chain into layer {k + 1} in_dim {following.in_dim}"
                )
        self.kind = configs[0].kind
        self.configs: List[GraphLayerConfig] = list(configs)
        self.layers = nn.ModuleList(build_layer(c, generator=generator) for c in configs)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.configs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.configs[-1].out_dim

    def forward(self, x: torch.Tensor, topology: GraphTopology) -> torch.Tensor:
        adjacency = topology.for_kind(self.kind)
        h = x
        for layer in self.layers:
            h = layer(h, adjacency)
        return h


def build_encoder(kind: str, in_dim: int, hidden_dim: int, depth: int, gat_heads: int = 1,
                  activation: str = PRELU, generator: Optional[torch.Generator] = None) -> EncoderStack:
    """Encoder of `depth` layers mapping in_dim -> hidden_dim."""
    if depth < 1:
        raise LayerConfigError(f"Encoder depth must be >= 1, got {depth}")
    dims = [in_dim] + [hidden_dim] * depth
    configs = [
        GraphLayerConfig(kind=kind, in_dim=dims[k], out_dim=dims[k + 1], activation=activation,
                         gat_heads=gat_heads)
        for k in range(depth)
    ]
    return EncoderStack(configs, generator=generator)


def stack_forward(stack: EncoderStack, x_bar: torch.Tensor, adjacency) -> torch.Tensor:
    """Run every layer of the stack; accepts a GraphTopology or either form of Adjacency."""
    topology = adjacency if isinstance(adjacency, GraphTopology) else GraphTopology.from_adjacency(adjacency)
    return stack(x_bar, topology)
