# unips_system/core/nn.py

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from unips_system.core.exceptions import CheckpointError, ConfigurationError, DimensionError
from unips_system.core.tensor import (
    Parameter,
    Tensor,
    concat,
    gelu,
    layernorm,
    matmul,
    pad,
    softmax,
    swap_last,
)

logger = logging.getLogger(__name__)


class Module:
    """
    Container of parameters and sub-modules.

    Parameters are discovered from instance attributes in definition order, which
    keeps parameter names (and therefore checkpoints) deterministic.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if strict and (missing or unexpected):
            raise CheckpointError(f"State mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"Parameter '{name}' has shape {value.shape}, expected {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last dimension {self.in_features}, got input {x.shape}")
        lead = x.shape[:-1]
        out = matmul(x.reshape(-1, self.in_features), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(*lead, self.out_features)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Stack of Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ConfigurationError(f"MLP needs at least input and output widths, got {list(dims)}")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax(matmul(q, swap_last(k)) * scale, axis=-1)
    return matmul(weights, v)


class MultiHeadAttention(Module):
    """
    Multi-head attention with separate query, key and value sources.

    ``attn_dim`` is the width of the projected queries/keys/values (split across
    heads); it may differ from the token width ``dim``, which the output
    projection maps back to.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 attn_dim: Optional[int] = None, kv_dim: Optional[int] = None):
        attn_dim = attn_dim or dim
        kv_dim = kv_dim or dim
        if heads < 1 or attn_dim % heads != 0:
            raise ConfigurationError(f"Attention width {attn_dim} is not divisible by {heads} heads")
        self.heads = heads
        self.attn_dim = attn_dim
        self.query = Linear(dim, attn_dim, rng)
        self.key = Linear(kv_dim, attn_dim, rng)
        self.value = Linear(kv_dim, attn_dim, rng)
        self.out = Linear(attn_dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.attn_dim // self.heads).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, context: Optional[Tensor] = None, value: Optional[Tensor] = None) -> Tensor:
        context = query if context is None else context
        value = context if value is None else value
        if query.ndim != 3 or context.ndim != 3 or value.ndim != 3:
            raise DimensionError(
                f"Attention expects (B, L, D) inputs, got {query.shape}, {context.shape} and {value.shape}")
        if value.shape[:2] != context.shape[:2]:
            raise DimensionError(f"Keys and values need matching (B, L), got {context.shape} and {value.shape}")
        q = self._split(self.query(query))
        k = self._split(self.key(context))
        v = self._split(self.value(value))
        attended = scaled_dot_product_attention(q, k, v)
        batch, _, length, _ = attended.shape
        merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, self.attn_dim)
        return self.out(merged)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         attention: MultiHeadAttention) -> Tensor:
    """Functional form: keys are projected from ``k`` and values from ``v``."""
    if attention.heads != heads:
        raise ConfigurationError(f"Attention module has {attention.heads} heads, {heads} requested")
    return attention(q, k, v)


class TransformerBlock(Module):
    """Pre-norm residual block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 2, attn_dim: Optional[int] = None):
        attn_dim = attn_dim or dim
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, attn_dim=attn_dim)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP([dim, attn_dim * mlp_ratio, dim], rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm_attn(x))
        return x + self.mlp(self.norm_mlp(x))


class PoolingByAttention(Module):
    """Collapse a set axis with one learnable seed query attending over the set."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.seed = Parameter(rng.normal(0.0, 0.02, size=(1, 1, dim)))
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)

    def forward(self, x: Tensor) -> Tensor:
        """``x``: (B, K, D) → (B, D)."""
        pooled = self.attn(self.seed, self.norm(x))
        return pooled.reshape(x.shape[0], x.shape[2])


class Conv3x3(Module):
    """Same-padded 3x3 convolution on (B, h, w, C) grids, written as shifts + one Linear."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.proj = Linear(9 * in_channels, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        padded = pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)])
        taps = [padded[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
        return self.proj(concat(taps, axis=-1))
