"""Parameter containers, transformer building blocks and the Adam optimizer."""
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from model.tensor import (
    Tensor,
    concat,
    dropout,
    embedding,
    gelu,
    get_default_dtype,
    layer_norm,
    scaled_dot_attention,
)

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Parameters are discovered from attributes, in assignment order."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise KeyError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=p.data.dtype)


def _walk(name: str, value) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


# ----------------------------------------------------------------------
# Initializers
# ----------------------------------------------------------------------
def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(get_default_dtype())


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: Optional[float] = None):
        self.weight = Parameter(normal(rng, (num, dim), std if std is not None else dim**-0.5))

    def forward(self, ids: np.ndarray) -> Tensor:
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: Optional[np.ndarray] = None,
        causal: bool = False,
    ) -> Tuple[Tensor, Tensor]:
        """query [B, Lq, D], key/value [B, Lk, D]; key_mask [B, Lk] True for real keys."""
        b, lq, _ = query.shape
        lk = key.shape[1]
        mask = np.ones((b, 1, lq, lk), dtype=bool)
        if key_mask is not None:
            mask &= np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            mask &= np.tril(np.ones((lq, lk), dtype=bool))[None, None]
        out, weights = scaled_dot_attention(
            self._split(self.q_proj(query)),
            self._split(self.k_proj(key)),
            self._split(self.v_proj(value)),
            mask,
        )
        out = out.transpose(0, 2, 1, 3).reshape(b, lq, self.n_heads * self.d_head)
        return self.out_proj(out), weights


class FeedForward(Module):
    def __init__(self, d_model: int, ff_mult: int, rng: np.random.Generator):
        self.inner = Linear(d_model, ff_mult * d_model, rng)
        self.outer = Linear(ff_mult * d_model, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int, rng: np.random.Generator, p_drop: float = 0.0):
        self.norm_attn = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm_ff = LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_mult, rng)
        self.p_drop = p_drop

    def forward(self, x: Tensor, mask: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.norm_attn(x)
        attended, _ = self.attn(h, h, h, key_mask=mask)
        x = x + dropout(attended, self.p_drop, rng, self.training)
        return x + dropout(self.ff(self.norm_ff(x)), self.p_drop, rng, self.training)


class TransformerEncoder(Module):
    def __init__(self, d_model: int, n_layers: int, n_heads: int, ff_mult: int, rng: np.random.Generator, p_drop: float = 0.0):
        self.layers = [EncoderLayer(d_model, n_heads, ff_mult, rng, p_drop) for _ in range(n_layers)]
        self.norm = LayerNorm(d_model)

    def forward(self, x: Tensor, mask: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, rng)
        return self.norm(x)


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int, rng: np.random.Generator, p_drop: float = 0.0):
        self.norm_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm_cross = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm_ff = LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_mult, rng)
        self.p_drop = p_drop

    def forward(
        self,
        x: Tensor,
        target_mask: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        h = self.norm_self(x)
        attended, _ = self.self_attn(h, h, h, key_mask=target_mask, causal=True)
        x = x + dropout(attended, self.p_drop, rng, self.training)
        h = self.norm_cross(x)
        attended, _ = self.cross_attn(h, memory, memory, key_mask=memory_mask)
        x = x + dropout(attended, self.p_drop, rng, self.training)
        return x + dropout(self.ff(self.norm_ff(x)), self.p_drop, rng, self.training)


def prepend_row(row: Tensor, rows: Tensor) -> Tensor:
    """[B, D] + [B, L, D] -> [B, L+1, D]."""
    b, d = row.shape
    return concat([row.reshape(b, 1, d), rows], axis=1)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of [B, L, D] counting only rows where mask [B, L] is True."""
    weights = np.asarray(mask, dtype=x.data.dtype)
    counts = np.maximum(weights.sum(axis=1, keepdims=True), 1.0)
    return (x * (weights / counts)[:, :, None]).sum(axis=1)


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------
class Adam:
    """Adam with externally supplied learning rate (the Noam schedule drives it)."""

    def __init__(self, named_params: List[Tuple[str, Parameter]], betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"m.{k}": v.copy() for k, v in self.m.items()}
        state.update({f"v.{k}": v.copy() for k, v in self.v.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f"v.{name}"], dtype=self.v[name].dtype)
        self.step_count = step_count
