"""Named parameters and the handful of layers the model is built from."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from calico.errors import ConfigurationError, DimensionError
from calico.numerics import tensor as T
from calico.numerics.tensor import Tensor


class Parameter:
    """A named leaf tensor. Frozen parameters never accumulate gradients."""

    __slots__ = ("name", "tensor", "_trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable)
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self._trainable = bool(value)
        self.tensor.requires_grad = self._trainable
        if not value:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class ParameterSet(Mapping[str, Parameter]):
    """Ordered registry of parameters with unique names."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def with_prefix(self, prefix: str) -> list[Parameter]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for p in self.with_prefix(prefix):
            p.trainable = trainable

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.tensor.size for p in self._params.values() if p.trainable or not trainable_only)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise ConfigurationError(
                    f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            p = self._params[name]
            if p.shape != tuple(arr.shape):
                raise ConfigurationError(f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {p.shape}")
            p.tensor.data = np.array(arr, dtype=np.float64)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


@dataclass
class Linear:
    weight: Parameter
    bias: Parameter

    @classmethod
    def create(cls, store: ParameterSet, name: str, d_in: int, d_out: int, rng: np.random.Generator,
               zero: bool = False, trainable: bool = True, std: float | None = None) -> "Linear":
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = _normal(rng, (d_in, d_out), std if std is not None else 1.0 / np.sqrt(d_in))
        return cls(store.add(f"{name}.weight", w, trainable), store.add(f"{name}.bias", np.zeros(d_out), trainable))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ConfigurationError(f"{self.weight.name}: input width {x.shape[-1]} != {self.d_in}")
        return T.linear(x, self.weight.tensor, self.bias.tensor)


@dataclass
class LayerNorm:
    gain: Parameter
    bias: Parameter
    eps: float = 1e-5

    @classmethod
    def create(cls, store: ParameterSet, name: str, d: int, trainable: bool = True) -> "LayerNorm":
        return cls(store.add(f"{name}.gain", np.ones(d), trainable), store.add(f"{name}.bias", np.zeros(d), trainable))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


@dataclass
class AttentionParams:
    """Q/K/V/output projections for multi-head attention into a shared head width."""

    q: Linear
    k: Linear
    v: Linear
    out: Linear
    heads: int = 4

    @classmethod
    def create(cls, store: ParameterSet, name: str, d_query: int, d_kv: int, d_attn: int, heads: int,
               rng: np.random.Generator, zero_out: bool = False, trainable: bool = True) -> "AttentionParams":
        if d_attn % heads:
            raise ConfigurationError(f"{name}: attention width {d_attn} not divisible by {heads} heads")
        return cls(
            Linear.create(store, f"{name}.q", d_query, d_attn, rng, trainable=trainable),
            Linear.create(store, f"{name}.k", d_kv, d_attn, rng, trainable=trainable),
            Linear.create(store, f"{name}.v", d_kv, d_attn, rng, trainable=trainable),
            Linear.create(store, f"{name}.out", d_attn, d_query, rng, zero=zero_out, trainable=trainable),
            heads,
        )

    def validate(self, d_query: int, d_kv: int) -> None:
        d_attn = self.q.d_out
        if self.q.d_in != d_query or self.out.d_out != d_query:
            raise ConfigurationError(f"attention query width {d_query} != projection {self.q.d_in}/{self.out.d_out}")
        if self.k.d_in != d_kv or self.v.d_in != d_kv:
            raise ConfigurationError(f"attention key/value width {d_kv} != projection {self.k.d_in}/{self.v.d_in}")
        if self.k.d_out != d_attn or self.v.d_out != d_attn or self.out.d_in != d_attn:
            raise ConfigurationError("attention projections disagree on head width")
        if d_attn % self.heads:
            raise ConfigurationError(f"attention width {d_attn} not divisible by {self.heads} heads")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    x = x.reshape(tuple(lead) + (s, heads, d // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = x.transpose(axes)
    *lead, s, h, dh = x.shape
    return x.reshape(tuple(lead) + (s, h * dh))


def cross_attention(query: Tensor, key_value: Tensor, params: AttentionParams,
                    mask: np.ndarray | None = None) -> Tensor:
    """softmax(QK^T / sqrt(d_head) + mask) V, projected back to the query width.

    ``query`` is (..., S_q, D_q) and ``key_value`` is (..., S_kv, D_kv); leading
    dims broadcast, so a single query set can attend into a batch of images.
    ``mask`` is an additive (S_q, S_kv) array.
    """
    if query.ndim < 2 or key_value.ndim < 2:
        raise DimensionError(f"cross_attention needs (S, D) inputs, got {query.shape} and {key_value.shape}")
    params.validate(query.shape[-1], key_value.shape[-1])
    h = params.heads
    dh = params.q.d_out // h
    q = _split_heads(params.q(query), h)
    k = _split_heads(params.k(key_value), h)
    v = _split_heads(params.v(key_value), h)
    scores = (q @ k.T) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    weights = T.softmax(scores, axis=-1)
    return params.out(_merge_heads(weights @ v))


@functools.lru_cache(maxsize=64)
def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -1e9
    m.flags.writeable = False  # shared between calls
    return m


@dataclass
class MLP:
    up: Linear
    down: Linear

    @classmethod
    def create(cls, store: ParameterSet, name: str, d: int, hidden: int, rng: np.random.Generator,
               trainable: bool = True) -> "MLP":
        return cls(Linear.create(store, f"{name}.up", d, hidden, rng, trainable=trainable),
                   Linear.create(store, f"{name}.down", hidden, d, rng, trainable=trainable))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


@dataclass
class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    ln1: LayerNorm
    attn: AttentionParams
    ln2: LayerNorm
    mlp: MLP
    causal: bool = False

    @classmethod
    def create(cls, store: ParameterSet, name: str, d: int, heads: int, rng: np.random.Generator,
               causal: bool = False, trainable: bool = True, mlp_ratio: int = 4) -> "TransformerBlock":
        return cls(
            LayerNorm.create(store, f"{name}.ln1", d, trainable),
            AttentionParams.create(store, f"{name}.attn", d, d, d, heads, rng, trainable=trainable),
            LayerNorm.create(store, f"{name}.ln2", d, trainable),
            MLP.create(store, f"{name}.mlp", d, mlp_ratio * d, rng, trainable=trainable),
            causal,
        )

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        mask = causal_mask(x.shape[-2]) if self.causal else None
        x = x + cross_attention(h, h, self.attn, mask)
        return x + self.mlp(self.ln2(x))

