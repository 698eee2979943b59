"""Toy causal decoder stack with per-layer injection hooks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from calico.errors import ConfigurationError, DimensionError
from calico.numerics.layers import LayerNorm, Linear, Parameter, ParameterSet, TransformerBlock
from calico.numerics.tensor import Tensor

Hook = Callable[[int, Tensor], Tensor]


def sinusoidal_positions(S: int, D: int) -> np.ndarray:
    pos = np.arange(S)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class ToyLLM:
    embed: Parameter  # (vocab, D) text embedding table
    blocks: list[TransformerBlock]
    ln_f: LayerNorm
    head: Linear

    @classmethod
    def create(cls, store: ParameterSet, name: str, vocab: int, D: int, N: int, heads: int,
               rng: np.random.Generator) -> "ToyLLM":
        embed = store.add(f"{name}.embed", rng.normal(0.0, 1.0, size=(vocab, D)))
        blocks = [TransformerBlock.create(store, f"{name}.block{i + 1}", D, heads, rng, causal=True)
                  for i in range(N)]
        return cls(embed, blocks, LayerNorm.create(store, f"{name}.ln_f", D),
                   Linear.create(store, f"{name}.head", D, vocab, rng))

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def D(self) -> int:
        return self.embed.shape[1]


@dataclass
class LLMOutput:
    layers: list[Tensor]  # T^1..T^N (each block's output, before any hook on it)
    logits: Tensor

    @property
    def final(self) -> Tensor:
        return self.layers[-1]


def llm_forward(T0: Tensor, llm: ToyLLM, hooks: Mapping[int, Hook] | None = None) -> LLMOutput:
    """Run the N causal blocks over T^0.

    A hook registered at layer l receives (l, T^l) and returns the tensor fed
    to block l+1; valid layers are 1..N-1.
    """
    hooks = dict(hooks or {})
    bad = sorted(k for k in hooks if not 1 <= k <= llm.N - 1)
    if bad:
        raise ConfigurationError(f"hook layers {bad} outside 1..{llm.N - 1}")
    if T0.ndim != 2 or T0.shape[1] != llm.D:
        raise DimensionError(f"T^0 must be (S, {llm.D}), got {T0.shape}")
    x = T0 + sinusoidal_positions(T0.shape[0], llm.D)
    layers: list[Tensor] = []
    for l, block in enumerate(llm.blocks, start=1):
        x = block(x)
        layers.append(x)
        if l in hooks:
            x = hooks[l](l, x)
    logits = llm.head(llm.ln_f(x))
    return LLMOutput(layers, logits)
