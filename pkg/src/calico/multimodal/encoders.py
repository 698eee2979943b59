"""Patch-embedding transformer encoders standing in for the pretrained vision towers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from calico.errors import DimensionError
from calico.multimodal.config import patch_size
from calico.numerics.layers import LayerNorm, Linear, Parameter, ParameterSet, TransformerBlock, cross_attention
from calico.numerics.tensor import Tensor, no_grad


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(N, 3, H, W) -> (N, (H/p)*(W/p), 3*p*p), patches in row-major grid order."""
    n, c, h, w = images.shape
    x = images.reshape(n, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


@dataclass
class PatchEncoder:
    embed: Linear
    pos: Parameter
    blocks: list[TransformerBlock]
    ln: LayerNorm
    H: int
    W: int
    p: int

    @classmethod
    def create(cls, store: ParameterSet, name: str, H: int, W: int, seq: int, width: int, heads: int,
               layers: int, rng: np.random.Generator, trainable: bool = False) -> "PatchEncoder":
        p = patch_size(H, W, seq, name)
        embed = Linear.create(store, f"{name}.patch", 3 * p * p, width, rng, trainable=trainable)
        pos = store.add(f"{name}.pos", rng.normal(0.0, 0.02, size=(seq, width)), trainable)
        blocks = [TransformerBlock.create(store, f"{name}.block{i}", width, heads, rng, trainable=trainable)
                  for i in range(layers)]
        return cls(embed, pos, blocks, LayerNorm.create(store, f"{name}.ln", width, trainable), H, W, p)

    @property
    def trainable(self) -> bool:
        return self.embed.weight.trainable

    def __call__(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (3, self.H, self.W):
            raise DimensionError(f"encoder expects (N, 3, {self.H}, {self.W}) images, got {images.shape}")
        x = self.embed(Tensor(patchify(images, self.p))) + self.pos.tensor
        for block in self.blocks:
            x = block(x)
        return self.ln(x)

    def encode(self, images: np.ndarray) -> Tensor:
        """Forward pass; frozen encoders run off the tape."""
        if self.trainable:
            return self(images)
        with no_grad():
            return self(images)


def encode_global(images, encoder: PatchEncoder) -> Tensor:
    """X_global = C(X_image): (N_I, S_C, D_C)."""
    return encoder.encode(_pixels(images))


def _pixels(images) -> np.ndarray:
    return images.tensors if hasattr(images, "tensors") else np.asarray(images, dtype=np.float64)


def qformer_query(q: Tensor, x_global: Tensor, params) -> Tensor:
    """Learnable queries attend over each image's global tokens: (N_I, S_I, D_I)."""
    if x_global.ndim != 3:
        raise DimensionError(f"x_global must be (N_I, S, D), got {x_global.shape}")
    return cross_attention(q, x_global, params)


def project_to_language(x_embed: Tensor, f_image: Linear) -> Tensor:
    """I^0 = f_image(X_embed): affine map of every image token to the LLM width."""
    return f_image(x_embed)

