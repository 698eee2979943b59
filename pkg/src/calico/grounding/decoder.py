"""Mask decoding from [SEG] hidden states and routing of masks to images."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from calico.errors import BindingError, DimensionError
from calico.grounding.masks import MaskSet
from calico.grounding.parser import GroundedSpan
from calico.multimodal.config import patch_size
from calico.numerics.layers import AttentionParams, LayerNorm, Linear, MLP, ParameterSet, cross_attention
from calico.numerics.tensor import Tensor


def encode_grounding(images, encoder) -> Tensor:
    """X_ground = G(X_image): (N_I, S_D, D_D) from the frozen grounding encoder."""
    pixels = images.tensors if hasattr(images, "tensors") else images
    return encoder.encode(pixels)


@dataclass
class DecoderBlock:
    attn: AttentionParams
    ln: LayerNorm


@dataclass
class MaskDecoder:
    """Seg queries attend over grounding tokens; each grounding token expands
    to a p x p block of pixel embeddings; a pixel's logit is its dot product
    with the query, scaled by 1/sqrt(D_D)."""

    f_seg: Linear  # D -> D_D
    blocks: list[DecoderBlock]
    head: MLP  # D_D -> p*p*D_D via ``expand``
    expand: Linear
    H: int
    W: int
    p: int

    @classmethod
    def create(cls, store: ParameterSet, name: str, cfg, rng: np.random.Generator) -> "MaskDecoder":
        p = patch_size(cfg.H, cfg.W, cfg.S_D, "S_D")
        f_seg = Linear.create(store, f"{name}.f_seg", cfg.D, cfg.D_D, rng)
        blocks = [DecoderBlock(AttentionParams.create(store, f"{name}.block{i}.attn", cfg.D_D, cfg.D_D, cfg.D_D,
                                                      cfg.heads, rng),
                               LayerNorm.create(store, f"{name}.block{i}.ln", cfg.D_D))
                  for i in range(cfg.decoder_blocks)]
        head = MLP.create(store, f"{name}.head", cfg.D_D, cfg.D_D, rng)
        expand = Linear.create(store, f"{name}.expand", cfg.D_D, p * p * cfg.D_D, rng)
        return cls(f_seg, blocks, head, expand, cfg.H, cfg.W, p)

    @property
    def D_D(self) -> int:
        return self.f_seg.d_out

    def pixel_embeddings(self, x_ground: Tensor) -> Tensor:
        """(S_D, D_D) -> (H*W, D_D) in row-major pixel order."""
        S = x_ground.shape[0]
        gh, gw, p, d = self.H // self.p, self.W // self.p, self.p, self.D_D
        if gh * gw != S:
            raise DimensionError(f"grounding tokens {S} do not tile a {self.H}x{self.W} image with patch {p}")
        u = self.expand(x_ground + self.head(x_ground))  # (S, p*p*d)
        u = u.reshape(gh, gw, p, p, d).transpose(0, 2, 1, 3, 4)  # (gh, p, gw, p, d)
        return u.reshape(self.H * self.W, d)


def decode_masks(x_ground_i: Tensor, seg_states: Tensor, decoder: MaskDecoder) -> Tensor:
    """One H x W logit map per [SEG] state: (S_j, H, W)."""
    if x_ground_i.ndim != 2 or x_ground_i.shape[1] != decoder.D_D:
        raise DimensionError(f"grounding tokens must be (S_D, {decoder.D_D}), got {x_ground_i.shape}")
    if seg_states.ndim != 2:
        raise DimensionError(f"seg states must be (S_j, D), got {seg_states.shape}")
    n = seg_states.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, decoder.H, decoder.W)))
    z = decoder.f_seg(seg_states)
    for block in decoder.blocks:
        z = block.ln(z + cross_attention(z, x_ground_i, block.attn))
    pix = decoder.pixel_embeddings(x_ground_i)
    logits = (z @ pix.T) * (1.0 / np.sqrt(decoder.D_D))
    return logits.reshape(n, decoder.H, decoder.W)


def binarize(logits) -> np.ndarray:
    """sigmoid(logit) > 0.5, i.e. logit > 0."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > 0.0


def bind_masks(spans: Sequence[GroundedSpan], masks, n_images: int, height: int, width: int) -> list[MaskSet]:
    """Route decoded masks to per-image MaskSets by each span's image index."""
    masks = list(masks)
    if len(spans) != len(masks):
        raise BindingError(f"{len(spans)} spans but {len(masks)} masks")
    out = [MaskSet(k, height, width) for k in range(1, n_images + 1)]
    for span, mask in zip(spans, masks):
        if not 1 <= span.image_index <= n_images:
            raise BindingError(f"span bound to image {span.image_index} of {n_images}")
        out[span.image_index - 1].add(np.asarray(mask, dtype=bool), span.label)
    return out


__all__ = ["MaskDecoder", "binarize", "bind_masks", "decode_masks", "encode_grounding"]
