"""Semantic fusion of global image tokens and per-layer context-guided injections.

Fusion: X'_global = X_global + A(X_global, X_semantic), with A's output
projection zero at construction so the fused tokens start equal to X_global.

Adaptation at layer l (for l in the injection set):
    q'        = q + f_adapt(t_l)          t_l: layer-l state of the last text token
    X'_embed  = Q(q', X'_global)
    I_l_fused = I_l + f_reint(X'_embed)   written back into the image-slot rows
f_reint starts at zero, so the adapted model starts equal to the base model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from calico.errors import AssemblyError, ConfigurationError, DimensionError
from calico.multimodal.encoders import PatchEncoder, qformer_query
from calico.multimodal.sequence import TokenSequence
from calico.numerics import tensor as T
from calico.numerics.layers import AttentionParams, Linear, ParameterSet, cross_attention
from calico.numerics.tensor import Tensor


@dataclass
class CemParams:
    encoder: PatchEncoder  # semantic encoder E, frozen
    fusion: list[AttentionParams]  # A, query width D_C, key/value width D_S

    @classmethod
    def create(cls, store: ParameterSet, name: str, cfg, rng: np.random.Generator) -> "CemParams":
        encoder = PatchEncoder.create(store, f"{name}.semantic", cfg.H, cfg.W, cfg.S_S, cfg.D_S, cfg.heads,
                                      cfg.encoder_layers, rng, trainable=False)
        fusion = [AttentionParams.create(store, f"{name}.fusion{i}", cfg.D_C, cfg.D_S, cfg.D_C, cfg.cem_heads,
                                         rng, zero_out=True)
                  for i in range(cfg.cem_depth)]
        return cls(encoder, fusion)


def extract_semantic(images, cem: CemParams) -> Tensor:
    """X_semantic = E(X_image): (N_I, S_S, D_S)."""
    pixels = images.tensors if hasattr(images, "tensors") else images
    return cem.encoder.encode(pixels)


def fuse_semantics(x_global: Tensor, x_semantic: Tensor, cem: CemParams) -> Tensor:
    """Global tokens query the semantic tokens; residual keeps X_global's shape."""
    if x_global.ndim != 3 or x_semantic.ndim != 3 or x_global.shape[0] != x_semantic.shape[0]:
        raise DimensionError(f"fusion needs matching (N_I, S, D) inputs, got {x_global.shape} and {x_semantic.shape}")
    x = x_global
    for attn in cem.fusion:
        x = x + cross_attention(x, x_semantic, attn)
    return x


def plan_cam_layers(N: int, k: int) -> list[int]:
    """Evenly spaced injection layers: ceil(i*N/(k+1)) for i = 1..k."""
    if not 1 <= k < N:
        raise ConfigurationError(f"need 1 <= k < N, got k={k}, N={N}")
    # integer ceil keeps the rule exact
    return [-(-i * N // (k + 1)) for i in range(1, k + 1)]


@dataclass
class CamParams:
    layers: list[int]
    adapt: dict[int, Linear]  # f_adapt: D -> D_I
    reint: dict[int, Linear]  # f_reint: D_I -> D, zero at construction
    qformer: AttentionParams | None = None  # None means reuse the base Q-Former
    use_guidance: bool = True

    @classmethod
    def create(cls, store: ParameterSet, name: str, cfg, rng: np.random.Generator,
               layers: list[int]) -> "CamParams":
        if sorted(set(layers)) != list(layers):
            raise ConfigurationError(f"injection layers must be strictly increasing, got {layers}")
        adapt, reint = {}, {}
        for l in layers:
            adapt[l] = Linear.create(store, f"{name}.layer{l}.adapt", cfg.D, cfg.D_I, rng)
            reint[l] = Linear.create(store, f"{name}.layer{l}.reint", cfg.D_I, cfg.D, rng, zero=True)
        qformer = None
        if not cfg.qformer_shared:
            qformer = AttentionParams.create(store, f"{name}.qformer", cfg.D_I, cfg.D_C, cfg.D_I, cfg.heads, rng)
        return cls(list(layers), adapt, reint, qformer, cfg.cam_use_guidance)

    def check_layer(self, layer: int) -> None:
        if layer not in self.adapt:
            raise ConfigurationError(f"layer {layer} is not in the injection set {self.layers}")


def cam_guidance(last_token_state: Tensor, q: Tensor, cam: CamParams, layer: int) -> Tensor:
    """q' = q + f_adapt(t): one guidance vector broadcast over every query row."""
    cam.check_layer(layer)
    if last_token_state.ndim != 1:
        raise DimensionError(f"guidance state must be a vector, got {last_token_state.shape}")
    return q + cam.adapt[layer](last_token_state.reshape(1, -1))


def cam_extract(q_prime: Tensor, x_global_fused: Tensor, qformer: AttentionParams) -> Tensor:
    """X'_embed = Q(q', X'_global), the same querying as the base Q-Former."""
    return qformer_query(q_prime, x_global_fused, qformer)


def cam_delta(x_embed_prime: Tensor, cam: CamParams, layer: int) -> Tensor:
    cam.check_layer(layer)
    return cam.reint[layer](x_embed_prime)


def cam_inject(I_l: Tensor, x_embed_prime: Tensor, cam: CamParams, layer: int) -> Tensor:
    """I_l_fused = I_l + f_reint(X'_embed)."""
    delta = cam_delta(x_embed_prime, cam, layer)
    if delta.shape != I_l.shape:
        raise AssemblyError(f"image rows {I_l.shape} do not match injected tokens {delta.shape}")
    return I_l + delta


def inject_rows(T_l: Tensor, slot_rows: np.ndarray, delta: Tensor) -> Tensor:
    """Add (N_I, S_I, D) ``delta`` into the image-slot rows of T^l; text rows untouched."""
    rows = np.asarray(slot_rows).reshape(-1)
    if delta.ndim != 3 or delta.shape[0] * delta.shape[1] != rows.size or delta.shape[2] != T_l.shape[1]:
        raise AssemblyError(f"injected tokens {delta.shape} do not cover {rows.size} slot rows of width "
                            f"{T_l.shape[1]}")
    if rows.size and (rows.min() < 0 or rows.max() >= T_l.shape[0]):
        raise AssemblyError("slot rows fall outside the sequence")
    return T.index_add(T_l, rows, delta.reshape(rows.size, T_l.shape[1]))


@dataclass
class CamHook:
    """Layer hook that performs the adaptation for one sequence.

    ``guidance_index`` is the row of the prompt's last text token; it stays
    fixed while an answer is appended so prompt rows never see answer tokens.
    """

    cam: CamParams
    q: Tensor
    qformer: AttentionParams
    x_global_fused: Tensor
    slot_rows: np.ndarray
    guidance_index: int
    trace: dict[int, Tensor] = field(default_factory=dict)

    def __call__(self, layer: int, T_l: Tensor) -> Tensor:
        if self.cam.use_guidance:
            q_prime = cam_guidance(T_l[self.guidance_index], self.q, self.cam, layer)
        else:
            q_prime = self.q
        x_embed_prime = cam_extract(q_prime, self.x_global_fused, self.qformer)
        delta = cam_delta(x_embed_prime, self.cam, layer)
        self.trace[layer] = delta
        return inject_rows(T_l, self.slot_rows, delta)

    @classmethod
    def for_sequence(cls, seq: TokenSequence, cam: CamParams, q: Tensor, qformer: AttentionParams,
                     x_global_fused: Tensor, guidance_index: int | None = None) -> "CamHook":
        idx = seq.last_text_index() if guidance_index is None else guidance_index
        return cls(cam, q, cam.qformer or qformer, x_global_fused, seq.slot_rows(), idx)


def layers_for(cfg) -> list[int]:
    if cfg.cam_layers_override:
        return sorted(cfg.cam_layers_override)
    return plan_cam_layers(cfg.N, cfg.cam_k)


__all__ = [
    "CamHook", "CamParams", "CemParams", "cam_delta", "cam_extract", "cam_guidance", "cam_inject",
    "extract_semantic", "fuse_semantics", "inject_rows", "layers_for", "plan_cam_layers",
]
