"""Full toy model: frozen encoders, Q-Former, semantic fusion, adapted LLM, mask decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from calico.correspondence import CamHook, CamParams, CemParams, extract_semantic, fuse_semantics, layers_for
from calico.errors import ConfigurationError
from calico.grounding.decoder import MaskDecoder, binarize, bind_masks, decode_masks, encode_grounding
from calico.grounding.masks import MaskSet
from calico.grounding.parser import GroundedSpan, parse_grounded_output
from calico.multimodal.config import ModelConfig
from calico.multimodal.encoders import PatchEncoder, encode_global, project_to_language, qformer_query
from calico.multimodal.llm import LLMOutput, ToyLLM, llm_forward
from calico.multimodal.sequence import ImageBatch, TokenSequence, assemble_input
from calico.multimodal.tokenizer import EOS, Tokenizer
from calico.numerics.layers import AttentionParams, Linear, Parameter, ParameterSet
from calico.numerics.tensor import Tensor, no_grad


@dataclass
class EncodedImages:
    n_images: int
    x_global: Tensor
    x_semantic: Tensor
    x_ground: Tensor


@dataclass
class ForwardResult:
    out: LLMOutput
    x_global_fused: Tensor
    hook: CamHook | None


@dataclass
class Generation:
    tokens: list[int]
    hidden: np.ndarray  # (len(tokens), D): final-layer state at each emitted token's row


@dataclass
class Prediction:
    tokens: list[int]
    spans: list[GroundedSpan]
    mask_sets: list[MaskSet]
    logits: list[np.ndarray] = field(default_factory=list)


class CalicoModel:
    """Parameters for every component live in one ParameterSet.

    All optional modules are always constructed so ablation variants share
    identical weights for a given seed; the config switches only route
    computation around them.
    """

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        self.cfg = cfg
        self.tok = Tokenizer(cfg.N_I_max, cfg.identifiers_as_tokens)
        if cfg.vocab < self.tok.size:
            raise ConfigurationError(f"vocab {cfg.vocab} smaller than the tokenizer's {self.tok.size} ids")
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        s = self.store = ParameterSet()
        self.global_encoder = PatchEncoder.create(s, "global", cfg.H, cfg.W, cfg.S_C, cfg.D_C, cfg.heads,
                                                  cfg.encoder_layers, rng, trainable=False)
        self.grounding_encoder = PatchEncoder.create(s, "grounding", cfg.H, cfg.W, cfg.S_D, cfg.D_D, cfg.heads,
                                                     cfg.encoder_layers, rng, trainable=False)
        self.cem = CemParams.create(s, "cem", cfg, rng)
        self.q: Parameter | None = None
        self.qformer: AttentionParams | None = None
        self.cam: CamParams | None = None
        if cfg.use_qformer:
            self.q = s.add("qformer.queries", rng.normal(0.0, 1.0, size=(cfg.S_I, cfg.D_I)))
            self.qformer = AttentionParams.create(s, "qformer.attn", cfg.D_I, cfg.D_C, cfg.D_I, cfg.heads, rng)
            self.f_image = Linear.create(s, "f_image", cfg.D_I, cfg.D, rng)
            self.cam = CamParams.create(s, "cam", cfg, rng, layers_for(cfg))
        else:
            self.f_image = Linear.create(s, "f_image", cfg.D_C, cfg.D, rng)
        self.llm = ToyLLM.create(s, "llm", cfg.vocab, cfg.D, cfg.N, cfg.heads, rng)
        self.decoder = MaskDecoder.create(s, "decoder", cfg, rng)

    # -- encoders ---------------------------------------------------------------
    def encode(self, images: ImageBatch) -> EncodedImages:
        images.check(self.cfg.H, self.cfg.W, self.cfg.N_I_max)
        return EncodedImages(len(images), encode_global(images, self.global_encoder),
                             extract_semantic(images, self.cem), encode_grounding(images, self.grounding_encoder))

    @property
    def cem_active(self) -> bool:
        return self.cfg.cem_active

    @property
    def cam_active(self) -> bool:
        return self.cfg.cam_enabled and self.cam is not None

    def image_tokens(self, enc: EncodedImages) -> Tensor:
        """I^0: (N_I, S_I, D)."""
        if self.cfg.use_qformer:
            x_embed = qformer_query(self.q.tensor, enc.x_global, self.qformer)
        else:
            x_embed = enc.x_global
        return project_to_language(x_embed, self.f_image)

    def fused_globals(self, enc: EncodedImages, cem: bool | None = None) -> Tensor:
        if self.cem_active if cem is None else cem:
            return fuse_semantics(enc.x_global, enc.x_semantic, self.cem)
        return enc.x_global

    # -- language model ------------------------------------------------------------
    def forward(self, seq: TokenSequence, enc: EncodedImages, guidance_index: int | None = None,
                cem: bool | None = None, cam: bool | None = None) -> ForwardResult:
        """T^0 assembly and the hooked LLM pass. ``cem``/``cam`` override the config switches."""
        T0 = assemble_input(seq, self.llm.embed.tensor, self.image_tokens(enc) if seq.n_images else None)
        use_cam = (self.cam_active if cam is None else cam) and self.cam is not None and seq.n_images > 0
        fused = self.fused_globals(enc, cem) if use_cam else enc.x_global
        hook = None
        hooks = {}
        if use_cam:
            hook = CamHook.for_sequence(seq, self.cam, self.q.tensor, self.qformer, fused, guidance_index)
            hooks = {l: hook for l in self.cam.layers}
        return ForwardResult(llm_forward(T0, self.llm, hooks), fused, hook)

    def generate(self, prompt: TokenSequence, enc: EncodedImages, max_steps: int) -> Generation:
        """Greedy decoding with full recompute; argmax ties go to the lowest id."""
        if max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")
        guidance = prompt.last_text_index()
        emitted: list[int] = []
        last: LLMOutput | None = None
        with no_grad():
            for _ in range(max_steps):
                last = self.forward(prompt.extend(emitted), enc, guidance).out
                nxt = int(np.argmax(last.logits.data[-1]))
                if nxt == EOS:
                    break
                emitted.append(nxt)
            else:
                if emitted:
                    last = self.forward(prompt.extend(emitted), enc, guidance).out
            base = len(prompt)
            hidden = last.final.data[base:base + len(emitted)].copy()
        return Generation(emitted, hidden)

    # -- masks -----------------------------------------------------------------
    def decode_for_spans(self, enc: EncodedImages, spans, seg_states: Tensor) -> list[Tensor]:
        """Mask logits for each span (span order), decoding each image's [SEG] states together."""
        out: list[Tensor | None] = [None] * len(spans)
        for j in range(enc.n_images):
            idx = [n for n, s in enumerate(spans) if s.image_index == j + 1]
            if not idx:
                continue
            logits = decode_masks(enc.x_ground[j], seg_states[np.array(idx)], self.decoder)
            for r, n in enumerate(idx):
                out[n] = logits[r]
        return out

    def predict(self, images: ImageBatch, prompt: TokenSequence, max_steps: int = 96) -> Prediction:
        enc = self.encode(images)
        gen = self.generate(prompt, enc, max_steps)
        spans = parse_grounded_output(gen.tokens, self.tok, len(images))
        with no_grad():
            states = Tensor(gen.hidden[[s.seg_position for s in spans]]) if spans else None
            logits = self.decode_for_spans(enc, spans, states) if spans else []
        masks = [binarize(l) for l in logits]
        sets = bind_masks(spans, masks, len(images), self.cfg.H, self.cfg.W)
        return Prediction(gen.tokens, spans, sets, [l.data for l in logits])


__all__ = ["CalicoModel", "EncodedImages", "ForwardResult", "Generation", "Prediction"]
