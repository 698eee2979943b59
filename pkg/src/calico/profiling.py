"""Token-count and forward-cost profiling across model configurations.

FLOPs are counted as 2 x multiply-adds over matrix products only (attention,
MLP and projections); elementwise ops, norms and softmax are excluded. The
analytic count is checked against the tensor library's own matmul counter.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from calico.correspondence import layers_for
from calico.errors import ConfigurationError
from calico.grounding.decoder import decode_masks
from calico.model import CalicoModel
from calico.multimodal.config import ModelConfig, patch_size
from calico.multimodal.sequence import ImageBatch, tokenize_prompt
from calico.numerics.tensor import Tensor, count_flops, no_grad

COUNTING_RULE = "2 x multiply-adds summed over matmuls (attention, MLP, projections); elementwise ops excluded"

_BASE = dict(N_I_max=8, H=48, W=48, S_C=256, D_C=32, S_S=16, D_S=32, D_I=32, D=64, N=32, S_D=64, D_D=32,
             heads=4, encoder_layers=2, decoder_blocks=2)

PROFILE_CONFIGS: dict[str, ModelConfig] = {
    "calico": ModelConfig(**_BASE, S_I=32),
    # direct projection of every global token, as in LISA
    "lisa_like": ModelConfig(**_BASE, S_I=256, use_qformer=False),
    "glamm_like": ModelConfig(**{**_BASE, "S_C": 576}, S_I=576),
}


def profile_prompt(n_images: int) -> str:
    refs = " and ".join(f"<image> (IMAGE{k})" for k in range(1, n_images + 1))
    return f"The {refs} provide an overview of the pictures. Can you segment the common parts in these images?"


def _attn(nq: int, nkv: int, dq: int, dkv: int, da: int, batch: int = 1) -> int:
    return 2 * batch * (nq * dq * da + 2 * nkv * dkv * da + 2 * nq * nkv * da + nq * da * dq)


def _block(s: int, d: int, batch: int = 1, mlp_ratio: int = 4) -> int:
    return _attn(s, s, d, d, d, batch) + 2 * batch * 2 * s * d * mlp_ratio * d


def _encoder(cfg: ModelConfig, seq: int, width: int, n: int) -> int:
    p = patch_size(cfg.H, cfg.W, seq, "encoder")
    return n * 2 * seq * 3 * p * p * width + cfg.encoder_layers * _block(seq, width, n)


def _queries(cfg: ModelConfig, n: int) -> int:
    """Shared queries attend into each image: query projection happens once."""
    S_I, D_I, S_C, D_C = cfg.S_I, cfg.D_I, cfg.S_C, cfg.D_C
    return (2 * S_I * D_I * D_I + n * 4 * S_C * D_C * D_I + n * 4 * S_I * S_C * D_I
            + n * 2 * S_I * D_I * D_I)


def analytic_flops(cfg: ModelConfig, n_text: int, n_images: int, n_seg: int = 1) -> dict[str, int]:
    """Per-component forward FLOPs for one prompt of ``n_text`` text tokens,
    decoding ``n_seg`` masks per image."""
    n = n_images
    S = n_text + n * cfg.S_I
    out = {
        "encoders": _encoder(cfg, cfg.S_C, cfg.D_C, n) + _encoder(cfg, cfg.S_S, cfg.D_S, n)
        + _encoder(cfg, cfg.S_D, cfg.D_D, n),
        "projection": n * 2 * cfg.S_I * (cfg.D_I if cfg.use_qformer else cfg.D_C) * cfg.D,
        "qformer": _queries(cfg, n) if cfg.use_qformer else 0,
        "fusion": 0,
        "adaptation": 0,
        "llm": cfg.N * _block(S, cfg.D) + 2 * S * cfg.D * cfg.vocab,
    }
    if cfg.cam_enabled and cfg.use_qformer:
        if cfg.cem_active:
            out["fusion"] = cfg.cem_depth * _attn(cfg.S_C, cfg.S_S, cfg.D_C, cfg.D_S, cfg.D_C, n)
        per_layer = _queries(cfg, n) + n * 2 * cfg.S_I * cfg.D_I * cfg.D
        if cfg.cam_use_guidance:
            per_layer += 2 * cfg.D * cfg.D_I
        out["adaptation"] = len(layers_for(cfg)) * per_layer
    p = patch_size(cfg.H, cfg.W, cfg.S_D, "S_D")
    D_D = cfg.D_D
    pixels = 2 * cfg.S_D * D_D * D_D * 2 + 2 * cfg.S_D * D_D * p * p * D_D
    per_image = (2 * n_seg * cfg.D * D_D + cfg.decoder_blocks * _attn(n_seg, cfg.S_D, D_D, D_D, D_D)
                 + pixels + 2 * n_seg * D_D * cfg.H * cfg.W)
    out["decoder"] = n * per_image
    out["total"] = sum(out.values())
    return out


@dataclass
class ConfigProfile:
    name: str
    image_tokens: int  # per image
    seq_len: int
    flops: int  # analytic
    measured_flops: int
    seconds_per_sample: float
    components: dict[str, int] = field(default_factory=dict)


@dataclass
class ProfileReport:
    n_images: int
    rows: list[ConfigProfile]
    reference: str = "calico"
    rule: str = COUNTING_RULE

    def row(self, name: str) -> ConfigProfile:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def token_ratio(self, name: str) -> float:
        return self.row(name).image_tokens / self.row(self.reference).image_tokens

    def flops_reduction(self, name: str) -> float:
        """Fraction of ``name``'s forward FLOPs saved by the reference config."""
        return 1.0 - self.row(self.reference).flops / self.row(name).flops

    def to_json(self) -> dict:
        rows = {}
        for r in self.rows:
            rows[r.name] = {"image_tokens": r.image_tokens, "seq_len": r.seq_len, "flops": r.flops,
                            "measured_flops": r.measured_flops, "seconds_per_sample": r.seconds_per_sample,
                            "components": r.components}
            if any(x.name == self.reference for x in self.rows):
                rows[r.name]["token_ratio"] = self.token_ratio(r.name)
                rows[r.name]["flops_reduction"] = self.flops_reduction(r.name)
        return {"counting_rule": self.rule, "n_images": self.n_images, "reference": self.reference,
                "configs": rows}


def profile_config(name: str, cfg: ModelConfig, n_images: int, seed: int = 0, repeats: int = 1) -> ConfigProfile:
    if n_images > cfg.N_I_max:
        raise ConfigurationError(f"{n_images} images exceed N_I_max={cfg.N_I_max}")
    model = CalicoModel(cfg, seed)
    rng = np.random.default_rng(seed)
    images = ImageBatch(rng.random((n_images, 3, cfg.H, cfg.W)))
    seq = tokenize_prompt(profile_prompt(n_images), images, model.tok, cfg.S_I)
    elapsed = []
    with no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            with count_flops() as fc:
                enc = model.encode(images)
                res = model.forward(seq, enc)
                state = Tensor(res.out.final.data[-1:])
                for j in range(n_images):
                    decode_masks(enc.x_ground[j], state, model.decoder)
            elapsed.append(time.perf_counter() - t0)
    analytic = analytic_flops(cfg, seq.n_text, n_images)
    return ConfigProfile(name, cfg.S_I, len(seq), analytic["total"], fc.total, min(elapsed), analytic)


def run_profile(names: list[str], n_images: int = 2, seed: int = 0, repeats: int = 1) -> ProfileReport:
    unknown = [n for n in names if n not in PROFILE_CONFIGS]
    if unknown:
        raise ConfigurationError(f"unknown profile config(s) {unknown}; choose from {sorted(PROFILE_CONFIGS)}")
    rows = [profile_config(n, PROFILE_CONFIGS[n], n_images, seed, repeats) for n in names]
    return ProfileReport(n_images, rows)
