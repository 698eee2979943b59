"""Model configuration and its flat key=value file format."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from calico.errors import ConfigurationError


@dataclass
class ModelConfig:
    N_I_max: int = 8
    H: int = 32
    W: int = 32
    S_C: int = 64
    D_C: int = 32
    S_S: int = 16
    D_S: int = 32
    S_I: int = 32
    D_I: int = 32
    D: int = 64
    N: int = 32
    S_D: int = 16
    D_D: int = 32
    vocab: int = 271
    heads: int = 4
    encoder_layers: int = 2
    decoder_blocks: int = 2
    # structural switches; dotted names in config files map onto these
    use_qformer: bool = True
    qformer_shared: bool = True
    cem_enabled: bool = True
    cem_use_semantic_encoder: bool = True
    cem_heads: int = 4
    cem_depth: int = 1
    cam_enabled: bool = True
    cam_k: int = 2
    cam_layers_override: list[int] = field(default_factory=list)
    cam_use_guidance: bool = True
    identifiers_as_tokens: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name != "seed" and v <= 0:
                raise ConfigurationError(f"{f.name} must be positive, got {v}")
        if self.N < 2:
            raise ConfigurationError(f"N must be at least 2, got {self.N}")
        if self.S_I > self.S_C:
            raise ConfigurationError(f"S_I ({self.S_I}) must not exceed S_C ({self.S_C})")
        if not self.use_qformer and self.S_I != self.S_C:
            raise ConfigurationError("without a Q-Former every global token is passed through, so S_I must equal S_C")
        for name in ("D_C", "D_S", "D_I", "D", "D_D"):
            if getattr(self, name) % self.heads:
                raise ConfigurationError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if self.D_C % self.cem_heads:
            raise ConfigurationError(f"D_C={self.D_C} not divisible by cem.heads={self.cem_heads}")
        for seq, name in ((self.S_C, "S_C"), (self.S_S, "S_S"), (self.S_D, "S_D")):
            patch_size(self.H, self.W, seq, name)
        if self.cam_enabled and not self.cam_layers_override and not 1 <= self.cam_k < self.N:
            raise ConfigurationError(f"cam.k must satisfy 1 <= k < N, got k={self.cam_k}, N={self.N}")
        for layer in self.cam_layers_override:
            if not 1 <= layer <= self.N - 1:
                raise ConfigurationError(f"cam.layers_override entry {layer} outside 1..{self.N - 1}")

    @property
    def cem_active(self) -> bool:
        return self.cem_enabled and self.cem_use_semantic_encoder

    @property
    def variant_label(self) -> str:
        """Name of the ablation variant selected by the structural switches."""
        parts = []
        if not self.use_qformer:
            return "w/o Q-Former"
        if self.cem_enabled and not self.cem_use_semantic_encoder:
            parts.append("w/o DINO")
        if not self.cem_enabled:
            parts.append("w/o CEM")
        if not self.cam_enabled or not self.cam_use_guidance:
            parts.append("w/o CAM")
        return " ".join(parts) if parts else "full"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{_file_key(f.name)}={v}")
        return "\n".join(lines) + "\n"


_DOTTED_PREFIXES = ("cem_", "cam_")


def _file_key(field_name: str) -> str:
    for prefix in _DOTTED_PREFIXES:
        if field_name.startswith(prefix):
            return prefix[:-1] + "." + field_name[len(prefix):]
    return field_name


def _field_name(key: str) -> str:
    return key.replace(".", "_")


def _coerce(name: str, ftype: str, raw: str):
    raw = raw.strip()
    if ftype == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{name}: expected an integer, got {raw!r}") from None
    if ftype.startswith("list"):
        try:
            return [int(x) for x in raw.split(",") if x.strip()]
        except ValueError:
            raise ConfigurationError(f"{name}: expected comma-separated integers, got {raw!r}") from None
    raise ConfigurationError(f"{name}: unsupported field type {ftype}")


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key=value`` lines ('#' comments, blank lines ignored) over defaults."""
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        name = _field_name(key.strip())
        if name not in types:
            raise ConfigurationError(f"line {lineno}: unknown config key {key.strip()!r}")
        values[name] = _coerce(key.strip(), types[name], raw)
    return ModelConfig(**values)


def load_config(path: str | os.PathLike, base: ModelConfig | None = None) -> ModelConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def patch_size(H: int, W: int, seq: int, name: str = "sequence") -> int:
    """Square patch side p with (H/p)*(W/p) == seq."""
    for p in range(1, min(H, W) + 1):
        if H % p == 0 and W % p == 0 and (H // p) * (W // p) == seq:
            return p
    raise ConfigurationError(f"{name}={seq} is not a square-patch grid of a {H}x{W} image")


def config_diff(a: ModelConfig, b: ModelConfig) -> dict[str, tuple]:
    return {f.name: (getattr(a, f.name), getattr(b, f.name))
            for f in dataclasses.fields(ModelConfig) if getattr(a, f.name) != getattr(b, f.name)}
