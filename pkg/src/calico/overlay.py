"""Alpha-blended mask overlays written as PNG files."""
from __future__ import annotations

import io
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from calico.errors import CodecError
from calico.grounding.masks import MaskSet
from calico.numerics.checkpoint import atomic_write_bytes

PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
]
ALPHA = 0.5


def color_for(k: int) -> tuple[int, int, int]:
    return PALETTE[k % len(PALETTE)]


def render_overlay(image: np.ndarray, masks: MaskSet, alpha: float = ALPHA) -> Image.Image:
    """``image`` is (3, H, W) in [0, 1]. Mask k gets palette color k; its label
    is drawn at the top-left corner of the mask's bounding box."""
    h, w = image.shape[1:]
    if (masks.height, masks.width) != (h, w):
        raise CodecError(f"mask set is {masks.height}x{masks.width} but the image is {h}x{w}")
    base = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    if not masks.entries:
        return Image.fromarray(base, mode="RGB")
    out = base.astype(np.float64)
    for k, e in enumerate(masks.entries):
        out[e.mask] = (1 - alpha) * out[e.mask] + alpha * np.array(color_for(k), dtype=np.float64)
    img = Image.fromarray(np.clip(np.round(out), 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(img)
    for k, e in enumerate(masks.entries):
        ys, xs = np.nonzero(e.mask)
        if ys.size:
            draw.text((int(xs.min()), int(ys.min())), e.label, fill=color_for(k))
    return img


def safe_name(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", sample_id).strip("_") or "sample"


def write_pair_overlays(sample_id: str, images: list[np.ndarray], masks: list[MaskSet],
                        out_dir: str | os.PathLike) -> list[Path]:
    """One composite per image: ``<sample>_a.png``, ``<sample>_b.png``."""
    if len(images) != len(masks):
        raise CodecError(f"{len(images)} images but {len(masks)} mask sets")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (im, ms) in enumerate(zip(images, masks)):
        buf = io.BytesIO()
        render_overlay(im, ms).save(buf, format="PNG")
        path = out / f"{safe_name(sample_id)}_{chr(ord('a') + k)}.png"
        atomic_write_bytes(path, buf.getvalue())
        paths.append(path)
    return paths
