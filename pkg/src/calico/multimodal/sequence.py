"""Image batches, interleaved token sequences and input assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from calico.errors import AssemblyError, DimensionError, PromptError
from calico.multimodal.tokenizer import BOS, IMAGE, Tokenizer, identifier
from calico.numerics import tensor as T
from calico.numerics.tensor import Tensor


@dataclass
class ImageBatch:
    tensors: np.ndarray  # (N_I, 3, H, W) in [0, 1]
    identifiers: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.tensors = np.asarray(self.tensors, dtype=np.float64)
        if self.tensors.ndim != 4 or self.tensors.shape[1] != 3:
            raise DimensionError(f"images must be (N_I, 3, H, W), got {self.tensors.shape}")
        if len(self) < 1:
            raise DimensionError("an image batch needs at least one image")
        if not np.isfinite(self.tensors).all() or self.tensors.min() < 0 or self.tensors.max() > 1:
            raise DimensionError("image values must lie in [0, 1]")
        expected = [identifier(k)[1:-1] for k in range(1, len(self) + 1)]
        if not self.identifiers:
            self.identifiers = expected
        elif list(self.identifiers) != expected:
            raise PromptError(f"identifiers must be {expected}, got {self.identifiers}")

    def __len__(self) -> int:
        return self.tensors.shape[0]

    @property
    def extents(self) -> tuple[int, int]:
        return self.tensors.shape[2], self.tensors.shape[3]

    def check(self, H: int, W: int, max_images: int) -> None:
        if self.extents != (H, W):
            raise DimensionError(f"images are {self.extents[0]}x{self.extents[1]}, model expects {H}x{W}")
        if len(self) > max_images:
            raise DimensionError(f"{len(self)} images exceeds N_I_max={max_images}")


class ImageSlot(NamedTuple):
    image: int  # 0-based image index
    position: int  # 0..S_I-1


Item = int | ImageSlot


@dataclass(frozen=True)
class TokenSequence:
    items: tuple[Item, ...]
    n_images: int
    S_I: int

    def __post_init__(self) -> None:
        counts = np.zeros(self.n_images, dtype=int)
        prev: ImageSlot | None = None
        for it in self.items:
            if isinstance(it, ImageSlot):
                if not 0 <= it.image < self.n_images or not 0 <= it.position < self.S_I:
                    raise AssemblyError(f"slot {it} outside {self.n_images} images x {self.S_I} positions")
                if it.position != (prev.position + 1 if prev is not None and prev.image == it.image else 0):
                    raise AssemblyError(f"image slots for image {it.image} are not contiguous and ordered")
                counts[it.image] += 1
                prev = it
            else:
                if prev is not None and prev.position != self.S_I - 1:
                    raise AssemblyError("text token interrupts an image's slots")
                prev = None
        if prev is not None and prev.position != self.S_I - 1:
            raise AssemblyError("sequence ends inside an image's slots")
        if (counts != self.S_I).any():
            raise AssemblyError(f"each image needs exactly {self.S_I} slots, got {counts.tolist()}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def n_text(self) -> int:
        return sum(1 for it in self.items if not isinstance(it, ImageSlot))

    def text_positions(self) -> list[int]:
        return [i for i, it in enumerate(self.items) if not isinstance(it, ImageSlot)]

    def text_ids(self) -> list[int]:
        return [it for it in self.items if not isinstance(it, ImageSlot)]

    def input_ids(self) -> np.ndarray:
        """Token id per row; image slots read as the <image> id."""
        return np.array([IMAGE if isinstance(it, ImageSlot) else it for it in self.items], dtype=np.int64)

    def slot_rows(self) -> np.ndarray:
        """(N_I, S_I) row indices of every image slot."""
        rows = np.empty((self.n_images, self.S_I), dtype=np.int64)
        for i, it in enumerate(self.items):
            if isinstance(it, ImageSlot):
                rows[it.image, it.position] = i
        return rows

    def last_text_index(self) -> int:
        for i in range(len(self.items) - 1, -1, -1):
            if not isinstance(self.items[i], ImageSlot):
                return i
        raise AssemblyError("sequence has no text token")

    def extend(self, token_ids: Iterable[int]) -> "TokenSequence":
        return TokenSequence(self.items + tuple(int(t) for t in token_ids), self.n_images, self.S_I)


def tokenize_prompt(template: str, images: ImageBatch | int, tok: Tokenizer, S_I: int,
                    add_bos: bool = True) -> TokenSequence:
    """Expand each "<image> (IMAGEk)" placeholder into S_I slots for image k."""
    n_images = images if isinstance(images, int) else len(images)
    ids = tok.encode(template)
    n_placeholders = ids.count(IMAGE)
    if n_placeholders != n_images:
        raise PromptError(f"template has {n_placeholders} <image> placeholders for {n_images} images")
    items: list[Item] = [BOS] if add_bos else []
    seen: set[int] = set()
    i = 0
    while i < len(ids):
        t = ids[i]
        if t != IMAGE:
            items.append(t)
            i += 1
            continue
        j = i + 1
        while j < len(ids) and ids[j] in (0x20, 0x09, 0x0A):
            j += 1
        match = tok.match_identifier(ids, j)
        if match is None:
            raise PromptError(f"<image> placeholder at token {i} is not followed by an image identifier")
        k = match[0]
        if not 1 <= k <= n_images:
            raise PromptError(f"unknown image identifier {identifier(k)} for {n_images} images")
        if k in seen:
            raise PromptError(f"image identifier {identifier(k)} used twice")
        seen.add(k)
        items.extend(ImageSlot(k - 1, p) for p in range(S_I))
        i += 1
    return TokenSequence(tuple(items), n_images, S_I)


def assemble_input(seq: TokenSequence, embed_table: Tensor, image_tokens: Tensor | None) -> Tensor:
    """Rows of T^0: text embeddings and image tokens in the order of ``seq.items``."""
    D = embed_table.shape[1]
    text_ids = np.array(seq.text_ids(), dtype=np.int64)
    if len(text_ids) and (text_ids.min() < 0 or text_ids.max() >= embed_table.shape[0]):
        raise AssemblyError(f"token id outside the embedding table of {embed_table.shape[0]} rows")
    parts = []
    if len(text_ids):
        parts.append(embed_table[text_ids])
    if seq.n_images:
        if image_tokens is None:
            raise AssemblyError("sequence has image slots but no image tokens were supplied")
        if image_tokens.shape != (seq.n_images, seq.S_I, D):
            raise AssemblyError(f"image tokens {image_tokens.shape} do not fill {seq.n_images}x{seq.S_I} slots "
                                f"of width {D}")
        parts.append(image_tokens.reshape(seq.n_images * seq.S_I, D))
    stacked = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    # map every row of the sequence to its row in ``stacked``
    order = np.empty(len(seq), dtype=np.int64)
    t = 0
    base = len(text_ids)
    for i, it in enumerate(seq.items):
        if isinstance(it, ImageSlot):
            order[i] = base + it.image * seq.S_I + it.position
        else:
            order[i] = t
            t += 1
    return stacked[order]

