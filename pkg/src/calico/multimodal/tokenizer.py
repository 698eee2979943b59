"""Byte-level tokenizer with reserved special ids."""
from __future__ import annotations

import re
from dataclasses import dataclass

PAD, BOS, EOS = 256, 257, 258
IMAGE, SEG, P_OPEN, P_CLOSE = 259, 260, 261, 262
FIRST_IDENTIFIER = 263

_FIXED = {"<pad>": PAD, "<s>": BOS, "</s>": EOS, "<image>": IMAGE, "[SEG]": SEG, "<p>": P_OPEN, "</p>": P_CLOSE}


@dataclass(frozen=True)
class Tokenizer:
    """Bytes map to ids 0..255; special strings map to reserved ids above.

    ``identifiers_as_tokens`` decides whether "(IMAGEk)" is a single special
    token or spelled out in bytes. Special ids only come from an exact match
    of the special string, so ordinary text can never merge into one.
    """

    max_images: int = 8
    identifiers_as_tokens: bool = True

    @property
    def specials(self) -> dict[str, int]:
        out = dict(_FIXED)
        if self.identifiers_as_tokens:
            for k in range(1, self.max_images + 1):
                out[identifier(k)] = FIRST_IDENTIFIER + k - 1
        return out

    @property
    def size(self) -> int:
        return FIRST_IDENTIFIER + self.max_images

    @property
    def _pattern(self) -> re.Pattern:
        keys = sorted(self.specials, key=len, reverse=True)
        return re.compile("|".join(re.escape(k) for k in keys))

    def encode(self, text: str) -> list[int]:
        specials = self.specials
        out: list[int] = []
        pos = 0
        for m in self._pattern.finditer(text):
            out.extend(text[pos:m.start()].encode("utf-8"))
            out.append(specials[m.group()])
            pos = m.end()
        out.extend(text[pos:].encode("utf-8"))
        return out

    def decode(self, ids) -> str:
        inverse = {v: k for k, v in self.specials.items()}
        parts: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if 0 <= i < 256:
                buf.append(i)
                continue
            if buf:
                parts.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
            parts.append(inverse.get(i, f"<unk:{i}>"))
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)

    def is_special(self, token_id: int) -> bool:
        return token_id >= 256

    def identifier_id(self, k: int) -> int | None:
        if self.identifiers_as_tokens and 1 <= k <= self.max_images:
            return FIRST_IDENTIFIER + k - 1
        return None

    def identifier_index(self, token_id: int) -> int | None:
        """Image index k of an identifier token, else None."""
        if self.identifiers_as_tokens and FIRST_IDENTIFIER <= token_id < FIRST_IDENTIFIER + self.max_images:
            return token_id - FIRST_IDENTIFIER + 1
        return None

    def match_identifier(self, ids, start: int) -> tuple[int, int] | None:
        """(image index, tokens consumed) if an identifier begins at ``start``."""
        if start >= len(ids):
            return None
        k = self.identifier_index(int(ids[start]))
        if k is not None:
            return k, 1
        if self.identifiers_as_tokens:
            return None
        # byte mode: "(IMAGE" digits ")"
        prefix = b"(IMAGE"
        n = len(prefix)
        if [int(x) for x in ids[start:start + n]] != list(prefix):
            return None
        j = start + n
        digits = bytearray()
        while j < len(ids) and 48 <= int(ids[j]) <= 57:
            digits.append(int(ids[j]))
            j += 1
        if not digits or j >= len(ids) or int(ids[j]) != ord(")"):
            return None
        return int(digits.decode()), j + 1 - start


def identifier(k: int) -> str:
    return f"(IMAGE{k})"
