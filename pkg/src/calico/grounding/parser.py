"""Parser for grounded generations: <p> PHRASE </p> [SEG] (IMAGEk)."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from calico.errors import GroundingParseError, ImageRangeError
from calico.multimodal.tokenizer import EOS, P_CLOSE, P_OPEN, SEG, Tokenizer, identifier

log = logging.getLogger(__name__)

_WS = frozenset(b" \t\n\r")


@dataclass(frozen=True)
class GroundedSpan:
    phrase_ids: tuple[int, ...]
    phrase: str
    image_index: int  # 1-based
    seg_position: int  # index of the [SEG] token in the parsed stream
    start: int  # index of the opening <p>

    @property
    def label(self) -> str:
        return normalize_label(self.phrase)


@dataclass(frozen=True)
class ParseIssue:
    kind: str  # unclosed | orphan_seg | missing_seg | missing_identifier | empty_phrase | range
    position: int
    detail: str = ""


def normalize_label(text: str) -> str:
    return " ".join(text.split()).lower()


def _skip_ws(ids: Sequence[int], j: int) -> int:
    while j < len(ids) and ids[j] in _WS:
        j += 1
    return j


def _match_span(ids: Sequence[int], i: int, tok: Tokenizer):
    """Try the span grammar at ``i`` (which holds <p>).

    Returns (span fields, end) on success or (ParseIssue, None) on failure.
    """
    j = i + 1
    while j < len(ids) and not tok.is_special(ids[j]):
        j += 1
    if j >= len(ids) or ids[j] == EOS:
        return ParseIssue("unclosed", i, "<p> not closed before end of generation"), None
    if ids[j] != P_CLOSE:
        return ParseIssue("unclosed", i, f"<p> interrupted by special token {ids[j]}"), None
    phrase_ids = tuple(ids[i + 1:j])
    phrase = tok.decode(phrase_ids)
    if not phrase.strip():
        return ParseIssue("empty_phrase", i), None
    k = _skip_ws(ids, j + 1)
    if k >= len(ids) or ids[k] != SEG:
        return ParseIssue("missing_seg", j, "</p> not followed by [SEG]"), None
    seg = k
    k = _skip_ws(ids, k + 1)
    match = tok.match_identifier(ids, k)
    if match is None:
        return ParseIssue("missing_identifier", seg, "[SEG] not followed by an image identifier"), None
    image, used = match
    return (phrase_ids, phrase, image, seg), k + used


def parse_with_issues(tokens: Sequence[int], tok: Tokenizer, n_images: int
                      ) -> tuple[list[GroundedSpan], list[ParseIssue]]:
    """Leftmost scan; a failed span attempt resumes one token after its <p>.

    Range violations are reported as issues and the span is dropped.
    """
    ids = [int(t) for t in tokens]
    spans: list[GroundedSpan] = []
    issues: list[ParseIssue] = []
    i = 0
    while i < len(ids):
        t = ids[i]
        if t == P_OPEN:
            result, end = _match_span(ids, i, tok)
            if end is None:
                issues.append(result)
                i += 1
                continue
            phrase_ids, phrase, image, seg = result
            if not 1 <= image <= n_images:
                issues.append(ParseIssue("range", seg, f"{identifier(image)} with {n_images} images"))
            else:
                spans.append(GroundedSpan(phrase_ids, phrase, image, seg, i))
            i = end
            continue
        if t == SEG:
            issues.append(ParseIssue("orphan_seg", i, "[SEG] without a preceding </p>"))
        i += 1
    return spans, issues


def parse_grounded_output(tokens: Sequence[int], tok: Tokenizer, n_images: int,
                          strict: bool = False) -> list[GroundedSpan]:
    """Spans in emission order. Malformed regions are skipped with a warning,
    or raised as errors when ``strict``."""
    spans, issues = parse_with_issues(tokens, tok, n_images)
    for issue in issues:
        msg = f"{issue.kind} at token {issue.position}" + (f": {issue.detail}" if issue.detail else "")
        if strict:
            if issue.kind == "range":
                raise ImageRangeError(msg)
            raise GroundingParseError(msg)
        log.warning("grounding parse: %s", msg)
    return spans


def serialize_spans(spans: Sequence[GroundedSpan], tok: Tokenizer, separator: str = " and ") -> list[int]:
    """Token ids rendering the spans in tag syntax."""
    out: list[int] = []
    sep = tok.encode(separator)
    for n, s in enumerate(spans):
        if n:
            out.extend(sep)
        out.append(P_OPEN)
        out.extend(s.phrase_ids)
        out.append(P_CLOSE)
        out.extend(tok.encode(" "))
        out.append(SEG)
        out.extend(tok.encode(" " + identifier(s.image_index)))
    return out


_TAG_RE = re.compile(r"\s+")


def format_answer(prefix: str, items: Sequence[tuple[str, int]]) -> str:
    """Answer text such as "The common parts are <p> seat </p> [SEG] (IMAGE1)."."""
    body = " and ".join(f"<p> {_TAG_RE.sub(' ', phrase).strip()} </p> [SEG] {identifier(k)}" for phrase, k in items)
    return f"{prefix} {body}." if prefix else f"{body}."
