"""Grounded-output parsing, mask decoding and mask sets."""
from calico.grounding.decoder import MaskDecoder, binarize, bind_masks, decode_masks, encode_grounding
from calico.grounding.masks import MaskEntry, MaskSet, rle_decode, rle_encode
from calico.grounding.parser import GroundedSpan, ParseIssue, parse_grounded_output, parse_with_issues

__all__ = [
    "GroundedSpan", "MaskDecoder", "MaskEntry", "MaskSet", "ParseIssue", "binarize", "bind_masks",
    "decode_masks", "encode_grounding", "parse_grounded_output", "parse_with_issues", "rle_decode", "rle_encode",
]
