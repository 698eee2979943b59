"""Part-focused semantic co-segmentation at desk scale.

Subpackages:
    numerics        float64 tensor engine, reverse-mode tape, grad checks
    multimodal      config, tokenizer, toy encoders, Q-Former, causal LLM
    correspondence  semantic fusion and per-layer adaptation injections
    grounding       grounded-output parser, mask decoder, mask sets / RLE
    training        losses, AdamW schedule, toy training loop
    evaluation      AP50 / mIoU / grounded recall / SS / S-IoU
    dataset         pair-dataset construction, stratification, statistics
"""

__version__ = "0.1.0"
