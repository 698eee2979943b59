"""Configuration, tokenizer, toy encoders, Q-Former querying and the causal LLM."""
from calico.multimodal.config import ModelConfig, load_config, parse_config
from calico.multimodal.encoders import PatchEncoder, encode_global, project_to_language, qformer_query
from calico.multimodal.llm import LLMOutput, ToyLLM, llm_forward
from calico.multimodal.sequence import ImageBatch, ImageSlot, TokenSequence, assemble_input, tokenize_prompt
from calico.multimodal.tokenizer import Tokenizer

__all__ = [
    "ImageBatch", "ImageSlot", "LLMOutput", "ModelConfig", "PatchEncoder", "TokenSequence", "Tokenizer", "ToyLLM",
    "assemble_input", "encode_global", "llm_forward", "load_config", "parse_config", "project_to_language",
    "qformer_query", "tokenize_prompt",
]
