"""Run a causal LM over a prompt and dump its KV cache layer by layer.

Keys are taken exactly as the model's cache stores them (for rotary models
that is post-position-embedding). Attention heads are flattened head-major
into the channel axis: channel block [h*D, (h+1)*D) holds head h, so channel
indices are stable across runs and models of the same geometry.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np
import torch

from kvcapture.xqkv import write_dump


class CaptureError(Exception):
    """Anything that prevents a complete, valid capture."""


@dataclass(frozen=True)
class CaptureSpec:
    """What to capture: model, prompt source, length cap, output, layer slice."""

    model: str
    output: str
    prompt: str | None = None
    prompt_file: str | None = None
    max_tokens: int = 512
    layer_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.model:
            raise CaptureError("model identifier must be nonempty")
        if not self.output:
            raise CaptureError("output path must be nonempty")
        if (self.prompt is None) == (self.prompt_file is None):
            raise CaptureError("provide exactly one of prompt text or prompt file")
        if self.max_tokens < 1:
            raise CaptureError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.layer_range is not None:
            start, stop = self.layer_range
            if start < 0 or stop <= start:
                raise CaptureError(
                    f"layer range must satisfy 0 <= start < stop, got {start}:{stop}"
                )


@dataclass(frozen=True)
class CaptureResult:
    """Where the dump landed and what it contains."""

    output: str
    sidecar: str
    num_layers: int
    num_tokens: int
    num_channels: int
    prompt_sha256: str


def _resolve_prompt(spec: CaptureSpec) -> str:
    if spec.prompt is not None:
        text = spec.prompt
    else:
        try:
            with open(spec.prompt_file, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise CaptureError(f"could not read prompt file {spec.prompt_file!r}: {exc}") from exc
    if not text:
        raise CaptureError("prompt is empty")
    return text


def _load(spec: CaptureSpec):
    """Load (model, tokenizer) for spec.model via transformers."""
    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer
    except ImportError as exc:
        raise CaptureError(f"transformers is not importable: {exc}") from exc
    try:
        tokenizer = AutoTokenizer.from_pretrained(spec.model)
        model = AutoModelForCausalLM.from_pretrained(spec.model).float()
    except MemoryError as exc:
        raise CaptureError(f"out of memory loading model {spec.model!r}") from exc
    except Exception as exc:
        raise CaptureError(f"could not load model {spec.model!r}: {exc}") from exc
    return model, tokenizer


def _cache_layers(past):
    """Normalize the cache object across transformers API generations."""
    if past is None:
        raise CaptureError("model returned no KV cache; does it support use_cache?")
    if hasattr(past, "layers"):
        return [(layer.keys, layer.values) for layer in past.layers]
    if hasattr(past, "key_cache"):
        return list(zip(past.key_cache, past.value_cache))
    return [(k, v) for k, v in past]


def _flatten_heads(tensor) -> np.ndarray:
    """(batch=1, heads, tokens, dim) -> (tokens, heads*dim) float32, head-major."""
    if tensor.ndim != 4 or tensor.shape[0] != 1:
        raise CaptureError(f"expected a (1, H, T, D) cache tensor, got shape {tuple(tensor.shape)}")
    flat = tensor[0].transpose(0, 1).reshape(tensor.shape[2], -1)
    return np.ascontiguousarray(flat.to(device="cpu", dtype=torch.float32).numpy())


def capture(spec: CaptureSpec, model=None, tokenizer=None) -> CaptureResult:
    """Run the model once over the prompt and write the cache as an XQKV dump.

    A preloaded (model, tokenizer) pair can be supplied to skip loading by
    identifier; otherwise both come from the transformers Auto classes. The
    dump write is atomic and a sidecar text file records the model name and
    the prompt's SHA-256 next to it.
    """
    text = _resolve_prompt(spec)
    prompt_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()
    if model is None or tokenizer is None:
        model, tokenizer = _load(spec)

    encoded = tokenizer(text, return_tensors="pt", truncation=True, max_length=spec.max_tokens)
    input_ids = encoded["input_ids"]
    if input_ids.ndim != 2 or input_ids.shape[0] != 1 or input_ids.shape[1] < 1:
        raise CaptureError(f"tokenizer produced shape {tuple(input_ids.shape)}, expected (1, T>=1)")
    input_ids = input_ids[:, : spec.max_tokens]

    model.eval()
    try:
        with torch.no_grad():
            output = model(input_ids=input_ids, use_cache=True)
    except torch.cuda.OutOfMemoryError as exc:
        raise CaptureError(f"out of memory during inference: {exc}") from exc
    except RuntimeError as exc:
        raise CaptureError(f"inference failed: {exc}") from exc

    layers = _cache_layers(output.past_key_values)
    total = len(layers)
    if spec.layer_range is not None:
        start, stop = spec.layer_range
        if stop > total:
            raise CaptureError(f"layer range {start}:{stop} exceeds model depth {total}")
        layers = layers[start:stop]

    keys = [_flatten_heads(k) for k, _ in layers]
    values = [_flatten_heads(v) for _, v in layers]
    for index, (k, v) in enumerate(zip(keys, values)):
        if not (np.isfinite(k).all() and np.isfinite(v).all()):
            raise CaptureError(f"captured layer {index} contains non-finite values; not writing")

    write_dump(spec.output, keys, values)
    sidecar = spec.output + ".meta.txt"
    lines = [
        f"model: {spec.model}",
        f"prompt_sha256: {prompt_hash}",
        f"tokens: {keys[0].shape[0]}",
        f"layers: {len(keys)} of {total}",
        f"channels: {keys[0].shape[1]}",
        f"layer_range: {spec.layer_range[0]}:{spec.layer_range[1]}"
        if spec.layer_range
        else "layer_range: all",
    ]
    tmp_sidecar = sidecar + ".tmp"
    with open(tmp_sidecar, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp_sidecar, sidecar)

    return CaptureResult(
        output=spec.output,
        sidecar=sidecar,
        num_layers=len(keys),
        num_tokens=keys[0].shape[0],
        num_channels=keys[0].shape[1],
        prompt_sha256=prompt_hash,
    )
