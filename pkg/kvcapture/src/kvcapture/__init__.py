"""Capture per-layer KV caches from causal transformers as XQKV dumps."""

from kvcapture.capture import CaptureError, CaptureResult, CaptureSpec, capture
from kvcapture.xqkv import DumpError, DumpFormatError, read_dump, write_dump

__all__ = [
    "CaptureError",
    "CaptureResult",
    "CaptureSpec",
    "capture",
    "DumpError",
    "DumpFormatError",
    "read_dump",
    "write_dump",
]
