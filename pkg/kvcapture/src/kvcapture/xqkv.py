"""Self-contained XQKV v1 writer/reader.

This mirrors the dump container used by downstream compression tools so the
two packages interoperate purely at the file level: a 24-byte header
    magic 'XQKV' | version u32 = 1 | L u32 | T u32 | C u32 | dtype u8 = 0 | 3 pad
followed, per layer, by the key matrix then the value matrix as row-major
little-endian float32[T*C].

Writes are atomic: the payload goes to a temp file in the target directory
and is renamed into place only once complete, so a crash or validation
failure never leaves a partial dump at the destination path.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

DUMP_MAGIC = b"XQKV"
DUMP_VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIIB3x")


class DumpError(Exception):
    """Base class for dump container problems."""


class DumpFormatError(DumpError):
    """Bad magic, unsupported version, truncation, or invalid payload."""


def _validate_matrices(keys: list[np.ndarray], values: list[np.ndarray]) -> tuple[int, int, int]:
    if not keys or len(keys) != len(values):
        raise DumpError(
            f"need matching nonempty key/value lists, got {len(keys)} and {len(values)}"
        )
    shape = keys[0].shape
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise DumpError(f"layer matrices must be (tokens, channels), got {shape}")
    for index, (k, v) in enumerate(zip(keys, values)):
        for side, matrix in (("key", k), ("value", v)):
            if matrix.shape != shape:
                raise DumpError(
                    f"layer {index} {side} matrix has shape {matrix.shape}, expected {shape}"
                )
            if matrix.dtype != np.float32:
                raise DumpError(
                    f"layer {index} {side} matrix has dtype {matrix.dtype}, expected float32"
                )
            if not np.isfinite(matrix).all():
                raise DumpError(f"non-finite value in layer {index} {side} matrix")
    return len(keys), shape[0], shape[1]


def write_dump(path: str, keys: list[np.ndarray], values: list[np.ndarray]) -> int:
    """Atomically write per-layer (tokens, channels) float32 matrices.

    Returns the byte count written. The destination only appears once the
    full payload is on disk.
    """
    num_layers, num_tokens, num_channels = _validate_matrices(keys, values)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".xqkv-", suffix=".tmp")
    written = 0
    try:
        with os.fdopen(fd, "wb") as sink:
            written += sink.write(
                _HEADER.pack(
                    DUMP_MAGIC, DUMP_VERSION, num_layers, num_tokens, num_channels, _DTYPE_F32
                )
            )
            for k, v in zip(keys, values):
                for matrix in (k, v):
                    written += sink.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
            sink.flush()
            os.fsync(sink.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise
    return written


def read_dump(path: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Read a dump back as (key matrices, value matrices) float32 lists."""
    with open(path, "rb") as source:
        head = source.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise DumpFormatError(
                f"truncated header: expected {_HEADER.size} bytes, got {len(head)}"
            )
        magic, version, num_layers, num_tokens, num_channels, dtype = _HEADER.unpack(head)
        if magic != DUMP_MAGIC:
            raise DumpFormatError(f"bad magic {magic!r}, expected {DUMP_MAGIC!r}")
        if version != DUMP_VERSION:
            raise DumpFormatError(f"unsupported dump version {version}")
        if dtype != _DTYPE_F32:
            raise DumpFormatError(f"unknown payload dtype code {dtype}")
        if num_layers < 1 or num_tokens < 1 or num_channels < 1:
            raise DumpFormatError(
                f"header counts must be positive, got L={num_layers} T={num_tokens} C={num_channels}"
            )
        matrix_bytes = num_tokens * num_channels * 4
        keys: list[np.ndarray] = []
        values: list[np.ndarray] = []
        for index in range(num_layers):
            for side, bucket in (("key", keys), ("value", values)):
                raw = source.read(matrix_bytes)
                if len(raw) < matrix_bytes:
                    raise DumpFormatError(
                        f"truncated in layer {index} {side} matrix: "
                        f"expected {matrix_bytes} bytes, got {len(raw)}"
                    )
                matrix = (
                    np.frombuffer(raw, dtype="<f4")
                    .reshape(num_tokens, num_channels)
                    .astype(np.float32)
                )
                if not np.isfinite(matrix).all():
                    raise DumpFormatError(f"non-finite value in layer {index} {side} matrix")
                bucket.append(matrix)
    return keys, values
