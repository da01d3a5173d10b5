"""Bit-exact binary container for multi-layer KV tensors, plus synthetic data.

Dump format v1 ("XQKV"): a 24-byte header
    magic 'XQKV' | version u32 = 1 | L u32 | T u32 | C u32 | dtype u8 = 0 (f32) | 3 pad bytes
followed, for each layer, by the key matrix then the value matrix as row-major
float32[T*C]. All integers and floats are little-endian. Total file size is
exactly 24 + 8*L*T*C bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DUMP_MAGIC",
    "DUMP_VERSION",
    "DumpError",
    "DumpFormatError",
    "DumpLengthError",
    "DumpValidationError",
    "DumpWriteError",
    "LayerTensor",
    "TensorDump",
    "SyntheticSpec",
    "write_dump",
    "read_dump",
    "gen_synthetic",
]

DUMP_MAGIC = b"XQKV"
DUMP_VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIIB3x")


class DumpError(Exception):
    """Base class for dump container problems."""


class DumpFormatError(DumpError):
    """Bad magic, unsupported version, or unknown payload dtype."""


class DumpLengthError(DumpError):
    """Stream ended before the declared payload was complete."""


class DumpValidationError(DumpError):
    """Structurally broken dump: bad shapes, counts, or non-finite values."""


class DumpWriteError(DumpError):
    """Sink failure while writing; the message carries the byte position."""


@dataclass
class LayerTensor:
    """One layer's key and value matrices, each tokens x channels float32."""

    key_matrix: np.ndarray
    value_matrix: np.ndarray


@dataclass
class TensorDump:
    """Per-layer K and V matrices for a whole model, the raw input."""

    num_layers: int
    num_tokens: int
    num_channels: int
    layers: list[LayerTensor]

    @classmethod
    def from_arrays(cls, keys, values) -> "TensorDump":
        """Build a dump from (L, T, C) key and value arrays; casts to float32."""
        k = np.asarray(keys, dtype=np.float32)
        v = np.asarray(values, dtype=np.float32)
        if k.ndim != 3 or k.shape != v.shape:
            raise DumpValidationError(
                f"expected matching (layers, tokens, channels) arrays, got {k.shape} and {v.shape}"
            )
        layers = [LayerTensor(k[i].copy(), v[i].copy()) for i in range(k.shape[0])]
        return cls(k.shape[0], k.shape[1], k.shape[2], layers)

    def validate(self) -> None:
        if self.num_layers < 1 or self.num_tokens < 1 or self.num_channels < 1:
            raise DumpValidationError(
                f"counts must be positive, got L={self.num_layers} T={self.num_tokens} C={self.num_channels}"
            )
        if len(self.layers) != self.num_layers:
            raise DumpValidationError(
                f"dump declares {self.num_layers} layers but holds {len(self.layers)}"
            )
        shape = (self.num_tokens, self.num_channels)
        for index, layer in enumerate(self.layers):
            for side, matrix in (("key", layer.key_matrix), ("value", layer.value_matrix)):
                if matrix.shape != shape:
                    raise DumpValidationError(
                        f"layer {index} {side} matrix has shape {matrix.shape}, expected {shape}"
                    )
                if matrix.dtype != np.float32:
                    raise DumpValidationError(
                        f"layer {index} {side} matrix has dtype {matrix.dtype}, expected float32"
                    )
                _check_finite(matrix, index, side)


def _check_finite(matrix: np.ndarray, layer_index: int, side: str) -> None:
    finite = np.isfinite(matrix)
    if not finite.all():
        row, col = np.argwhere(~finite)[0]
        raise DumpValidationError(
            f"non-finite value in layer {layer_index} {side} matrix at row {row}, col {col}"
        )


def write_dump(dump: TensorDump, sink) -> int:
    """Serialize a dump to a binary sink; returns the byte count written."""
    dump.validate()
    written = 0
    try:
        written += sink.write(
            _HEADER.pack(
                DUMP_MAGIC,
                DUMP_VERSION,
                dump.num_layers,
                dump.num_tokens,
                dump.num_channels,
                _DTYPE_F32,
            )
        )
        for layer in dump.layers:
            for matrix in (layer.key_matrix, layer.value_matrix):
                written += sink.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    except OSError as exc:
        raise DumpWriteError(f"sink write failed after {written} bytes: {exc}") from exc
    return written


def read_dump(source) -> TensorDump:
    """Parse a dump from a binary source, validating structure and finiteness."""
    head = source.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DumpLengthError(f"truncated header: expected {_HEADER.size} bytes, got {len(head)}")
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
    layers: list[LayerTensor] = []
    for index in range(num_layers):
        matrices = []
        for side in ("key", "value"):
            raw = source.read(matrix_bytes)
            if len(raw) < matrix_bytes:
                raise DumpLengthError(
                    f"truncated in layer {index} {side} matrix: expected {matrix_bytes} bytes, got {len(raw)}"
                )
            matrix = np.frombuffer(raw, dtype="<f4").reshape(num_tokens, num_channels).astype(np.float32)
            _check_finite(matrix, index, side)
            matrices.append(matrix)
        layers.append(LayerTensor(matrices[0], matrices[1]))
    return TensorDump(num_layers, num_tokens, num_channels, layers)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a reproducible synthetic dump with tunable structure.

    interlayer_correlation blends each layer into the next (1.0 makes all
    layers identical); per_channel_scale_spread and the outlier knobs emulate
    channels with wildly different magnitudes.
    """

    num_layers: int
    num_tokens: int
    num_channels: int
    per_channel_scale_spread: float = 0.0
    outlier_channel_fraction: float = 0.0
    outlier_magnitude: float = 1.0
    interlayer_correlation: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.num_tokens < 1 or self.num_channels < 1:
            raise ValueError("layer, token, and channel counts must all be >= 1")
        if self.per_channel_scale_spread < 0:
            raise ValueError("per_channel_scale_spread must be nonnegative")
        if not (0.0 <= self.outlier_channel_fraction <= 1.0):
            raise ValueError("outlier_channel_fraction must lie in [0, 1]")
        if self.outlier_magnitude <= 0:
            raise ValueError("outlier_magnitude must be positive")
        if not (0.0 <= self.interlayer_correlation <= 1.0):
            raise ValueError("interlayer_correlation must lie in [0, 1]")


def gen_synthetic(spec: SyntheticSpec) -> TensorDump:
    """Generate a dump from a SyntheticSpec; fully determined by spec.seed.

    Draw order is fixed: channel scale normals, outlier channel choice, then
    per layer the key noise followed by the value noise. Layers chain in
    unscaled space (layer l+1 = rho * layer l + (1 - rho) * fresh noise) and
    the per-channel scaling is applied to each emitted layer.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.num_tokens, spec.num_channels)
    scales = np.exp(spec.per_channel_scale_spread * rng.standard_normal(spec.num_channels))
    outlier_count = int(spec.outlier_channel_fraction * spec.num_channels)
    if outlier_count:
        chosen = rng.choice(spec.num_channels, size=outlier_count, replace=False)
        scales[chosen] *= spec.outlier_magnitude
    rho = spec.interlayer_correlation
    keys_raw = rng.standard_normal(shape)
    values_raw = rng.standard_normal(shape)
    layers: list[LayerTensor] = []
    for index in range(spec.num_layers):
        if index > 0:
            keys_raw = rho * keys_raw + (1.0 - rho) * rng.standard_normal(shape)
            values_raw = rho * values_raw + (1.0 - rho) * rng.standard_normal(shape)
        layers.append(
            LayerTensor(
                (keys_raw * scales).astype(np.float32),
                (values_raw * scales).astype(np.float32),
            )
        )
    return TensorDump(spec.num_layers, spec.num_tokens, spec.num_channels, layers)
