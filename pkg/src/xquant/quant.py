"""Group-wise asymmetric low-bit quantization with inward calibration.

A group of floats is mapped onto the integer grid [0, 2**B - 1] through an
affine transform derived from the group's min and max. Calibration shifts the
reconstruction levels inward by a factor eta, which lowers the expected
reconstruction error for spread-out inputs (see metrics.expected_mse_uniform
for the 1-bit closed form).

Numeric conventions, relied on by the binary formats and the test oracles:

- Rounding ties go DOWN at every half-integer boundary (0.5 -> 0, 1.5 -> 1).
- Parameters are computed in float64; the storage type for calibrated params
  is float32 (matching the cache file format), and reconstruction from stored
  params runs entirely in float32.
- A constant group (scale 0) quantizes to all-zero codes and reconstructs to
  its zero-point exactly.
- Packed code i occupies bits [i*B, (i+1)*B) of a little-endian bit stream;
  the final partial byte is zero-padded.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "SUPPORTED_BIT_WIDTHS",
    "GroupingMode",
    "QuantParams",
    "CalibratedParams",
    "CodeBlock",
    "QuantizedTensor",
    "round_half_down",
    "compute_params",
    "quantize_group",
    "calibrate",
    "dequantize_group",
    "fake_quantize_map",
    "pack_codes",
    "unpack_codes",
    "pack_code_rows",
    "unpack_code_rows",
    "quantize_groups",
    "dequantize_groups",
    "quantize_matrix",
    "pseudo_quantize",
]

SUPPORTED_BIT_WIDTHS = (1, 2)


class GroupingMode(Enum):
    """Direction along which consecutive elements share one (z, s) pair."""

    PER_CHANNEL = "per-channel"  # groups run down a channel, across tokens
    PER_TOKEN = "per-token"  # groups run along a token, across channels


def _check_bit_width(bit_width: int) -> None:
    if bit_width not in SUPPORTED_BIT_WIDTHS:
        raise ValueError(f"bit_width must be one of {SUPPORTED_BIT_WIDTHS}, got {bit_width}")


def _levels(bit_width: int) -> int:
    return (1 << bit_width) - 1


def _check_eta(eta: float, upper_closed: bool = False) -> None:
    hi_ok = eta <= 0.5 if upper_closed else eta < 0.5
    if not (0.0 <= eta and hi_ok):
        bound = "[0, 0.5]" if upper_closed else "[0, 0.5)"
        raise ValueError(f"eta must lie in {bound}, got {eta}")


@dataclass(frozen=True)
class QuantParams:
    """Raw affine parameters of one group: x ~ zero_point + code * scale."""

    zero_point: float
    scale: float
    bit_width: int

    def __post_init__(self) -> None:
        _check_bit_width(self.bit_width)
        if not (self.scale >= 0.0):
            raise ValueError(f"scale must be nonnegative, got {self.scale}")


@dataclass(frozen=True)
class CalibratedParams:
    """Inward-shifted parameters actually stored for reconstruction."""

    zhat: float
    shat: float
    bit_width: int

    def __post_init__(self) -> None:
        _check_bit_width(self.bit_width)


@dataclass(frozen=True)
class CodeBlock:
    """Bit-packed integer codes of one group."""

    data: bytes
    code_count: int
    bit_width: int

    def __post_init__(self) -> None:
        _check_bit_width(self.bit_width)


def round_half_down(x) -> np.ndarray:
    """Round to the nearest integer with exact halves going down."""
    return np.ceil(np.asarray(x, dtype=np.float64) - 0.5)


def compute_params(group, bit_width: int) -> QuantParams:
    """Min/max affine parameters of a group: z = min, s = (max - min) / (2**B - 1)."""
    _check_bit_width(bit_width)
    arr = np.asarray(group, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("group must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("group contains non-finite values")
    z = float(arr.min())
    s = (float(arr.max()) - z) / _levels(bit_width)
    return QuantParams(z, s, bit_width)


def quantize_group(group, params: QuantParams) -> np.ndarray:
    """Integer codes for a group under the given params, clamped into range.

    Ties round down; a zero scale yields all-zero codes.
    """
    arr = np.asarray(group, dtype=np.float64)
    lv = _levels(params.bit_width)
    if params.scale == 0.0:
        return np.zeros(arr.shape, dtype=np.uint8)
    t = (arr - params.zero_point) / params.scale
    codes = np.clip(round_half_down(t), 0, lv)
    return codes.astype(np.uint8)


def calibrate(params: QuantParams, eta: float) -> CalibratedParams:
    """Shift the reconstruction range inward: zhat = z + eta*s*(2**B - 1), shat = (1 - 2*eta)*s."""
    _check_eta(eta)
    lv = _levels(params.bit_width)
    zhat = params.zero_point + eta * params.scale * lv
    shat = (1.0 - 2.0 * eta) * params.scale
    return CalibratedParams(zhat, shat, params.bit_width)


def dequantize_group(codes, cal: CalibratedParams) -> np.ndarray:
    """Reconstruct values as code * shat + zhat (float64 analysis path)."""
    arr = np.asarray(codes)
    return arr.astype(np.float64) * cal.shat + cal.zhat


def fake_quantize_map(e, eta: float):
    """Quantize-dequantize map on the unit interval: eta below 0.5, 1 - eta above.

    With eta = 0 this is plain round-to-nearest (ties down). Accepts scalars
    or arrays; eta may equal 0.5 here (both branches then meet at 0.5).
    """
    _check_eta(eta, upper_closed=True)
    arr = np.asarray(e, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("e must lie in [0, 1]")
    out = np.where(arr <= 0.5, eta, 1.0 - eta)
    if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
        return float(out)
    return out


def _codes_as_uint8(codes, bit_width: int) -> np.ndarray:
    arr = np.asarray(codes)
    if arr.size and (arr.min() < 0 or arr.max() > _levels(bit_width)):
        raise ValueError(f"codes out of range for {bit_width}-bit packing")
    return arr.astype(np.uint8)


def pack_codes(codes, bit_width: int) -> CodeBlock:
    """Pack codes so code i occupies bits [i*B, (i+1)*B) of a little-endian stream."""
    _check_bit_width(bit_width)
    arr = _codes_as_uint8(codes, bit_width)
    if arr.ndim != 1:
        raise ValueError("pack_codes expects a 1-D code sequence")
    data = pack_code_rows(arr[None, :], bit_width)[0].tobytes()
    return CodeBlock(data=data, code_count=arr.size, bit_width=bit_width)


def unpack_codes(block: CodeBlock) -> np.ndarray:
    """Inverse of pack_codes; validates the block's byte length."""
    expected = (block.code_count * block.bit_width + 7) // 8
    if len(block.data) != expected:
        raise ValueError(
            f"code block holds {len(block.data)} bytes, expected {expected} "
            f"for {block.code_count} codes at {block.bit_width} bits"
        )
    raw = np.frombuffer(block.data, dtype=np.uint8)
    return unpack_code_rows(raw[None, :], block.bit_width, block.code_count)[0]


def pack_code_rows(codes: np.ndarray, bit_width: int) -> np.ndarray:
    """Row-wise packing of an (n, g) code array into (n, ceil(g*B/8)) bytes."""
    _check_bit_width(bit_width)
    arr = _codes_as_uint8(codes, bit_width)
    n, g = arr.shape
    if n == 0:
        return np.zeros((0, (g * bit_width + 7) // 8), dtype=np.uint8)
    bits = np.unpackbits(arr[:, :, None], axis=2, count=bit_width, bitorder="little")
    return np.packbits(bits.reshape(n, g * bit_width), axis=1, bitorder="little")


def unpack_code_rows(packed: np.ndarray, bit_width: int, code_count: int) -> np.ndarray:
    """Inverse of pack_code_rows: (n, bytes) -> (n, code_count) uint8 codes."""
    _check_bit_width(bit_width)
    arr = np.asarray(packed, dtype=np.uint8)
    n = arr.shape[0]
    if n == 0:
        return np.zeros((0, code_count), dtype=np.uint8)
    bits = np.unpackbits(arr, axis=1, count=code_count * bit_width, bitorder="little")
    bits = bits.reshape(n, code_count, bit_width)
    weights = (1 << np.arange(bit_width, dtype=np.uint8)).astype(np.uint8)
    return (bits * weights).sum(axis=2).astype(np.uint8)


def quantize_groups(groups, bit_width: int, eta: float, with_codes: bool = True):
    """Vectorized quantization of an (n, g) array, one group per row.

    Returns (zhat, shat, codes): float32 param arrays of shape (n,) and a
    uint8 (n, g) code array (None when with_codes is False). Params are
    computed in float64 and cast to float32 for storage; codes come from the
    float64 normalized values with ties rounding down.
    """
    _check_bit_width(bit_width)
    _check_eta(eta)
    arr = np.asarray(groups, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("groups must be a 2-D array, one group per row")
    lv = _levels(bit_width)
    z = arr.min(axis=1) if arr.shape[0] else np.zeros(0)
    s = (arr.max(axis=1) - z) / lv if arr.shape[0] else np.zeros(0)
    zhat = (z + eta * s * lv).astype(np.float32)
    shat = ((1.0 - 2.0 * eta) * s).astype(np.float32)
    codes = None
    if with_codes:
        if arr.shape[0] == 0:
            codes = np.zeros(arr.shape, dtype=np.uint8)
        else:
            safe = np.where(s == 0.0, 1.0, s)
            t = (arr - z[:, None]) / safe[:, None]
            c = np.clip(np.ceil(t - 0.5), 0.0, float(lv))
            c = np.where(s[:, None] == 0.0, 0.0, c)
            codes = c.astype(np.uint8)
    return zhat, shat, codes


def dequantize_groups(codes: np.ndarray, zhat: np.ndarray, shat: np.ndarray) -> np.ndarray:
    """Float32 reconstruction of an (n, g) code array: codes * shat + zhat per row."""
    c = np.asarray(codes).astype(np.float32)
    return c * np.asarray(shat, dtype=np.float32)[:, None] + np.asarray(zhat, dtype=np.float32)[:, None]


@dataclass
class QuantizedTensor:
    """One matrix quantized group-wise: packed codes plus per-group params.

    zhat/shat are float32 arrays of shape (num_groups,); packed is a
    (num_groups, ceil(g*B/8)) uint8 array, or None when only parameters were
    computed. Group order is channel-major for PER_CHANNEL (all groups of
    channel 0 first) and row-major for PER_TOKEN.
    """

    mode: GroupingMode
    group_size: int
    bit_width: int
    shape: tuple[int, int]
    zhat: np.ndarray
    shat: np.ndarray
    packed: np.ndarray | None

    @property
    def num_groups(self) -> int:
        return self.zhat.shape[0]

    def group_params(self, index: int) -> CalibratedParams:
        return CalibratedParams(float(self.zhat[index]), float(self.shat[index]), self.bit_width)

    def block(self, index: int) -> CodeBlock:
        if self.packed is None:
            raise ValueError("this tensor carries parameters only, no codes")
        return CodeBlock(self.packed[index].tobytes(), self.group_size, self.bit_width)

    def group_codes(self, index: int) -> np.ndarray:
        return self.codes()[index]

    def codes(self) -> np.ndarray:
        """Unpacked (num_groups, group_size) uint8 codes."""
        if self.packed is None:
            raise ValueError("this tensor carries parameters only, no codes")
        return unpack_code_rows(self.packed, self.bit_width, self.group_size)

    def reconstruct(self) -> np.ndarray:
        """Float32 reconstruction with the original matrix shape."""
        values = dequantize_groups(self.codes(), self.zhat, self.shat)
        t, c = self.shape
        if self.mode is GroupingMode.PER_CHANNEL:
            return values.reshape(c, t // self.group_size, self.group_size).reshape(c, t).T.copy()
        return values.reshape(t, c)


def _matrix_groups(matrix: np.ndarray, mode: GroupingMode, group_size: int) -> np.ndarray:
    t, c = matrix.shape
    grouped_dim = t if mode is GroupingMode.PER_CHANNEL else c
    if grouped_dim % group_size != 0:
        raise ValueError(
            f"{mode.value} grouping needs a dimension divisible by {group_size}, "
            f"got {grouped_dim}; split off the residual tokens first"
        )
    if mode is GroupingMode.PER_CHANNEL:
        return np.ascontiguousarray(matrix.T).reshape(-1, group_size)
    return matrix.reshape(-1, group_size)


def _quantize_matrix_impl(matrix, mode, group_size, bit_width, eta, with_codes):
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ValueError("matrix must be 2-D (tokens x channels)")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite values")
    groups = _matrix_groups(arr, mode, group_size)
    zhat, shat, codes = quantize_groups(groups, bit_width, eta, with_codes=with_codes)
    packed = pack_code_rows(codes, bit_width) if codes is not None else None
    return QuantizedTensor(
        mode=mode,
        group_size=group_size,
        bit_width=bit_width,
        shape=(arr.shape[0], arr.shape[1]),
        zhat=zhat,
        shat=shat,
        packed=packed,
    )


def quantize_matrix(matrix, mode: GroupingMode, group_size: int, bit_width: int, eta: float) -> QuantizedTensor:
    """Quantize a full T x C matrix group-wise; every group is independent."""
    return _quantize_matrix_impl(matrix, mode, group_size, bit_width, eta, with_codes=True)


def pseudo_quantize(matrix, mode: GroupingMode, group_size: int, bit_width: int, eta: float) -> QuantizedTensor:
    """Compute per-group calibrated params exactly as quantize_matrix, storing no codes."""
    return _quantize_matrix_impl(matrix, mode, group_size, bit_width, eta, with_codes=False)
