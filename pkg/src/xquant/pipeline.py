"""End-to-end compression pipeline for per-layer KV caches.

Every layer's K and V matrices are quantized group-wise with calibration.
Two threshold families steer the per-layer treatment:

* bit width: layers below kq (keys) / vq (values) get 2-bit codes, the
  rest 1-bit;
* storage role: layer l stores its own codes iff l < km/vm or l is even.
  Odd layers at or past the threshold are subordinate: they keep only
  their own calibrated params (zhat, shat) per group and borrow the code
  array of layer l-1 at dequantization time.

The last residual_length tokens (plus any group remainder) stay in full
precision; older tokens are packed in g-sized chunks as they fall out of
that window, so streaming appends and one-shot quantization produce the
same cache bit for bit.

Cache file format v1 (little-endian):

    magic 'XQQC' | version u32 | L, T_packed, T_residual, C u32
    | kq, vq, km, vm u32 | eta1, eta2 f32 | g, R u32
    | per layer, K then V:
        role u8 (1 = stores codes), group count u32,
        params as (zhat, shat) f32 pairs,
        packed code rows (storing entries only, ceil(g*B/8) bytes/group)
    | per layer, K then V: residual tokens as T_residual x C f32

Concurrency: append_tokens is single-writer; it swaps whole entry
objects in rather than mutating arrays, so a reader holding a reference
keeps a consistent snapshot.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .quant import (
    GroupingMode,
    dequantize_groups,
    pack_code_rows,
    quantize_groups,
    unpack_code_rows,
)
from .tensor_io import LayerTensor, TensorDump

__all__ = [
    "CACHE_MAGIC",
    "CACHE_VERSION",
    "CacheEntry",
    "CacheFormatError",
    "CacheStructureError",
    "ConfigError",
    "LayerCache",
    "QuantizedKVCache",
    "XQuantConfig",
    "append_tokens",
    "bits_for_layer",
    "dequantize_cache",
    "quantize_cache",
    "read_cache",
    "stores_codes",
    "write_cache",
]

CACHE_MAGIC = b"XQQC"
CACHE_VERSION = 1

_CACHE_HEADER = struct.Struct("<4s9I2f2I")


class ConfigError(ValueError):
    """Invalid configuration field, or config incompatible with the data."""


class CacheFormatError(Exception):
    """Serialized cache is malformed or inconsistent with its own header."""


class CacheStructureError(Exception):
    """In-memory cache violates the role invariants (e.g. missing codes)."""


def bits_for_layer(layer: int, q_threshold: int) -> int:
    """Code width for a layer: 2 below the threshold, 1 at or above it."""
    return 2 if layer < q_threshold else 1


def stores_codes(layer: int, m_threshold: int) -> bool:
    """Whether a layer stores its own codes (vs borrowing layer-1's)."""
    return layer < m_threshold or layer % 2 == 0


def _as_threshold(name: str, value) -> int:
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None
    if out < 0:
        raise ConfigError(f"{name} must be nonnegative, got {out}")
    return out


def _as_eta(name: str, value) -> float:
    # stored at float32 precision so a config survives the cache file
    # header and compares equal afterwards
    out = float(np.float32(value))
    if not 0.0 <= out < 0.5:
        raise ConfigError(f"{name} must lie in [0, 0.5), got {value}")
    return out


@dataclass(frozen=True)
class XQuantConfig:
    """Pipeline knobs; defaults follow the reference 32-layer setting."""

    kq: int = 30
    vq: int = 2
    km: int = 32
    vm: int = 16
    eta1: float = 1 / 6
    eta2: float = 0.045
    group_size: int = 32
    residual_length: int = 128

    def __post_init__(self):
        for name in ("kq", "vq", "km", "vm"):
            object.__setattr__(self, name, _as_threshold(name, getattr(self, name)))
        object.__setattr__(self, "eta1", _as_eta("eta1", self.eta1))
        object.__setattr__(self, "eta2", _as_eta("eta2", self.eta2))
        object.__setattr__(self, "group_size", _as_threshold("group_size", self.group_size))
        object.__setattr__(
            self, "residual_length", _as_threshold("residual_length", self.residual_length)
        )
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")

    def validate_for(self, num_layers: int, num_channels: int) -> None:
        """Check this config against concrete cache dimensions."""
        for name in ("kq", "vq", "km", "vm"):
            value = getattr(self, name)
            if value > num_layers:
                raise ConfigError(
                    f"{name}={value} exceeds the layer count {num_layers}"
                )
        if num_channels % self.group_size != 0:
            raise ConfigError(
                f"channel count {num_channels} is not a multiple of "
                f"group_size {self.group_size}; value groups would straddle tokens"
            )

    def eta_for_bits(self, bit_width: int) -> float:
        """Calibration strength is chosen by code width, not cache side."""
        if bit_width == 2:
            return self.eta2
        if bit_width == 1:
            return self.eta1
        raise ValueError(f"bit width must be 1 or 2, got {bit_width}")


@dataclass(frozen=True)
class CacheEntry:
    """One layer-side's quantized state: params always, codes if storing."""

    stores: bool
    bit_width: int
    mode: GroupingMode
    zhat: np.ndarray
    shat: np.ndarray
    codes: np.ndarray | None  # (n_groups, g) uint8, None for params-only


@dataclass(frozen=True)
class LayerCache:
    key: CacheEntry
    value: CacheEntry


@dataclass
class QuantizedKVCache:
    config: XQuantConfig
    num_layers: int
    num_channels: int
    packed_tokens: int
    layers: list[LayerCache]
    key_residual: list[np.ndarray] = field(repr=False)
    value_residual: list[np.ndarray] = field(repr=False)

    @property
    def residual_tokens(self) -> int:
        if not self.key_residual:
            return 0
        return int(self.key_residual[0].shape[0])

    @classmethod
    def empty(cls, config: XQuantConfig, num_layers: int, num_channels: int) -> "QuantizedKVCache":
        """A cache with no tokens yet, ready for append_tokens."""
        config.validate_for(num_layers, num_channels)
        layers = [
            LayerCache(
                key=_empty_entry(l, config.kq, config.km, GroupingMode.PER_CHANNEL, config),
                value=_empty_entry(l, config.vq, config.vm, GroupingMode.PER_TOKEN, config),
            )
            for l in range(num_layers)
        ]
        empty_res = np.zeros((0, num_channels), dtype=np.float32)
        return cls(
            config=config,
            num_layers=num_layers,
            num_channels=num_channels,
            packed_tokens=0,
            layers=layers,
            key_residual=[empty_res.copy() for _ in range(num_layers)],
            value_residual=[empty_res.copy() for _ in range(num_layers)],
        )


def _empty_entry(layer, q, m, mode, config: XQuantConfig) -> CacheEntry:
    stores = stores_codes(layer, m)
    return CacheEntry(
        stores=stores,
        bit_width=bits_for_layer(layer, q),
        mode=mode,
        zhat=np.zeros(0, dtype=np.float32),
        shat=np.zeros(0, dtype=np.float32),
        codes=np.zeros((0, config.group_size), dtype=np.uint8) if stores else None,
    )


# -----------------------------------------------------------------------------
# grouping layout
# -----------------------------------------------------------------------------
# Keys group g consecutive tokens within a channel. Rows are ordered
# chunk-major (all channels of the oldest g-token chunk first) so that a
# streaming flush appends rows without reordering history. Values group g
# consecutive channels within a token, row-major, which has the same
# property for free.


def _key_groups(matrix: np.ndarray, g: int) -> np.ndarray:
    t, c = matrix.shape
    chunked = matrix.reshape(t // g, g, c).transpose(0, 2, 1)
    return np.ascontiguousarray(chunked).reshape(-1, g)


def _key_matrix(rows: np.ndarray, t: int, c: int, g: int) -> np.ndarray:
    chunked = rows.reshape(t // g, c, g).transpose(0, 2, 1)
    return np.ascontiguousarray(chunked).reshape(t, c)


def _value_groups(matrix: np.ndarray, g: int) -> np.ndarray:
    return matrix.reshape(-1, g)


def _value_matrix(rows: np.ndarray, t: int, c: int, g: int) -> np.ndarray:
    return rows.reshape(t, c)


def _side_groups(matrix: np.ndarray, mode: GroupingMode, g: int) -> np.ndarray:
    if mode is GroupingMode.PER_CHANNEL:
        return _key_groups(matrix, g)
    return _value_groups(matrix, g)


def _packed_count(total_tokens: int, residual_length: int, group_size: int) -> int:
    return (max(total_tokens - residual_length, 0) // group_size) * group_size


def _quantize_entry(matrix, layer, q, m, mode, cfg: XQuantConfig) -> CacheEntry:
    bits = bits_for_layer(layer, q)
    stores = stores_codes(layer, m)
    rows = _side_groups(matrix, mode, cfg.group_size)
    zhat, shat, codes = quantize_groups(rows, bits, cfg.eta_for_bits(bits), with_codes=stores)
    return CacheEntry(stores=stores, bit_width=bits, mode=mode, zhat=zhat, shat=shat, codes=codes)


def quantize_cache(dump: TensorDump, cfg: XQuantConfig) -> QuantizedKVCache:
    """Quantize a whole dump in one shot.

    Tokens beyond the residual window are packed in g-sized chunks; the
    trailing residual_length..residual_length+g-1 tokens stay float32.
    """
    cfg.validate_for(dump.num_layers, dump.num_channels)
    packed = _packed_count(dump.num_tokens, cfg.residual_length, cfg.group_size)
    layers = []
    key_residual = []
    value_residual = []
    for l, layer in enumerate(dump.layers):
        layers.append(
            LayerCache(
                key=_quantize_entry(
                    layer.key_matrix[:packed], l, cfg.kq, cfg.km, GroupingMode.PER_CHANNEL, cfg
                ),
                value=_quantize_entry(
                    layer.value_matrix[:packed], l, cfg.vq, cfg.vm, GroupingMode.PER_TOKEN, cfg
                ),
            )
        )
        key_residual.append(layer.key_matrix[packed:].copy())
        value_residual.append(layer.value_matrix[packed:].copy())
    return QuantizedKVCache(
        config=cfg,
        num_layers=dump.num_layers,
        num_channels=dump.num_channels,
        packed_tokens=packed,
        layers=layers,
        key_residual=key_residual,
        value_residual=value_residual,
    )


def _codes_for(qcache: QuantizedKVCache, layer: int, entry: CacheEntry, side: str) -> np.ndarray:
    """Resolve the code array an entry dequantizes with.

    Storing entries use their own codes. Subordinate entries borrow layer
    layer-1's; when the neighbor is wider (2-bit feeding a 1-bit layer)
    the borrowed codes are clamped into this entry's range.
    """
    if entry.stores:
        if entry.codes is None:
            raise CacheStructureError(f"layer {layer} {side} claims codes but has none")
        return entry.codes
    if layer == 0:
        raise CacheStructureError(f"layer 0 {side} cannot borrow codes: no predecessor")
    neighbor: CacheEntry = getattr(qcache.layers[layer - 1], side)
    if neighbor.codes is None:
        raise CacheStructureError(
            f"layer {layer} {side} borrows codes but layer {layer - 1} stores none"
        )
    codes = neighbor.codes
    if codes.shape[0] != entry.zhat.shape[0]:
        raise CacheStructureError(
            f"layer {layer} {side} has {entry.zhat.shape[0]} groups but layer "
            f"{layer - 1} stores {codes.shape[0]}"
        )
    if neighbor.bit_width > entry.bit_width:
        codes = np.minimum(codes, (1 << entry.bit_width) - 1)
    return codes


def dequantize_cache(qcache: QuantizedKVCache, config: XQuantConfig | None = None) -> TensorDump:
    """Reconstruct a float32 dump from a quantized cache.

    The optional config is a consistency check only; the cache already
    carries the config it was built with.
    """
    if config is not None and config != qcache.config:
        raise ConfigError("cache was built with a different config")
    cfg = qcache.config
    g = cfg.group_size
    t_packed = qcache.packed_tokens
    c = qcache.num_channels
    total = t_packed + qcache.residual_tokens
    layers = []
    for l, lc in enumerate(qcache.layers):
        matrices = {}
        for side, entry, residual in (
            ("key", lc.key, qcache.key_residual[l]),
            ("value", lc.value, qcache.value_residual[l]),
        ):
            rows = dequantize_groups(_codes_for(qcache, l, entry, side), entry.zhat, entry.shat)
            if entry.mode is GroupingMode.PER_CHANNEL:
                packed = _key_matrix(rows, t_packed, c, g)
            else:
                packed = _value_matrix(rows, t_packed, c, g)
            matrices[side] = np.concatenate([packed, residual], axis=0)
        layers.append(LayerTensor(matrices["key"], matrices["value"]))
    return TensorDump(qcache.num_layers, total, c, layers)


def _extended_entry(entry: CacheEntry, chunk: np.ndarray, cfg: XQuantConfig) -> CacheEntry:
    rows = _side_groups(chunk, entry.mode, cfg.group_size)
    zhat, shat, codes = quantize_groups(
        rows, entry.bit_width, cfg.eta_for_bits(entry.bit_width), with_codes=entry.stores
    )
    return CacheEntry(
        stores=entry.stores,
        bit_width=entry.bit_width,
        mode=entry.mode,
        zhat=np.concatenate([entry.zhat, zhat]),
        shat=np.concatenate([entry.shat, shat]),
        codes=None if entry.codes is None else np.concatenate([entry.codes, codes]),
    )


def append_tokens(qcache: QuantizedKVCache, keys, values, cfg: XQuantConfig | None = None):
    """Append new token rows to every layer, flushing the residual window.

    keys and values are per-layer arrays of shape (t_new, C), all layers
    advancing by the same t_new. Whenever the residual buffer holds at
    least residual_length + g tokens, the oldest g are quantized per the
    layer's role and moved to the packed region. Returns the same cache.
    """
    cfg = qcache.config if cfg is None else cfg
    L, c = qcache.num_layers, qcache.num_channels
    if len(keys) != L or len(values) != L:
        raise ValueError(f"expected {L} per-layer arrays, got {len(keys)} keys / {len(values)} values")
    new_k = [np.asarray(a, dtype=np.float32) for a in keys]
    new_v = [np.asarray(a, dtype=np.float32) for a in values]
    t_new = new_k[0].shape[0] if new_k else 0
    for name, arrays in (("keys", new_k), ("values", new_v)):
        for l, a in enumerate(arrays):
            if a.ndim != 2 or a.shape[1] != c:
                raise ValueError(f"{name}[{l}] must be (tokens, {c}), got {a.shape}")
            if a.shape[0] != t_new:
                raise ValueError(f"{name}[{l}] advances {a.shape[0]} tokens, expected {t_new}")
    for l in range(L):
        qcache.key_residual[l] = np.concatenate([qcache.key_residual[l], new_k[l]])
        qcache.value_residual[l] = np.concatenate([qcache.value_residual[l], new_v[l]])

    g, r = cfg.group_size, cfg.residual_length
    while qcache.residual_tokens >= r + g:
        for l in range(L):
            lc = qcache.layers[l]
            qcache.layers[l] = LayerCache(
                key=_extended_entry(lc.key, qcache.key_residual[l][:g], cfg),
                value=_extended_entry(lc.value, qcache.value_residual[l][:g], cfg),
            )
            qcache.key_residual[l] = qcache.key_residual[l][g:].copy()
            qcache.value_residual[l] = qcache.value_residual[l][g:].copy()
        qcache.packed_tokens += g
    return qcache


# -----------------------------------------------------------------------------
# serialization
# -----------------------------------------------------------------------------


def write_cache(cache: QuantizedKVCache, sink) -> int:
    """Serialize a cache; returns the byte count written."""
    cfg = cache.config
    written = sink.write(
        _CACHE_HEADER.pack(
            CACHE_MAGIC,
            CACHE_VERSION,
            cache.num_layers,
            cache.packed_tokens,
            cache.residual_tokens,
            cache.num_channels,
            cfg.kq,
            cfg.vq,
            cfg.km,
            cfg.vm,
            cfg.eta1,
            cfg.eta2,
            cfg.group_size,
            cfg.residual_length,
        )
    )
    for lc in cache.layers:
        for entry in (lc.key, lc.value):
            n = entry.zhat.shape[0]
            written += sink.write(struct.pack("<BI", 1 if entry.stores else 0, n))
            params = np.empty((n, 2), dtype="<f4")
            params[:, 0] = entry.zhat
            params[:, 1] = entry.shat
            written += sink.write(params.tobytes())
            if entry.stores:
                written += sink.write(pack_code_rows(entry.codes, entry.bit_width).tobytes())
    for l in range(cache.num_layers):
        for residual in (cache.key_residual[l], cache.value_residual[l]):
            written += sink.write(np.ascontiguousarray(residual, dtype="<f4").tobytes())
    return written


def _read_exact(source, count: int, what: str) -> bytes:
    raw = source.read(count)
    if len(raw) < count:
        raise CacheFormatError(f"truncated {what}: expected {count} bytes, got {len(raw)}")
    return raw


def read_cache(source) -> QuantizedKVCache:
    """Parse a serialized cache, validating structure against its header."""
    head = _read_exact(source, _CACHE_HEADER.size, "header")
    (magic, version, num_layers, t_packed, t_residual, num_channels,
     kq, vq, km, vm, eta1, eta2, g, r) = _CACHE_HEADER.unpack(head)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    try:
        cfg = XQuantConfig(kq, vq, km, vm, eta1, eta2, g, r)
        cfg.validate_for(num_layers, num_channels)
    except ConfigError as exc:
        raise CacheFormatError(f"bad config block: {exc}") from None
    if num_layers < 1 or num_channels < 1:
        raise CacheFormatError("layer and channel counts must be positive")
    if t_packed % g != 0:
        raise CacheFormatError(f"packed token count {t_packed} not a multiple of g={g}")

    key_count = (t_packed // g) * num_channels
    value_count = t_packed * (num_channels // g)
    layers = []
    for l in range(num_layers):
        entries = {}
        for side, q, m, mode, expected in (
            ("key", kq, km, GroupingMode.PER_CHANNEL, key_count),
            ("value", vq, vm, GroupingMode.PER_TOKEN, value_count),
        ):
            role, count = struct.unpack("<BI", _read_exact(source, 5, f"layer {l} {side} entry"))
            if role not in (0, 1):
                raise CacheFormatError(f"layer {l} {side}: role byte must be 0 or 1, got {role}")
            stores = stores_codes(l, m)
            if bool(role) != stores:
                raise CacheFormatError(
                    f"layer {l} {side}: role byte {role} contradicts the storage rule"
                )
            if count != expected:
                raise CacheFormatError(
                    f"layer {l} {side}: {count} groups, header implies {expected}"
                )
            params_raw = _read_exact(source, count * 8, f"layer {l} {side} params")
            params = np.frombuffer(params_raw, dtype="<f4").reshape(count, 2)
            bits = bits_for_layer(l, q)
            codes = None
            if stores:
                per_group = (g * bits + 7) // 8
                codes_raw = _read_exact(source, count * per_group, f"layer {l} {side} codes")
                packed = np.frombuffer(codes_raw, dtype=np.uint8).reshape(count, per_group)
                codes = unpack_code_rows(packed, bits, g)
            entries[side] = CacheEntry(
                stores=stores,
                bit_width=bits,
                mode=mode,
                zhat=params[:, 0].astype(np.float32),
                shat=params[:, 1].astype(np.float32),
                codes=codes,
            )
        layers.append(LayerCache(key=entries["key"], value=entries["value"]))

    key_residual = []
    value_residual = []
    res_bytes = t_residual * num_channels * 4
    for l in range(num_layers):
        for store in (key_residual, value_residual):
            raw = _read_exact(source, res_bytes, f"layer {l} residual")
            matrix = np.frombuffer(raw, dtype="<f4").reshape(t_residual, num_channels)
            if not np.isfinite(matrix).all():
                raise CacheFormatError(f"layer {l} residual contains non-finite values")
            store.append(matrix.astype(np.float32))
    return QuantizedKVCache(
        config=cfg,
        num_layers=num_layers,
        num_channels=num_channels,
        packed_tokens=t_packed,
        layers=layers,
        key_residual=key_residual,
        value_residual=value_residual,
    )
