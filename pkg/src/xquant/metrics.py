"""Error and storage accounting for quantized caches.

Three families of numbers live here: reconstruction MSE (measured),
the closed-form expected 1-bit MSE on uniform data (analytic), and the
equivalent bit-width of a config (storage model counting only packed
code bits, not params or residual).
"""

import dataclasses

import numpy as np

from .crosslayer import DeltaHistogram, delta_histogram
from .pipeline import (
    ConfigError,
    XQuantConfig,
    bits_for_layer,
    dequantize_cache,
    quantize_cache,
    stores_codes,
)
from .quant import GroupingMode, quantize_matrix
from .tensor_io import TensorDump

__all__ = [
    "BitwidthReport",
    "LayerPairDeltas",
    "MseReport",
    "equivalent_bitwidth",
    "expected_mse_uniform",
    "layer_similarity_report",
    "mse",
    "sweep_eta",
]


@dataclasses.dataclass(frozen=True)
class MseReport:
    """Squared-error summary; overall is weighted by element count."""

    key_mse: np.ndarray  # per layer; single cell for bare matrix input
    value_mse: np.ndarray
    overall: float
    group_count: int  # aggregated (layer, side) cells
    element_count: int


@dataclasses.dataclass(frozen=True)
class BitwidthReport:
    """Stored code bits per cache element, averaged over layers."""

    b_key: float
    b_value: float
    b_avg: float


@dataclasses.dataclass(frozen=True)
class LayerPairDeltas:
    """Code-difference histograms between adjacent layers l and l+1.

    The collapsed curves re-bin 2-bit codes to 1 bit ({0,1} -> 0,
    {2,3} -> 1) before differencing; None for 1-bit input.
    """

    layer_a: int
    layer_b: int
    key: DeltaHistogram
    value: DeltaHistogram
    key_collapsed: DeltaHistogram | None
    value_collapsed: DeltaHistogram | None


def _cell_error(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sum(diff * diff)), diff.size


def mse(a, b) -> MseReport:
    """Mean squared difference of two dumps or two equal-shape matrices."""
    if isinstance(a, TensorDump) != isinstance(b, TensorDump):
        raise ValueError("cannot compare a dump with a bare matrix")
    if isinstance(a, TensorDump):
        if (a.num_layers, a.num_tokens, a.num_channels) != (
            b.num_layers,
            b.num_tokens,
            b.num_channels,
        ):
            raise ValueError(
                f"dump shapes differ: {(a.num_layers, a.num_tokens, a.num_channels)} "
                f"vs {(b.num_layers, b.num_tokens, b.num_channels)}"
            )
        key_mse = np.empty(a.num_layers)
        value_mse = np.empty(a.num_layers)
        total = 0.0
        count = 0
        for l, (la, lb) in enumerate(zip(a.layers, b.layers)):
            k_sum, k_n = _cell_error(la.key_matrix, lb.key_matrix)
            v_sum, v_n = _cell_error(la.value_matrix, lb.value_matrix)
            key_mse[l] = k_sum / k_n
            value_mse[l] = v_sum / v_n
            total += k_sum + v_sum
            count += k_n + v_n
        return MseReport(key_mse, value_mse, total / count, 2 * a.num_layers, count)
    arr_a = np.asarray(a)
    arr_b = np.asarray(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shapes differ: {arr_a.shape} vs {arr_b.shape}")
    total, count = _cell_error(arr_a, arr_b)
    value = total / count
    return MseReport(np.array([value]), np.zeros(0), value, 1, count)


def expected_mse_uniform(eta: float) -> float:
    """Expected 1-bit reconstruction MSE on U(0,1): eta^2 - eta/2 + 1/12.

    Minimized at eta = 1/4; the endpoints 0 and 1/2 both give 1/12.
    """
    eta = float(eta)
    if not 0.0 <= eta <= 0.5:
        raise ValueError(f"eta must lie in [0, 0.5], got {eta}")
    return eta * eta - 0.5 * eta + 1.0 / 12.0


def equivalent_bitwidth(cfg: XQuantConfig, num_layers: int) -> BitwidthReport:
    """Average stored code bits per element under the store/share rules.

    Subordinate layers contribute zero (their codes live in the neighbor);
    params and the residual window are metadata and not counted.
    """
    if num_layers < 1:
        raise ConfigError(f"need at least one layer, got {num_layers}")
    for name in ("kq", "vq", "km", "vm"):
        if getattr(cfg, name) > num_layers:
            raise ConfigError(f"{name}={getattr(cfg, name)} exceeds the layer count {num_layers}")
    key_bits = sum(
        bits_for_layer(l, cfg.kq) for l in range(num_layers) if stores_codes(l, cfg.km)
    )
    value_bits = sum(
        bits_for_layer(l, cfg.vq) for l in range(num_layers) if stores_codes(l, cfg.vm)
    )
    b_key = key_bits / num_layers
    b_value = value_bits / num_layers
    return BitwidthReport(b_key, b_value, (b_key + b_value) / 2.0)


def sweep_eta(dump: TensorDump, cfg: XQuantConfig, eta1_grid, eta2_grid):
    """Pipeline MSE over a calibration grid.

    Returns (eta1, eta2, overall_mse) rows, eta1-major, with the etas as
    actually applied (float32-normalized by the config).
    """
    rows = []
    for e1 in eta1_grid:
        for e2 in eta2_grid:
            point = dataclasses.replace(cfg, eta1=e1, eta2=e2)
            recon = dequantize_cache(quantize_cache(dump, point))
            rows.append((point.eta1, point.eta2, mse(dump, recon).overall))
    return rows


def _layer_codes(dump: TensorDump, bit_width: int, mode: GroupingMode, g: int):
    if mode is GroupingMode.PER_CHANNEL:
        t_use = (dump.num_tokens // g) * g
        c_use = dump.num_channels
    else:
        t_use = dump.num_tokens
        c_use = (dump.num_channels // g) * g
    if t_use == 0 or c_use == 0:
        raise ValueError(
            f"dump too small for group size {g} with {mode.value} grouping"
        )
    keys = []
    values = []
    for layer in dump.layers:
        keys.append(
            quantize_matrix(layer.key_matrix[:t_use, :c_use], mode, g, bit_width, 0.0).codes()
        )
        values.append(
            quantize_matrix(layer.value_matrix[:t_use, :c_use], mode, g, bit_width, 0.0).codes()
        )
    return keys, values


def layer_similarity_report(
    dump: TensorDump, bit_width: int, mode: GroupingMode, group_size: int
) -> list[LayerPairDeltas]:
    """Adjacent-layer code-difference histograms.

    Every layer is quantized independently (eta = 0) with the same mode
    and group size on both cache sides; trailing tokens or channels that
    do not fill a group are dropped. Heavy mass at small deltas is the
    signal that cross-layer code sharing will be cheap.
    """
    keys, values = _layer_codes(dump, bit_width, mode, group_size)
    pairs = []
    for l in range(dump.num_layers - 1):
        key_hist = delta_histogram(keys[l], keys[l + 1], bit_width)
        value_hist = delta_histogram(values[l], values[l + 1], bit_width)
        key_collapsed = None
        value_collapsed = None
        if bit_width == 2:
            key_collapsed = delta_histogram(keys[l] >> 1, keys[l + 1] >> 1, 1)
            value_collapsed = delta_histogram(values[l] >> 1, values[l + 1] >> 1, 1)
        pairs.append(
            LayerPairDeltas(l, l + 1, key_hist, value_hist, key_collapsed, value_collapsed)
        )
    return pairs
