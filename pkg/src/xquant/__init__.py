"""Ultra-low-bit KV-cache compression toolkit.

Group-wise asymmetric 1/2-bit quantization with inward calibration,
cross-layer code sharing between adjacent layers, binary dump/cache formats,
and error/storage analysis tooling.
"""

from .crosslayer import (
    DeltaHistogram,
    GammaBoundaryError,
    GammaInterval,
    MergeWeights,
    classify_gamma,
    delta_histogram,
    dominant_share,
    merge_codes,
)
from .metrics import (
    BitwidthReport,
    MseReport,
    equivalent_bitwidth,
    expected_mse_uniform,
    layer_similarity_report,
    mse,
    sweep_eta,
)
from .pipeline import (
    CacheEntry,
    CacheFormatError,
    CacheStructureError,
    ConfigError,
    LayerCache,
    QuantizedKVCache,
    XQuantConfig,
    append_tokens,
    bits_for_layer,
    dequantize_cache,
    quantize_cache,
    read_cache,
    stores_codes,
    write_cache,
)
from .quant import (
    CalibratedParams,
    CodeBlock,
    GroupingMode,
    QuantizedTensor,
    QuantParams,
    calibrate,
    compute_params,
    dequantize_group,
    fake_quantize_map,
    pack_codes,
    pseudo_quantize,
    quantize_group,
    quantize_matrix,
    round_half_down,
    unpack_codes,
)
from .tensor_io import (
    DumpError,
    DumpFormatError,
    DumpLengthError,
    DumpValidationError,
    LayerTensor,
    SyntheticSpec,
    TensorDump,
    gen_synthetic,
    read_dump,
    write_dump,
)

__version__ = "0.1.0"
