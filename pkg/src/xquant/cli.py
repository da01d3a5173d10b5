"""Command-line surface.

Exit codes: 0 success, 1 usage error (bad flags or values), 2 data error
(missing or malformed input files). All report output is deterministic:
tab-separated rows with a header line, or a JSON document with --json.
"""

import argparse
import json
import sys

from .crosslayer import GammaBoundaryError, classify_gamma
from .metrics import equivalent_bitwidth, layer_similarity_report, mse, sweep_eta
from .pipeline import (
    CacheFormatError,
    CacheStructureError,
    ConfigError,
    XQuantConfig,
    dequantize_cache,
    quantize_cache,
    read_cache,
    write_cache,
)
from .quant import GroupingMode
from .tensor_io import DumpError, SyntheticSpec, gen_synthetic, read_dump, write_dump

__all__ = ["main", "run"]

_DEFAULTS = XQuantConfig()


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage problems; remap to 1
    def error(self, message):
        raise _UsageError(message)


def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--kq", type=int, default=_DEFAULTS.kq,
                        help=f"key layers below this use 2-bit codes (default {_DEFAULTS.kq})")
    parser.add_argument("--vq", type=int, default=_DEFAULTS.vq,
                        help=f"value layers below this use 2-bit codes (default {_DEFAULTS.vq})")
    parser.add_argument("--km", type=int, default=_DEFAULTS.km,
                        help=f"key layers from here share codes by parity (default {_DEFAULTS.km})")
    parser.add_argument("--vm", type=int, default=_DEFAULTS.vm,
                        help=f"value layers from here share codes by parity (default {_DEFAULTS.vm})")
    parser.add_argument("--eta1", type=float, default=_DEFAULTS.eta1,
                        help=f"1-bit calibration shift (default {_fmt(_DEFAULTS.eta1)})")
    parser.add_argument("--eta2", type=float, default=_DEFAULTS.eta2,
                        help=f"2-bit calibration shift (default {_fmt(_DEFAULTS.eta2)})")
    parser.add_argument("--group-size", type=int, default=_DEFAULTS.group_size,
                        help=f"elements per quantization group (default {_DEFAULTS.group_size})")
    parser.add_argument("--residual", type=int, default=_DEFAULTS.residual_length,
                        help=f"recent tokens kept in full precision (default {_DEFAULTS.residual_length})")


def _config_from(args) -> XQuantConfig:
    return XQuantConfig(
        kq=args.kq, vq=args.vq, km=args.km, vm=args.vm,
        eta1=args.eta1, eta2=args.eta2,
        group_size=args.group_size, residual_length=args.residual,
    )


def _read_dump_file(path: str):
    with open(path, "rb") as fh:
        return read_dump(fh)


def _grid(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise _UsageError(f"bad grid {text!r}: expected comma-separated numbers") from None


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# -----------------------------------------------------------------------------
# subcommand handlers
# -----------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    spec = SyntheticSpec(
        num_layers=args.layers,
        num_tokens=args.tokens,
        num_channels=args.channels,
        per_channel_scale_spread=args.scale_spread,
        outlier_channel_fraction=args.outlier_fraction,
        outlier_magnitude=args.outlier_magnitude,
        interlayer_correlation=args.correlation,
        seed=args.seed,
    )
    dump = gen_synthetic(spec)
    with open(args.out, "wb") as fh:
        written = write_dump(dump, fh)
    print(f"wrote {args.out}: layers={args.layers} tokens={args.tokens} "
          f"channels={args.channels} ({written} bytes)")
    return 0


def _cmd_quantize(args) -> int:
    cfg = _config_from(args)
    dump = _read_dump_file(args.dump)
    cache = quantize_cache(dump, cfg)
    with open(args.out, "wb") as fh:
        written = write_cache(cache, fh)
    report = equivalent_bitwidth(cfg, dump.num_layers)
    print(f"wrote {args.out}: packed={cache.packed_tokens} "
          f"residual={cache.residual_tokens} B_avg={_fmt(report.b_avg)} ({written} bytes)")
    return 0


def _cmd_dequantize(args) -> int:
    with open(args.cache, "rb") as fh:
        cache = read_cache(fh)
    dump = dequantize_cache(cache)
    with open(args.out, "wb") as fh:
        written = write_dump(dump, fh)
    print(f"wrote {args.out}: layers={dump.num_layers} tokens={dump.num_tokens} "
          f"channels={dump.num_channels} ({written} bytes)")
    return 0


def _cmd_simulate(args) -> int:
    cfg = _config_from(args)
    dump = _read_dump_file(args.dump)
    recon = dequantize_cache(quantize_cache(dump, cfg))
    err = mse(dump, recon)
    bits = equivalent_bitwidth(cfg, dump.num_layers)
    if args.json:
        _emit(
            {
                "layers": [
                    {"layer": l, "key_mse": float(err.key_mse[l]), "value_mse": float(err.value_mse[l])}
                    for l in range(dump.num_layers)
                ],
                "overall": err.overall,
                "b_key": bits.b_key,
                "b_value": bits.b_value,
                "b_avg": bits.b_avg,
            }
        )
        return 0
    print("layer\tkey_mse\tvalue_mse")
    for l in range(dump.num_layers):
        print(f"{l}\t{_fmt(err.key_mse[l])}\t{_fmt(err.value_mse[l])}")
    print(f"overall\t{_fmt(err.overall)}")
    print(f"B_key\t{_fmt(bits.b_key)}")
    print(f"B_value\t{_fmt(bits.b_value)}")
    print(f"B_avg\t{_fmt(bits.b_avg)}")
    return 0


def _cmd_bitwidth(args) -> int:
    cfg = _config_from(args)
    report = equivalent_bitwidth(cfg, args.layers)
    if args.json:
        _emit({"b_key": report.b_key, "b_value": report.b_value, "b_avg": report.b_avg})
        return 0
    print(f"B_key\t{_fmt(report.b_key)}")
    print(f"B_value\t{_fmt(report.b_value)}")
    print(f"B_avg\t{_fmt(report.b_avg)}")
    return 0


def _cmd_sweep_eta(args) -> int:
    cfg = _config_from(args)
    dump = _read_dump_file(args.dump)
    rows = sweep_eta(dump, cfg, _grid(args.eta1_grid), _grid(args.eta2_grid))
    if args.json:
        _emit({"rows": [{"eta1": e1, "eta2": e2, "mse": v} for e1, e2, v in rows]})
        return 0
    print("eta1\teta2\tmse")
    for e1, e2, value in rows:
        print(f"{_fmt(e1)}\t{_fmt(e2)}\t{_fmt(value)}")
    return 0


def _cmd_delta_hist(args) -> int:
    dump = _read_dump_file(args.dump)
    mode = GroupingMode(args.mode)
    pairs = layer_similarity_report(dump, args.bits, mode, args.group_size)
    if args.json:
        doc = {"pairs": []}
        for pair in pairs:
            entry = {
                "layers": [pair.layer_a, pair.layer_b],
                "key": pair.key.shares.tolist(),
                "value": pair.value.shares.tolist(),
            }
            if pair.key_collapsed is not None:
                entry["key_1bit"] = pair.key_collapsed.shares.tolist()
                entry["value_1bit"] = pair.value_collapsed.shares.tolist()
            doc["pairs"].append(entry)
        _emit(doc)
        return 0
    bins = 2**args.bits
    print("pair\tside\t" + "\t".join(f"d{d}" for d in range(bins)))
    for pair in pairs:
        label = f"{pair.layer_a}-{pair.layer_b}"
        for side, hist in (("key", pair.key), ("value", pair.value)):
            shares = "\t".join(_fmt(s) for s in hist.shares)
            print(f"{label}\t{side}\t{shares}")
    if args.bits == 2 and pairs:
        print("pair\tside\td0\td1")
        for pair in pairs:
            label = f"{pair.layer_a}-{pair.layer_b}"
            for side, hist in (("key_1bit", pair.key_collapsed),
                               ("value_1bit", pair.value_collapsed)):
                shares = "\t".join(_fmt(s) for s in hist.shares)
                print(f"{label}\t{side}\t{shares}")
    return 0


def _cmd_classify_gamma(args) -> int:
    interval = classify_gamma(args.gamma0)
    if args.json:
        _emit(
            {
                "interval": interval.label,
                "accelerated": interval.accelerated,
                "shared_layer": interval.shared_layer,
            }
        )
        return 0
    if interval.accelerated:
        print(f"{interval.label} accelerated: share layer {interval.shared_layer}")
    else:
        print(interval.label)
    return 0


# -----------------------------------------------------------------------------
# parser wiring
# -----------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="xquant", description="Low-bit KV-cache compression toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic dump file")
    p.add_argument("out", help="output dump path")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--scale-spread", type=float, default=0.0,
                   help="log-scale spread of per-channel magnitudes (default 0)")
    p.add_argument("--outlier-fraction", type=float, default=0.0,
                   help="fraction of channels boosted as outliers (default 0)")
    p.add_argument("--outlier-magnitude", type=float, default=1.0,
                   help="boost factor for outlier channels (default 1)")
    p.add_argument("--correlation", type=float, default=0.0,
                   help="interlayer correlation in [0,1] (default 0)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("quantize", help="compress a dump into a cache file")
    p.add_argument("dump", help="input dump path")
    p.add_argument("out", help="output cache path")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("dequantize", help="reconstruct a dump from a cache file")
    p.add_argument("cache", help="input cache path")
    p.add_argument("out", help="output dump path")
    p.set_defaults(func=_cmd_dequantize)

    p = sub.add_parser("simulate", help="quantize and reconstruct in memory, report errors")
    p.add_argument("dump", help="input dump path")
    _add_config_flags(p)
    p.add_argument("--json", action="store_true", help="emit a JSON document")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("bitwidth", help="report the equivalent bit-width of a config")
    _add_config_flags(p)
    p.add_argument("--layers", type=int, required=True, help="model layer count")
    p.add_argument("--json", action="store_true", help="emit a JSON document")
    p.set_defaults(func=_cmd_bitwidth)

    p = sub.add_parser("sweep-eta", help="pipeline MSE over a calibration grid")
    p.add_argument("dump", help="input dump path")
    p.add_argument("--eta1-grid", required=True, help="comma-separated eta1 values")
    p.add_argument("--eta2-grid", required=True, help="comma-separated eta2 values")
    _add_config_flags(p)
    p.add_argument("--json", action="store_true", help="emit a JSON document")
    p.set_defaults(func=_cmd_sweep_eta)

    p = sub.add_parser("delta-hist", help="adjacent-layer code difference histograms")
    p.add_argument("dump", help="input dump path")
    p.add_argument("--bits", type=int, choices=(1, 2), default=2)
    p.add_argument("--mode", choices=("per-channel", "per-token"), default="per-channel")
    p.add_argument("--group-size", type=int, default=_DEFAULTS.group_size)
    p.add_argument("--json", action="store_true", help="emit a JSON document")
    p.set_defaults(func=_cmd_delta_hist)

    p = sub.add_parser("classify-gamma", help="map a merge weight to its behavior interval")
    p.add_argument("gamma0", type=float, help="first-layer merge weight in [0,1]")
    p.add_argument("--json", action="store_true", help="emit a JSON document")
    p.set_defaults(func=_cmd_classify_gamma)

    return parser


def run(argv) -> int:
    """Execute one command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        print("usage error: a command is required", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DumpError, CacheFormatError, CacheStructureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (_UsageError, ValueError) as exc:
        # ConfigError, gamma boundaries, bad spec values
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
