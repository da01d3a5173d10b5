"""Command-line front end: kv-capture --model ID --prompt "..." out.xqkv

Exit codes: 0 success, 1 usage errors, 2 capture failures (model load,
inference, bad prompt file).
"""

from __future__ import annotations

import argparse
import sys

from kvcapture.capture import CaptureError, CaptureSpec, capture


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_layer_range(raw: str) -> tuple[int, int]:
    try:
        start_text, stop_text = raw.split(":", 1)
        return int(start_text), int(stop_text)
    except ValueError:
        raise _UsageError(f"--layers expects START:STOP, got {raw!r}") from None


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="kv-capture",
        description="Run a causal LM over a prompt and write its KV cache as an XQKV dump.",
    )
    parser.add_argument("--model", required=True, help="model identifier or local path")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--prompt", help="prompt text")
    source.add_argument("--prompt-file", help="file containing the prompt")
    parser.add_argument("--max-tokens", type=int, default=512, help="token cap (default 512)")
    parser.add_argument(
        "--layers", default=None, help="half-open layer slice START:STOP (default: all layers)"
    )
    parser.add_argument("output", help="output .xqkv path")
    return parser


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        layer_range = _parse_layer_range(args.layers) if args.layers is not None else None
        spec = CaptureSpec(
            model=args.model,
            output=args.output,
            prompt=args.prompt,
            prompt_file=args.prompt_file,
            max_tokens=args.max_tokens,
            layer_range=layer_range,
        )
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CaptureError as exc:
        # spec-level validation problems are usage problems
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        result = capture(spec)
    except CaptureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {result.output}: layers={result.num_layers} tokens={result.num_tokens} "
        f"channels={result.num_channels} (sidecar {result.sidecar})"
    )
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
