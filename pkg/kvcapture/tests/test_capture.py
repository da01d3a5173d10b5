"""End-to-end capture tests on a tiny locally constructed causal LM."""

import hashlib
import importlib
import os

import numpy as np
import pytest

torch = pytest.importorskip("torch")
transformers = pytest.importorskip("transformers")

from kvcapture.capture import CaptureError, CaptureSpec, capture
from kvcapture.cli import run as cli_run
from kvcapture.xqkv import DumpError, DumpFormatError, read_dump, write_dump

HIDDEN = 32
HEADS = 2
HEAD_DIM = HIDDEN // HEADS


class ByteTokenizer:
    """Minimal stand-in: one token per UTF-8 byte, honors truncation."""

    def __call__(self, text, return_tensors=None, truncation=False, max_length=None):
        ids = list(text.encode("utf-8"))
        if truncation and max_length is not None:
            ids = ids[:max_length]
        assert return_tensors == "pt"
        return {"input_ids": torch.tensor([ids], dtype=torch.long)}


@pytest.fixture(scope="module")
def tiny_model():
    config = transformers.LlamaConfig(
        vocab_size=256,
        hidden_size=HIDDEN,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=HEADS,
        num_key_value_heads=HEADS,
        max_position_embeddings=128,
    )
    torch.manual_seed(1234)
    return transformers.LlamaForCausalLM(config).eval()


@pytest.fixture()
def tok():
    return ByteTokenizer()


def make_spec(tmp_path, **overrides):
    base = dict(
        model="tiny-test-model",
        output=str(tmp_path / "capture.xqkv"),
        prompt="abcd",
        max_tokens=512,
    )
    base.update(overrides)
    return CaptureSpec(**base)


class TestSpecValidation:
    def test_requires_exactly_one_prompt_source(self, tmp_path):
        with pytest.raises(CaptureError):
            make_spec(tmp_path, prompt=None)
        with pytest.raises(CaptureError):
            make_spec(tmp_path, prompt="x", prompt_file="y")

    def test_rejects_bad_token_cap_and_range(self, tmp_path):
        with pytest.raises(CaptureError):
            make_spec(tmp_path, max_tokens=0)
        with pytest.raises(CaptureError):
            make_spec(tmp_path, layer_range=(1, 1))
        with pytest.raises(CaptureError):
            make_spec(tmp_path, layer_range=(-1, 2))

    def test_rejects_empty_identifiers(self, tmp_path):
        with pytest.raises(CaptureError):
            make_spec(tmp_path, model="")
        with pytest.raises(CaptureError):
            make_spec(tmp_path, output="")


class TestCapture:
    def test_toy_model_four_token_prompt(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path)
        result = capture(spec, model=tiny_model, tokenizer=tok)
        assert result.num_layers == 2
        assert result.num_tokens == 4
        assert result.num_channels == HIDDEN
        keys, values = read_dump(spec.output)
        assert len(keys) == len(values) == 2
        assert keys[0].shape == (4, HIDDEN)
        assert keys[0].dtype == np.float32
        assert os.path.getsize(spec.output) == 24 + 8 * 2 * 4 * HIDDEN

    def test_deterministic_repeat(self, tmp_path, tiny_model, tok):
        first = make_spec(tmp_path, output=str(tmp_path / "a.xqkv"))
        second = make_spec(tmp_path, output=str(tmp_path / "b.xqkv"))
        capture(first, model=tiny_model, tokenizer=tok)
        capture(second, model=tiny_model, tokenizer=tok)
        assert (tmp_path / "a.xqkv").read_bytes() == (tmp_path / "b.xqkv").read_bytes()
        meta_a = (tmp_path / "a.xqkv.meta.txt").read_text().replace("a.xqkv", "")
        meta_b = (tmp_path / "b.xqkv.meta.txt").read_text().replace("b.xqkv", "")
        assert meta_a == meta_b

    def test_head_major_channel_order(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path)
        capture(spec, model=tiny_model, tokenizer=tok)
        keys, values = read_dump(spec.output)
        ids = tok("abcd", return_tensors="pt")["input_ids"]
        with torch.no_grad():
            past = tiny_model(input_ids=ids, use_cache=True).past_key_values
        for layer_index in range(2):
            layer = past.layers[layer_index]
            for side, got in (("k", keys[layer_index]), ("v", values[layer_index])):
                raw = (layer.keys if side == "k" else layer.values)[0]
                for head in range(HEADS):
                    block = got[:, head * HEAD_DIM : (head + 1) * HEAD_DIM]
                    assert np.array_equal(block, raw[head].numpy())

    def test_layer_range_selects_slice(self, tmp_path, tiny_model, tok):
        full = make_spec(tmp_path, output=str(tmp_path / "full.xqkv"))
        part = make_spec(tmp_path, output=str(tmp_path / "part.xqkv"), layer_range=(1, 2))
        capture(full, model=tiny_model, tokenizer=tok)
        result = capture(part, model=tiny_model, tokenizer=tok)
        assert result.num_layers == 1
        full_keys, full_values = read_dump(full.output)
        part_keys, part_values = read_dump(part.output)
        assert np.array_equal(part_keys[0], full_keys[1])
        assert np.array_equal(part_values[0], full_values[1])

    def test_layer_range_beyond_depth(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path, layer_range=(0, 3))
        with pytest.raises(CaptureError, match="depth"):
            capture(spec, model=tiny_model, tokenizer=tok)
        assert not os.path.exists(spec.output)

    def test_max_tokens_truncates(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path, prompt="abcdefgh", max_tokens=3)
        result = capture(spec, model=tiny_model, tokenizer=tok)
        assert result.num_tokens == 3

    def test_prompt_file_source(self, tmp_path, tiny_model, tok):
        prompt_path = tmp_path / "prompt.txt"
        prompt_path.write_text("hello world")
        spec = make_spec(tmp_path, prompt=None, prompt_file=str(prompt_path))
        result = capture(spec, model=tiny_model, tokenizer=tok)
        assert result.num_tokens == len("hello world")
        assert result.prompt_sha256 == hashlib.sha256(b"hello world").hexdigest()

    def test_missing_prompt_file(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path, prompt=None, prompt_file=str(tmp_path / "absent.txt"))
        with pytest.raises(CaptureError, match="prompt file"):
            capture(spec, model=tiny_model, tokenizer=tok)
        assert not os.path.exists(spec.output)

    def test_empty_prompt(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path, prompt="")
        with pytest.raises(CaptureError, match="empty"):
            capture(spec, model=tiny_model, tokenizer=tok)
        assert not os.path.exists(spec.output)

    def test_nan_output_never_writes(self, tmp_path, tok):
        config = transformers.LlamaConfig(
            vocab_size=256,
            hidden_size=HIDDEN,
            intermediate_size=64,
            num_hidden_layers=2,
            num_attention_heads=HEADS,
            num_key_value_heads=HEADS,
            max_position_embeddings=128,
        )
        torch.manual_seed(1234)
        broken = transformers.LlamaForCausalLM(config).eval()
        with torch.no_grad():
            broken.model.layers[0].self_attn.k_proj.weight[0, 0] = float("nan")
        spec = make_spec(tmp_path)
        with pytest.raises(CaptureError, match="non-finite"):
            capture(spec, model=broken, tokenizer=tok)
        assert not os.path.exists(spec.output)
        assert list(tmp_path.glob(".xqkv-*")) == []  # no temp litter either

    def test_sidecar_contents(self, tmp_path, tiny_model, tok):
        spec = make_spec(tmp_path)
        result = capture(spec, model=tiny_model, tokenizer=tok)
        text = open(result.sidecar, encoding="utf-8").read()
        assert "model: tiny-test-model" in text
        assert f"prompt_sha256: {hashlib.sha256(b'abcd').hexdigest()}" in text
        assert "tokens: 4" in text
        assert "layers: 2 of 2" in text
        assert "channels: 32" in text


class TestDumpContainer:
    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        keys = [rng.standard_normal((6, 8)).astype(np.float32) for _ in range(3)]
        values = [rng.standard_normal((6, 8)).astype(np.float32) for _ in range(3)]
        path = str(tmp_path / "rt.xqkv")
        written = write_dump(path, keys, values)
        assert written == os.path.getsize(path) == 24 + 8 * 3 * 6 * 8
        back_keys, back_values = read_dump(path)
        for a, b in zip(keys + values, back_keys + back_values):
            assert a.tobytes() == b.tobytes()

    def test_rejects_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "bad.xqkv"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DumpFormatError, match="magic"):
            read_dump(str(path))
        keys = [np.zeros((2, 2), dtype=np.float32)]
        good = str(tmp_path / "good.xqkv")
        write_dump(good, keys, keys)
        data = open(good, "rb").read()
        clipped = tmp_path / "clipped.xqkv"
        clipped.write_bytes(data[:-5])
        with pytest.raises(DumpFormatError, match="truncated"):
            read_dump(str(clipped))

    def test_write_validates_input(self, tmp_path):
        path = str(tmp_path / "never.xqkv")
        good = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(DumpError, match="float32"):
            write_dump(path, [good.astype(np.float64)], [good])
        bad = good.copy()
        bad[0, 0] = np.inf
        with pytest.raises(DumpError, match="non-finite"):
            write_dump(path, [bad], [good])
        assert not os.path.exists(path)


class TestCli:
    def test_missing_required_flags(self, capsys):
        assert cli_run([]) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_layer_range_syntax(self, tmp_path, capsys):
        code = cli_run(
            ["--model", "m", "--prompt", "abcd", "--layers", "nope", str(tmp_path / "o.xqkv")]
        )
        assert code == 1
        assert "START:STOP" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert cli_run(["--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--model", "--prompt", "--prompt-file", "--max-tokens", "--layers"):
            assert flag in out

    def test_happy_path_with_injected_loader(self, tmp_path, tiny_model, tok, monkeypatch, capsys):
        # the package re-exports capture() under the submodule's name, so
        # resolve the real module before patching its loader
        capture_module = importlib.import_module("kvcapture.capture")
        monkeypatch.setattr(capture_module, "_load", lambda spec: (tiny_model, tok))
        out_path = str(tmp_path / "cli.xqkv")
        code = cli_run(["--model", "tiny-test-model", "--prompt", "abcd", out_path])
        assert code == 0
        assert "layers=2 tokens=4 channels=32" in capsys.readouterr().out
        keys, _ = read_dump(out_path)
        assert keys[0].shape == (4, HIDDEN)

    def test_unloadable_model_exits_two(self, tmp_path, capsys):
        code = cli_run(
            ["--model", str(tmp_path / "no-such-model"), "--prompt", "abcd",
             str(tmp_path / "o.xqkv")]
        )
        assert code == 2
        assert "error:" in capsys.readouterr().err
        assert not os.path.exists(tmp_path / "o.xqkv")


class TestPrimaryInterop:
    def test_dump_readable_by_compression_toolchain(self, tmp_path, tiny_model, tok):
        xquant_io = pytest.importorskip("xquant.tensor_io")
        spec = make_spec(tmp_path)
        capture(spec, model=tiny_model, tokenizer=tok)
        with open(spec.output, "rb") as fh:
            dump = xquant_io.read_dump(fh)
        assert dump.num_layers == 2
        assert dump.num_tokens == 4
        assert dump.num_channels == HIDDEN
        own_keys, _ = read_dump(spec.output)
        assert dump.layers[0].key_matrix.tobytes() == own_keys[0].tobytes()
