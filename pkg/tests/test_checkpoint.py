import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from superscope.checkpoint import (
    CheckpointError,
    Report,
    hf_llama_name,
    load_checkpoint,
    load_safetensors,
    load_token_corpus,
    read_manifest,
    read_report,
    save_checkpoint,
    save_safetensors,
    spec_from_config,
    write_report,
)
from superscope.model import TapRecord

st_numpy = pytest.importorskip("safetensors.numpy")


def _raw(path, header, data):
    blob = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + data)


def test_single_tensor_roundtrip(tmp_path):
    p = tmp_path / "a.safetensors"
    st_numpy.save_file({"x": np.array([[1, 2], [3, 4]], np.float32)}, str(p))
    w = load_safetensors(p)
    assert list(w) == ["x"]
    np.testing.assert_array_equal(w["x"], [[1, 2], [3, 4]])
    assert w["x"].dtype == np.float32


def test_fp16_widening_is_exact(tmp_path):
    p = tmp_path / "h.safetensors"
    st_numpy.save_file({"h": np.array([1.5, -0.25, 65504.0], np.float16)}, str(p))
    np.testing.assert_array_equal(load_safetensors(p)["h"], np.float32([1.5, -0.25, 65504.0]))


def test_bf16_widening(tmp_path):
    vals = np.float32([1.0, -2.5, 3.140625, 1e30])
    top = (vals.view(np.uint32) >> 16).astype("<u2")
    p = tmp_path / "b.safetensors"
    _raw(p, {"b": {"dtype": "BF16", "shape": [4], "data_offsets": [0, 8]}}, top.tobytes())
    got = load_safetensors(p)["b"]
    np.testing.assert_array_equal(got, (top.astype(np.uint32) << 16).view(np.float32))
    np.testing.assert_array_equal(got[:3], vals[:3])


@pytest.mark.parametrize("case", ["truncated", "bad_json", "overlap", "out_of_range", "dtype", "size"])
def test_malformed_files(tmp_path, case):
    p = tmp_path / "m.safetensors"
    d8 = np.zeros(2, np.float32).tobytes()
    if case == "truncated":
        p.write_bytes(b"\x10\x00")
    elif case == "bad_json":
        p.write_bytes(struct.pack("<Q", 5) + b"{nope")
    elif case == "overlap":
        _raw(p, {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                 "b": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, d8)
    elif case == "out_of_range":
        _raw(p, {"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, d8)
    elif case == "dtype":
        _raw(p, {"a": {"dtype": "I64", "shape": [1], "data_offsets": [0, 8]}}, d8)
    else:
        _raw(p, {"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, d8)
    with pytest.raises(CheckpointError):
        read_manifest(p)


def test_header_length_past_eof(tmp_path):
    p = tmp_path / "t.safetensors"
    p.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(CheckpointError, match="exceeds"):
        read_manifest(p)


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.from_regex(r"[a-z]{1,6}(\.[a-z0-9]{1,4}){0,2}", fullmatch=True),
                       arrays(np.float32, st.lists(st.integers(0, 4), max_size=3).map(tuple),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       min_size=1, max_size=4))
def test_writer_reader_roundtrip(tmp_path_factory, tensors):
    d = tmp_path_factory.mktemp("rt")
    ours, theirs = d / "ours.safetensors", d / "theirs.safetensors"
    save_safetensors(ours, tensors)
    st_numpy.save_file({k: np.ascontiguousarray(v) for k, v in tensors.items()}, str(theirs))
    # the reference library reads our files and we read its files
    back = st_numpy.load_file(str(ours))
    for path in (ours, theirs):
        w = load_safetensors(path)
        assert set(w) == set(tensors)
        for k, v in tensors.items():
            np.testing.assert_array_equal(w[k], v)
            np.testing.assert_array_equal(back[k], v)


def test_hf_names_and_config(tmp_path, planted):
    assert hf_llama_name("model.layers.2.mlp.down_proj.weight") == "layers.2.mlp.down_proj.weight"
    assert hf_llama_name("model.layers.0.self_attn.q_proj.weight") == "layers.0.attn.q_proj.weight"
    assert hf_llama_name("model.layers.0.input_layernorm.weight") == "layers.0.attn_norm.gain"
    assert hf_llama_name("model.layers.0.self_attn.rotary_emb.inv_freq") is None
    spec = spec_from_config({"num_hidden_layers": 32, "hidden_size": 4096, "intermediate_size": 11008,
                             "num_attention_heads": 32, "vocab_size": 32000, "max_position_embeddings": 2048})
    assert (spec.n_layers, spec.d_model, spec.d_hidden, spec.vocab) == (32, 4096, 11008, 32000)


def test_checkpoint_dir_roundtrip(tmp_path, planted):
    spec, w = planted
    save_checkpoint(tmp_path, spec, w, extra={"toy_seed": 0})
    spec2, w2, raw = load_checkpoint(tmp_path)
    assert spec2 == spec and raw["toy_seed"] == 0
    assert w2.equals(w)


def test_tied_embeddings(tmp_path, planted):
    spec, w = planted
    tensors = {k: v for k, v in w.items() if k != "lm_head.weight"}
    save_safetensors(tmp_path / "model.safetensors", tensors)
    cfg = spec.to_dict()
    cfg["tie_word_embeddings"] = True
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    _, w2, _ = load_checkpoint(tmp_path)
    np.testing.assert_array_equal(w2["lm_head.weight"], w["embed.weight"])


def test_missing_tensor_is_reported(tmp_path, planted):
    spec, w = planted
    save_safetensors(tmp_path / "model.safetensors", {k: v for k, v in w.items() if "layers.3.mlp.up" not in k})
    (tmp_path / "config.json").write_text(json.dumps(spec.to_dict()))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_token_corpus(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("1 2 3\n4 5")
    assert load_token_corpus(p).sequences == [[1, 2, 3], [4, 5]]
    p.write_text("")
    c = load_token_corpus(p)
    assert c.sequences == [] and c.vocab == 0
    b = tmp_path / "c.bin"
    np.array([7, 8, 9], "<i4").tofile(b)
    assert load_token_corpus(b, binary=True).sequences == [[7, 8, 9]]
    p.write_text("1 x")
    with pytest.raises(CheckpointError):
        load_token_corpus(p)
    p.write_text("1 99")
    with pytest.raises(CheckpointError):
        load_token_corpus(p, vocab=64)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_trace_report_roundtrip(tmp_path, fmt):
    recs = [TapRecord(0, "down_proj_out", 3, 5, 0.1), TapRecord(1, "post_block", 2, 5, -24.449241638183594)]
    rep = Report.of("trace-report.v1", recs)
    path = tmp_path / f"r.{fmt}"
    write_report(rep, path, fmt)
    back = read_report(path)
    assert back.schema == "trace-report.v1"
    assert [TapRecord(**r) for r in back.records] == recs


def test_superweights_schema(tmp_path):
    rep = Report.of("superweights.v1", [{"layer": 2, "module": "mlp.down_proj", "row": 3968,
                                         "col": 7003, "value": -1.5}], partial=False)
    write_report(rep, tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["schema"] == "superweights.v1" and doc["partial"] is False
    assert doc["records"][0] == {"layer": 2, "module": "mlp.down_proj", "row": 3968, "col": 7003, "value": -1.5}
    with pytest.raises(ValueError):
        Report.of("nope.v1", [])
