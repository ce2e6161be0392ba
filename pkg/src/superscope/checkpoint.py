"""Checkpoint, corpus and report I/O.

safetensors layout: 8-byte little-endian header length N, N bytes of JSON
header ``{name: {"dtype", "shape", "data_offsets": [begin, end]}, ...}``
(offsets relative to the end of the header), then the raw tensor bytes.
Only F32, F16 and BF16 are accepted.  F16 widens to fp32 exactly; BF16 is
widened by shifting its 16 bits into the high half of an fp32 word, which
is also exact.

Report schemas written by :func:`write_report`:

* ``superweights.v1``: records ``{layer, module, row, col, value}``
* ``trace-report.v1``: records ``{layer, site, token, channel, value}``
* ``quant-eval.v1``:  records ``{scheme, block, bits, ppl, mse}``
* ``stopword-shift.v1``: records ``{token, before, after, ratio}``
* ``sensitivity.v1``: records ``{factor, quality}``
"""

from __future__ import annotations

import csv
import json
import re
import struct
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .model import ModelSpec, TapRecord, WeightStore
from .tensor import FP32

DTYPES = {"F32": 4, "F16": 2, "BF16": 2}


class CheckpointError(ValueError):
    pass


@dataclass
class TensorEntry:
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int


@dataclass
class CheckpointManifest:
    path: Path
    tensors: dict[str, TensorEntry]
    data_start: int
    config: ModelSpec | None = None
    metadata: dict = field(default_factory=dict)


def read_manifest(path) -> CheckpointManifest:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise CheckpointError(f"{path}: truncated header length")
        (n,) = struct.unpack("<Q", head)
        if n > size - 8:
            raise CheckpointError(f"{path}: header length {n} exceeds file size")
        blob = f.read(n)
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header JSON ({e})") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    data_start = 8 + n
    data_len = size - data_start
    meta = header.pop("__metadata__", {}) or {}
    tensors = {}
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed entry for {name!r}") from None
        if dtype not in DTYPES:
            raise CheckpointError(f"{path}: {name} has unsupported dtype {dtype}")
        if not 0 <= begin <= end or end > data_len:
            raise CheckpointError(f"{path}: {name} byte span [{begin}, {end}) outside data of length {data_len}")
        if end - begin != DTYPES[dtype] * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: {name} byte span does not match shape {shape}")
        tensors[name] = TensorEntry(dtype, shape, begin, end)
    spans = sorted((e.begin, e.end, n) for n, e in tensors.items() if e.end > e.begin)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise CheckpointError(f"{path}: tensors {n0} and {n1} overlap")
    return CheckpointManifest(path, tensors, data_start, metadata=meta)


def _decode(buf: bytes, entry: TensorEntry) -> np.ndarray:
    if entry.dtype == "F32":
        a = np.frombuffer(buf, dtype="<f4")
    elif entry.dtype == "F16":
        a = np.frombuffer(buf, dtype="<f2").astype(FP32)
    else:
        bits = np.frombuffer(buf, dtype="<u2").astype(np.uint32) << 16
        a = bits.view(FP32)
    return a.astype(FP32, copy=False).reshape(entry.shape)


NameMap = Mapping[str, str] | Callable[[str], str | None] | None


def _rename(name: str, name_map: NameMap) -> str | None:
    if name_map is None:
        return name
    if callable(name_map):
        return name_map(name)
    return name_map.get(name)


def load_safetensors(path, name_map: NameMap = None, spec: ModelSpec | None = None) -> WeightStore:
    """Read tensors, rename them to canonical names and upcast to fp32.

    ``name_map`` is a dict or a callable (returning None drops the tensor).
    With ``spec`` the result is checked for missing tensors and shapes.
    """
    man = read_manifest(path)
    out = {}
    with open(man.path, "rb") as f:
        for name, entry in man.tensors.items():
            new = _rename(name, name_map)
            if new is None:
                continue
            f.seek(man.data_start + entry.begin)
            out[new] = _decode(f.read(entry.end - entry.begin), entry)
    store = WeightStore(out)
    if spec is not None:
        _check(store, spec)
    return store


def _check(store: WeightStore, spec: ModelSpec) -> None:
    try:
        store.validate(spec)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e.args[0]) if e.args else str(e)) from None


def save_safetensors(path, tensors: Mapping[str, np.ndarray], dtype: str = "F32",
                     metadata: Mapping[str, str] | None = None) -> None:
    """Write F32 or F16 tensors; used for round trips and derived checkpoints."""
    np_dtype = {"F32": "<f4", "F16": "<f2"}[dtype]
    header, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        b = np.ascontiguousarray(tensors[name], dtype=np_dtype).tobytes()
        header[name] = {"dtype": dtype, "shape": list(np.shape(tensors[name])), "data_offsets": [offset, offset + len(b)]}
        chunks.append(b)
        offset += len(b)
    if metadata:
        header["__metadata__"] = dict(metadata)
    blob = json.dumps(header, separators=(",", ":")).encode()
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)


# ------------------------------------------------------------ HF mapping

_HF_PATTERNS = [
    (r"model\.embed_tokens\.weight", "embed.weight"),
    (r"model\.norm\.weight", "final_norm.gain"),
    (r"lm_head\.weight", "lm_head.weight"),
    (r"model\.layers\.(\d+)\.self_attn\.(q|k|v|o)_proj\.weight", r"layers.\1.attn.\2_proj.weight"),
    (r"model\.layers\.(\d+)\.mlp\.(gate|up|down)_proj\.weight", r"layers.\1.mlp.\2_proj.weight"),
    (r"model\.layers\.(\d+)\.input_layernorm\.weight", r"layers.\1.attn_norm.gain"),
    (r"model\.layers\.(\d+)\.post_attention_layernorm\.weight", r"layers.\1.mlp_norm.gain"),
]


def hf_llama_name(name: str) -> str | None:
    """Map Llama/Mistral-style Hugging Face tensor names to canonical names."""
    for pat, repl in _HF_PATTERNS:
        if re.fullmatch(pat, name):
            return re.sub(pat, repl, name)
    if re.fullmatch(r"layers\.\d+\..*|embed\.weight|final_norm\.gain|lm_head\.weight", name):
        return name
    return None


_HF_CONFIG = {
    "num_hidden_layers": "n_layers",
    "hidden_size": "d_model",
    "intermediate_size": "d_hidden",
    "num_attention_heads": "n_heads",
    "num_key_value_heads": "n_kv_heads",
    "vocab_size": "vocab",
    "max_position_embeddings": "max_seq",
    "rms_norm_eps": "norm_eps",
    "rope_theta": "rope_theta",
}


def spec_from_config(cfg: Mapping) -> ModelSpec:
    """ModelSpec from config.json; native field names win over HF aliases."""
    d = {}
    for hf, ours in _HF_CONFIG.items():
        if hf in cfg and cfg[hf] is not None:
            d[ours] = cfg[hf]
    act = cfg.get("hidden_act") or cfg.get("hidden_activation")
    if act and "gelu" in str(act):
        d["mlp_kind"] = "geglu"
    names = {f.name for f in fields(ModelSpec)}
    d.update({k: v for k, v in cfg.items() if k in names})
    try:
        return ModelSpec(**d)
    except TypeError as e:
        raise CheckpointError(f"config is missing fields: {e}") from None


def read_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read config {path}: {e}") from None


def load_checkpoint(directory, name_map: NameMap = hf_llama_name) -> tuple[ModelSpec, WeightStore, dict]:
    """Load config.json and every *.safetensors file in ``directory``."""
    directory = Path(directory)
    cfg = read_config(directory / "config.json")
    spec = spec_from_config(cfg)
    files = sorted(directory.glob("*.safetensors"))
    if not files:
        raise CheckpointError(f"no .safetensors files in {directory}")
    merged: dict[str, np.ndarray] = {}
    for fpath in files:
        merged.update(load_safetensors(fpath, name_map))
    if "lm_head.weight" not in merged and cfg.get("tie_word_embeddings") and "embed.weight" in merged:
        merged["lm_head.weight"] = merged["embed.weight"]
    store = WeightStore(merged)
    _check(store, spec)
    return spec, store, cfg


def save_checkpoint(directory, spec: ModelSpec, weights: WeightStore, extra: Mapping | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = spec.to_dict()
    cfg.update(extra or {})
    (directory / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    save_safetensors(directory / "model.safetensors", dict(weights))


# ----------------------------------------------------------------- corpora

@dataclass
class TokenCorpus:
    sequences: list[list[int]]
    vocab: int


def load_token_corpus(path, binary: bool = False, vocab: int | None = None) -> TokenCorpus:
    """Newline-delimited whitespace-separated ids, or one little-endian int32 stream."""
    path = Path(path)
    if binary:
        data = np.fromfile(path, dtype="<i4")
        seqs = [data.tolist()] if data.size else []
    else:
        seqs = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                seqs.append([int(tok) for tok in line.split()])
            except ValueError:
                raise CheckpointError(f"{path}:{lineno}: non-integer token") from None
    flat = [t for s in seqs for t in s]
    if any(t < 0 for t in flat):
        raise CheckpointError(f"{path}: negative token id")
    if vocab is None:
        vocab = max(flat) + 1 if flat else 0
    elif flat and max(flat) >= vocab:
        raise CheckpointError(f"{path}: token id {max(flat)} >= vocab {vocab}")
    return TokenCorpus(seqs, vocab)


# ----------------------------------------------------------------- reports

SCHEMAS = {
    "superweights.v1": ("layer", "module", "row", "col", "value"),
    "trace-report.v1": ("layer", "site", "token", "channel", "value"),
    "quant-eval.v1": ("scheme", "block", "bits", "ppl", "mse"),
    "stopword-shift.v1": ("token", "before", "after", "ratio"),
    "sensitivity.v1": ("factor", "quality"),
}
_INT_FIELDS = {"layer", "row", "col", "token", "channel", "bits"}
_STR_FIELDS = {"module", "site", "scheme", "block"}


@dataclass
class Report:
    schema: str
    records: list[dict]
    meta: dict = field(default_factory=dict)

    @classmethod
    def of(cls, schema: str, records, **meta) -> Report:
        if schema not in SCHEMAS:
            raise ValueError(f"unknown report schema {schema!r}")
        rows = []
        for r in records:
            d = asdict(r) if is_dataclass(r) else dict(r)
            rows.append({k: _plain(d[k]) for k in SCHEMAS[schema]})
        return cls(schema, rows, {k: _plain(v) for k, v in meta.items()})


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def report_json(report: Report) -> str:
    doc = {"schema": report.schema, **report.meta, "records": report.records}
    return json.dumps(doc, indent=1) + "\n"


def write_report(report: Report, path, format: str = "json") -> None:
    path = Path(path)
    if format == "json":
        path.write_text(report_json(report))
    elif format == "csv":
        cols = SCHEMAS[report.schema]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in report.records:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    else:
        raise ValueError(f"unknown report format {format!r}")


def _coerce(col: str, text: str):
    if col in _STR_FIELDS:
        return text
    if col in _INT_FIELDS:
        return int(text)
    return float(text)


def read_report(path) -> Report:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        schema = next((s for s, cols in SCHEMAS.items() if tuple(header) == cols), None)
        if schema is None:
            raise ValueError(f"{path}: unrecognised report columns {header}")
        return Report(schema, [{c: _coerce(c, v) for c, v in zip(header, row)} for row in body])
    doc = json.loads(path.read_text())
    schema = doc.pop("schema")
    records = doc.pop("records")
    return Report(schema, records, doc)


def tap_records(report: Report) -> list[TapRecord]:
    return [TapRecord(**r) for r in report.records]
