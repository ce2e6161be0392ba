"""Decoder-only GLU transformer runtime with taps and interventions.

Weights use canonical names::

    embed.weight                      [vocab, d_model]
    layers.{i}.attn_norm.gain         [d_model]        (parametric norm only)
    layers.{i}.attn.q_proj.weight     [d_model, d_model]
    layers.{i}.attn.k_proj.weight     [n_kv_heads * head_dim, d_model]
    layers.{i}.attn.v_proj.weight     [n_kv_heads * head_dim, d_model]
    layers.{i}.attn.o_proj.weight     [d_model, d_model]
    layers.{i}.mlp_norm.gain          [d_model]        (parametric norm only)
    layers.{i}.mlp.gate_proj.weight   [d_hidden, d_model]
    layers.{i}.mlp.up_proj.weight     [d_hidden, d_model]
    layers.{i}.mlp.down_proj.weight   [d_model, d_hidden]
    final_norm.gain                   [d_model]        (parametric norm only)
    lm_head.weight                    [vocab, d_model]

Every projection is stored output-dim first, so element [row, col] of a
down_proj weight connects intermediate channel ``col`` to residual channel
``row``.

Rotary embedding uses the rotate-half layout (the first and second halves
of each head are paired), with inverse frequencies theta^(-2i/head_dim).
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import FP32

SITES = ("down_proj_in", "down_proj_out", "post_block", "logits")
ACTIVATION_SITES = ("down_proj_in", "down_proj_out")
PROJECTIONS = (
    "attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj",
    "mlp.gate_proj", "mlp.up_proj", "mlp.down_proj",
)

# act_hook(site, layer, x) -> x, called on every linear input and BMM operand
ActHook = Callable[[str, int, np.ndarray], np.ndarray]


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    d_model: int
    d_hidden: int
    n_heads: int
    vocab: int
    norm_kind: str = "parametric"
    mlp_kind: str = "swiglu"
    max_seq: int = 2048
    n_kv_heads: int | None = None
    norm_eps: float = 1e-6
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_hidden", "n_heads", "vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.norm_kind not in ("parametric", "non-parametric"):
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.mlp_kind not in ("swiglu", "geglu"):
            raise ValueError(f"unknown mlp_kind {self.mlp_kind!r}")
        if self.kv_heads < 1 or self.n_heads % self.kv_heads:
            raise ValueError("n_heads must be a multiple of n_kv_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embedding")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_heads(self) -> int:
        return self.n_kv_heads or self.n_heads

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        D, H, V = self.d_model, self.d_hidden, self.vocab
        kv = self.kv_heads * self.head_dim
        shapes = {"embed.weight": (V, D)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "attn.q_proj.weight"] = (D, D)
            shapes[p + "attn.k_proj.weight"] = (kv, D)
            shapes[p + "attn.v_proj.weight"] = (kv, D)
            shapes[p + "attn.o_proj.weight"] = (D, D)
            shapes[p + "mlp.gate_proj.weight"] = (H, D)
            shapes[p + "mlp.up_proj.weight"] = (H, D)
            shapes[p + "mlp.down_proj.weight"] = (D, H)
            if self.norm_kind == "parametric":
                shapes[p + "attn_norm.gain"] = (D,)
                shapes[p + "mlp_norm.gain"] = (D,)
        if self.norm_kind == "parametric":
            shapes["final_norm.gain"] = (D,)
        shapes["lm_head.weight"] = (V, D)
        return shapes

    def projection_names(self) -> list[str]:
        return [f"layers.{i}.{p}.weight" for i in range(self.n_layers) for p in PROJECTIONS]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in names})


class WeightStore(Mapping):
    """Immutable name -> fp32 array mapping.

    Arrays are made read-only on construction; use :meth:`updated` to get a
    new store with some tensors swapped out.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._t: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            a = np.asarray(arr)
            if a.dtype != FP32:
                a = T.as_fp32(a)
            elif a.flags.writeable:
                a = a.copy()
            self._t[name] = T.frozen(a)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def updated(self, changes: Mapping[str, np.ndarray]) -> WeightStore:
        new = WeightStore.__new__(WeightStore)
        new._t = dict(self._t)
        for name, arr in changes.items():
            a = np.array(arr, dtype=FP32)
            new._t[name] = T.frozen(a)
        return new

    def validate(self, spec: ModelSpec) -> None:
        for name, shape in spec.weight_shapes().items():
            if name not in self._t:
                raise KeyError(f"missing weight {name}")
            if self._t[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self._t[name].shape}")

    def equals(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bit-level equality of names, shapes and values."""
        if set(self) != set(other):
            return False
        return all(
            self[n].shape == other[n].shape
            and self[n].tobytes() == np.asarray(other[n], dtype=FP32).tobytes()
            for n in self
        )


@dataclass(frozen=True)
class Intervention:
    """A weight edit or an activation override applied during forward.

    Weight kinds address ``target`` (a weight name) at ``index``.  Activation
    kinds address ``target`` (a site in ACTIVATION_SITES) at ``layer`` and
    ``index = (token, channel)``; they act on the module output before the
    residual add.
    """

    kind: str
    target: str
    index: tuple[int, ...]
    value: float = 0.0
    layer: int | None = None

    WEIGHT_KINDS = ("zero_weight", "scale_weight")
    ACTIVATION_KINDS = ("set_activation", "scale_activation")

    def __post_init__(self):
        if self.kind not in self.WEIGHT_KINDS + self.ACTIVATION_KINDS:
            raise InterventionError(f"unknown intervention kind {self.kind!r}")
        object.__setattr__(self, "index", tuple(int(i) for i in self.index))
        if self.is_activation:
            if self.target not in ACTIVATION_SITES:
                raise InterventionError(f"activation site must be one of {ACTIVATION_SITES}")
            if self.layer is None or len(self.index) != 2:
                raise InterventionError("activation interventions need a layer and (token, channel)")

    @property
    def is_activation(self) -> bool:
        return self.kind in self.ACTIVATION_KINDS

    @classmethod
    def zero_weight(cls, name: str, index) -> Intervention:
        return cls("zero_weight", name, tuple(index))

    @classmethod
    def scale_weight(cls, name: str, index, factor: float) -> Intervention:
        return cls("scale_weight", name, tuple(index), float(factor))

    @classmethod
    def set_activation(cls, layer: int, token: int, channel: int, value: float,
                       site: str = "down_proj_out") -> Intervention:
        return cls("set_activation", site, (token, channel), float(value), layer)

    @classmethod
    def scale_activation(cls, layer: int, token: int, channel: int, factor: float,
                         site: str = "down_proj_out") -> Intervention:
        return cls("scale_activation", site, (token, channel), float(factor), layer)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target": self.target, "index": list(self.index), "value": self.value}
        if self.layer is not None:
            d["layer"] = self.layer
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> Intervention:
        return cls(d["kind"], d["target"], tuple(d["index"]), float(d.get("value", 0.0)), d.get("layer"))


@dataclass(frozen=True)
class TapRecord:
    layer: int
    site: str
    token: int
    channel: int
    value: float


def apply_weight_interventions(weights: WeightStore, interventions: Iterable[Intervention]) -> WeightStore:
    """Return a new store with the weight-kind interventions applied in order."""
    edits: dict[str, np.ndarray] = {}
    for iv in interventions:
        if iv.is_activation:
            continue
        if iv.target not in weights:
            raise InterventionError(f"unknown weight {iv.target!r}")
        arr = edits.get(iv.target)
        if arr is None:
            arr = edits[iv.target] = np.array(weights[iv.target])
        if len(iv.index) != arr.ndim or any(not 0 <= i < s for i, s in zip(iv.index, arr.shape)):
            raise InterventionError(f"index {iv.index} out of range for {iv.target} {arr.shape}")
        if iv.kind == "zero_weight":
            arr[iv.index] = 0.0
        else:
            arr[iv.index] = arr[iv.index] * FP32(iv.value)
    return weights.updated(edits) if edits else weights


def _rotary(x: np.ndarray, theta: float) -> np.ndarray:
    # x: [L, head_dim]
    L, hd = x.shape
    half = hd // 2
    inv_freq = (1.0 / theta ** (np.arange(half, dtype=np.float64) * 2.0 / hd))
    ang = np.arange(L, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(FP32)
    sin = np.sin(ang).astype(FP32)
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=1)


class _Recorder:
    def __init__(self, n_layers: int, taps: Sequence[str], slices: Sequence[tuple]):
        for site in taps:
            if site not in SITES:
                raise ValueError(f"unknown tap site {site!r}")
        for sl in slices:
            if sl[0] not in SITES:
                raise ValueError(f"unknown tap site {sl[0]!r}")
        self.taps = set(taps)
        self.slices = list(slices)
        self.records: list[TapRecord] = []

    def __call__(self, site: str, layer: int, x: np.ndarray) -> None:
        if site in self.taps:
            _, (t, c) = T.max_abs(x)
            self.records.append(TapRecord(layer, site, t, c, float(x[t, c])))
        for s, tok, ch in self.slices:
            if s != site:
                continue
            toks = range(x.shape[0]) if tok is None else [tok]
            chans = range(x.shape[1]) if ch is None else [ch]
            for t in toks:
                for c in chans:
                    self.records.append(TapRecord(layer, site, int(t), int(c), float(x[t, c])))


def _apply_activation(x: np.ndarray, site: str, layer: int, ivs: list[Intervention]) -> np.ndarray:
    hits = [iv for iv in ivs if iv.target == site and iv.layer == layer]
    if not hits:
        return x
    x = np.array(x)
    for iv in hits:
        t, c = iv.index
        if not (0 <= t < x.shape[0] and 0 <= c < x.shape[1]):
            raise InterventionError(f"activation index {iv.index} out of range for {site} {x.shape}")
        if iv.kind == "set_activation":
            x[t, c] = FP32(iv.value)
        else:
            x[t, c] = x[t, c] * FP32(iv.value)
    return x


def _attention(spec: ModelSpec, weights: WeightStore, layer: int, h: np.ndarray,
               hook: ActHook | None) -> np.ndarray:
    p = f"layers.{layer}.attn."
    L = h.shape[0]
    hd = spec.head_dim
    group = spec.n_heads // spec.kv_heads
    q = T.matmul_transposed(h, weights[p + "q_proj.weight"])
    k = T.matmul_transposed(h, weights[p + "k_proj.weight"])
    v = T.matmul_transposed(h, weights[p + "v_proj.weight"])
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    inv_sqrt = FP32(1.0 / np.sqrt(hd))
    heads = []
    for hi in range(spec.n_heads):
        kv = hi // group
        qh = _rotary(q[:, hi * hd:(hi + 1) * hd], spec.rope_theta)
        kh = _rotary(k[:, kv * hd:(kv + 1) * hd], spec.rope_theta)
        vh = v[:, kv * hd:(kv + 1) * hd]
        if hook is not None:
            qh = hook("bmm_q", layer, qh)
            kh = hook("bmm_k", layer, kh)
        scores = T.matmul_transposed(qh, kh) * inv_sqrt
        scores[mask] = -np.inf
        probs = T.softmax_rows(scores)
        if hook is not None:
            probs = hook("bmm_probs", layer, probs)
            vh = hook("bmm_v", layer, vh)
        heads.append(T.matmul_transposed(probs, T.transpose2d(vh)))
    attn = np.concatenate(heads, axis=1)
    if hook is not None:
        attn = hook("o_proj_in", layer, attn)
    return T.matmul_transposed(attn, weights[p + "o_proj.weight"])


def forward(spec: ModelSpec, weights: WeightStore, tokens: Sequence[int],
            taps: Sequence[str] = (), interventions: Sequence[Intervention] = (),
            slices: Sequence[tuple] = (), act_hook: ActHook | None = None,
            ) -> tuple[np.ndarray, list[TapRecord]]:
    """Run the model over ``tokens``.

    ``taps`` lists sites whose per-layer max-magnitude entry is recorded.
    ``slices`` lists ``(site, token, channel)`` triples recorded at every
    layer; ``None`` for token or channel records the whole axis.
    ``act_hook`` sees every linear-layer input and attention BMM operand
    and may return a replacement (used for quantization simulation).

    Returns the logits [len(tokens), vocab] and the tap records.
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("tokens must be nonempty")
    if len(tokens) > spec.max_seq:
        raise ValueError(f"sequence length {len(tokens)} exceeds max_seq {spec.max_seq}")
    if any(t < 0 or t >= spec.vocab for t in tokens):
        raise ValueError("token id out of range for vocab")
    rec = _Recorder(spec.n_layers, taps, slices)
    ivs = list(interventions)
    for iv in ivs:
        if iv.is_activation and not 0 <= iv.layer < spec.n_layers:
            raise InterventionError(f"intervention layer {iv.layer} out of range")
    weights = apply_weight_interventions(weights, ivs)
    act_ivs = [iv for iv in ivs if iv.is_activation]
    parametric = spec.norm_kind == "parametric"
    glu = T.silu if spec.mlp_kind == "swiglu" else T.gelu

    x = np.array(weights["embed.weight"][tokens], dtype=FP32)
    for i in range(spec.n_layers):
        p = f"layers.{i}."
        h = T.rmsnorm(x, weights[p + "attn_norm.gain"] if parametric else None, spec.norm_eps)
        if act_hook is not None:
            h = act_hook("attn_in", i, h)
        x = x + _attention(spec, weights, i, h, act_hook)

        h = T.rmsnorm(x, weights[p + "mlp_norm.gain"] if parametric else None, spec.norm_eps)
        if act_hook is not None:
            h = act_hook("mlp_in", i, h)
        gate = T.matmul_transposed(h, weights[p + "mlp.gate_proj.weight"])
        up = T.matmul_transposed(h, weights[p + "mlp.up_proj.weight"])
        a = T.hadamard(glu(gate), up)
        a = _apply_activation(a, "down_proj_in", i, act_ivs)
        if act_hook is not None:
            a = act_hook("down_proj_in", i, a)
        rec("down_proj_in", i, a)
        y = T.matmul_transposed(a, weights[p + "mlp.down_proj.weight"])
        y = _apply_activation(y, "down_proj_out", i, act_ivs)
        rec("down_proj_out", i, y)
        x = x + y
        rec("post_block", i, x)

    h = T.rmsnorm(x, weights["final_norm.gain"] if parametric else None, spec.norm_eps)
    logits = T.matmul_transposed(h, weights["lm_head.weight"])
    rec("logits", spec.n_layers, logits)
    return logits, rec.records


def next_token_distribution(spec: ModelSpec, weights: WeightStore, tokens: Sequence[int],
                            interventions: Sequence[Intervention] = ()) -> np.ndarray:
    logits, _ = forward(spec, weights, tokens, interventions=interventions)
    return T.softmax_rows(logits[-1])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_nll(spec: ModelSpec, weights: WeightStore, tokens: Sequence[int],
                 reference: np.ndarray | None = None, **fwd) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and the number of predictions.

    With ``reference`` (reference next-token probabilities, one row per
    position) the loss is the cross-entropy against those soft targets
    instead of the observed next tokens.
    """
    logits, _ = forward(spec, weights, tokens, **fwd)
    logp = log_softmax(logits[:-1])
    if reference is None:
        nxt = np.asarray(tokens[1:])
        return float(-logp[np.arange(len(nxt)), nxt].sum()), len(nxt)
    ref = np.asarray(reference, dtype=np.float64)[: len(tokens) - 1]
    return float(-(ref * logp).sum()), ref.shape[0]


def reference_distributions(spec: ModelSpec, weights: WeightStore,
                            sequences: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Per-position next-token probabilities of a reference model."""
    out = []
    for seq in sequences:
        logits, _ = forward(spec, weights, seq)
        out.append(np.exp(log_softmax(logits)))
    return out


# ---------------------------------------------------------------- toy models

TOY_SPEC = ModelSpec(n_layers=4, d_model=16, d_hidden=64, n_heads=2, vocab=64, max_seq=256)
TOY_STD = 0.02
# embedding offset along a shared +-1 sign pattern
TOY_OFFSET = 0.04
# per-entry boost added to the gate/up rows feeding the planted input channel
TOY_BOOST = 0.04


def make_toy_model(seed: int, plant: tuple | None = None,
                   spec: ModelSpec = TOY_SPEC) -> tuple[ModelSpec, WeightStore]:
    """Small random model, optionally with one planted super weight.

    Projections are N(0, 0.02) and norm gains are ones.  Embedding rows are
    N(0, 0.02) plus a shared offset ``TOY_OFFSET * s`` for a random sign
    vector ``s``, so every token carries a common residual direction.

    ``plant = (layer, row, col, magnitude)`` sets
    ``layers.{layer}.mlp.down_proj.weight[row, col] = magnitude`` and adds
    ``TOY_BOOST * s`` to the gate and up rows producing intermediate channel
    ``col``.  The boosted rows stay within the inlier weight range, but
    their alignment with the shared direction makes the GLU product at
    ``col`` a moderately large value for every token, which the planted
    weight then amplifies.
    """
    rng = np.random.default_rng(seed)
    D, H, V = spec.d_model, spec.d_hidden, spec.vocab
    w: dict[str, np.ndarray] = {}
    sign = np.where(rng.random(D) < 0.5, -1.0, 1.0)
    w["embed.weight"] = rng.normal(0.0, TOY_STD, size=(V, D)) + TOY_OFFSET * sign
    for name, shape in spec.weight_shapes().items():
        if name == "embed.weight":
            continue
        if name.endswith(".gain"):
            w[name] = np.ones(shape)
        else:
            w[name] = rng.normal(0.0, TOY_STD, size=shape)
    if plant is not None:
        layer, row, col, mag = plant
        if not (0 <= layer < spec.n_layers and 0 <= row < D and 0 <= col < H):
            raise ValueError(f"plant {plant} out of range for toy dims")
        p = f"layers.{layer}.mlp."
        w[p + "gate_proj.weight"][col] += TOY_BOOST * sign
        w[p + "up_proj.weight"][col] += TOY_BOOST * sign
        w[p + "down_proj.weight"][row, col] = mag
    store = WeightStore({k: np.asarray(v, dtype=FP32) for k, v in w.items()})
    return spec, store


def toy_corpus(seed: int, n_seqs: int = 8, length: int = 32, vocab: int = TOY_SPEC.vocab) -> list[list[int]]:
    rng = np.random.default_rng(10_000 + seed)
    return [rng.integers(0, vocab, size=length).tolist() for _ in range(n_seqs)]
