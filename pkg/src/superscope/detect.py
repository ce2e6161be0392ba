"""Super weight detection, super activation tracing and ablation experiments."""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import tensor as T
from ._parallel import parallel_map
from .model import (
    Intervention,
    ModelSpec,
    WeightStore,
    apply_weight_interventions,
    forward,
    next_token_distribution,
)

# fixed short prompt; ids are valid for any vocab of 64 or more
DEFAULT_PROMPT = (1, 17, 42, 5, 33, 8, 61, 12)
DOWN_PROJ = "mlp.down_proj"


@dataclass(frozen=True)
class SuperWeightRecord:
    layer: int
    module: str
    row: int
    col: int
    value: float

    @property
    def weight_name(self) -> str:
        return f"layers.{self.layer}.{self.module}.weight"

    @property
    def coords(self) -> tuple[int, int, int]:
        return self.layer, self.row, self.col


@dataclass(frozen=True)
class SuperActivationRecord:
    layer: int
    token: int
    channel: int
    value: float


@dataclass(frozen=True)
class DetectionConfig:
    """Spike test settings.

    A layer is a candidate when its down_proj output max-magnitude exceeds
    ``spike_ratio`` times the median of all layers' output maxima and its
    down_proj input max-magnitude exceeds ``input_ratio`` times the median of
    the input maxima.
    """

    spike_ratio: float = 50.0
    max_iters: int = 10
    prompt: tuple[int, ...] = DEFAULT_PROMPT
    input_ratio: float = 5.0

    def __post_init__(self):
        if self.spike_ratio <= 1 or self.input_ratio <= 1:
            raise ValueError("spike ratios must be > 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        if not self.prompt:
            raise ValueError("detection prompt must be nonempty")


class DetectionResult(list):
    """List of SuperWeightRecord in detection order.

    ``partial`` is set when ``max_iters`` ran out while a spike remained.
    """

    def __init__(self, records: Iterable[SuperWeightRecord] = (), partial: bool = False):
        super().__init__(records)
        self.partial = partial


def layer_maxima(spec: ModelSpec, weights: WeightStore, prompt: Sequence[int]):
    """Per-layer down_proj input and output max-magnitude tap records."""
    _, taps = forward(spec, weights, prompt, taps=("down_proj_in", "down_proj_out"))
    ins = sorted((r for r in taps if r.site == "down_proj_in"), key=lambda r: r.layer)
    outs = sorted((r for r in taps if r.site == "down_proj_out"), key=lambda r: r.layer)
    return ins, outs


def find_spike(spec: ModelSpec, weights: WeightStore, cfg: DetectionConfig):
    """Return (layer, out_record, in_record) of the strongest spike, or None."""
    ins, outs = layer_maxima(spec, weights, cfg.prompt)
    in_mag = np.array([abs(r.value) for r in ins])
    out_mag = np.array([abs(r.value) for r in outs])
    in_med = T.median(in_mag)
    out_med = T.median(out_mag)
    best = None
    for layer in range(spec.n_layers):
        if out_mag[layer] > cfg.spike_ratio * out_med and in_mag[layer] > cfg.input_ratio * in_med:
            if best is None or out_mag[layer] > out_mag[best]:
                best = layer
    if best is None:
        return None
    return best, outs[best], ins[best]


def detect_super_weights(spec: ModelSpec, weights: WeightStore,
                         cfg: DetectionConfig = DetectionConfig()) -> DetectionResult:
    """Locate super weights from down_proj activation spikes.

    Each round runs the prompt, takes the spiking layer, reads the SW row
    from the output spike channel and the column from the input spike
    channel, records the weight and zeroes it in a private copy of the
    store.  The caller's store is never modified.
    """
    found = DetectionResult()
    work = weights
    for _ in range(cfg.max_iters):
        spike = find_spike(spec, work, cfg)
        if spike is None:
            return found
        layer, out_rec, in_rec = spike
        rec = SuperWeightRecord(layer, DOWN_PROJ, out_rec.channel, in_rec.channel, 0.0)
        value = float(work[rec.weight_name][rec.row, rec.col])
        if value == 0.0 or any(r.coords == rec.coords for r in found):
            # the spike is not explained by a removable weight
            found.partial = True
            return found
        found.append(SuperWeightRecord(layer, DOWN_PROJ, rec.row, rec.col, value))
        work = apply_weight_interventions(work, [Intervention.zero_weight(rec.weight_name, (rec.row, rec.col))])
    found.partial = find_spike(spec, work, cfg) is not None
    return found


def trace_super_activation(spec: ModelSpec, weights: WeightStore, sw: SuperWeightRecord,
                           prompt: Sequence[int] = DEFAULT_PROMPT,
                           interventions: Sequence[Intervention] = (),
                           token: int | None = None):
    """Follow the super activation created by ``sw`` through the residual stream.

    Returns the SuperActivationRecord (value = down_proj output at the SW
    layer) and the |post_block| magnitudes at (token, channel) for layers
    sw.layer .. n_layers - 1.  The token is the position with the largest
    |down_proj output| in channel sw.row unless ``token`` pins it.
    """
    _, records = forward(
        spec, weights, prompt, interventions=interventions,
        slices=[("down_proj_out", None, sw.row), ("post_block", None, sw.row)],
    )
    col = [r for r in records if r.site == "down_proj_out" and r.layer == sw.layer]
    if token is not None:
        best = next(r for r in col if r.token == token)
    else:
        best = col[0]
        for r in col[1:]:
            if abs(r.value) > abs(best.value):
                best = r
    sa = SuperActivationRecord(sw.layer, best.token, sw.row, best.value)
    post = {r.layer: abs(r.value) for r in records if r.site == "post_block" and r.token == best.token}
    return sa, [post[i] for i in range(sw.layer, spec.n_layers)]


def prune_topk_other(spec: ModelSpec, weights: WeightStore, k: int,
                     exclude: Iterable[SuperWeightRecord] = ()) -> WeightStore:
    """Zero the k largest-magnitude projection weights, skipping ``exclude``.

    Ties are broken by projection name order, then by flat index.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return weights
    excl: dict[str, set[int]] = {}
    for sw in exclude:
        shape = weights[sw.weight_name].shape
        excl.setdefault(sw.weight_name, set()).add(int(np.ravel_multi_index((sw.row, sw.col), shape)))
    names = spec.projection_names()
    mags, tensor_ids, flat_ids = [], [], []
    for t_id, name in enumerate(names):
        a = np.abs(weights[name]).ravel().astype(np.float64)
        for idx in excl.get(name, ()):
            a[idx] = -1.0
        take = min(k, a.size)
        cand = np.argpartition(-a, take - 1)[:take] if take < a.size else np.arange(a.size)
        # keep everything tied with the smallest selected value
        cut = a[cand].min()
        cand = np.flatnonzero(a >= cut)
        cand = cand[a[cand] >= 0]
        mags.append(a[cand])
        tensor_ids.append(np.full(cand.size, t_id))
        flat_ids.append(cand)
    mags = np.concatenate(mags)
    tensor_ids = np.concatenate(tensor_ids)
    flat_ids = np.concatenate(flat_ids)
    order = np.lexsort((flat_ids, tensor_ids, -mags))[:k]
    edits: dict[str, np.ndarray] = {}
    for i in order:
        name = names[tensor_ids[i]]
        arr = edits.get(name)
        if arr is None:
            arr = edits[name] = np.array(weights[name])
        arr.reshape(-1)[flat_ids[i]] = 0.0
    return weights.updated(edits)


@dataclass
class StopwordShift:
    before: np.ndarray  # mean next-token probability per vocab id, baseline
    after: np.ndarray   # same, with interventions
    ratios: dict[int, float] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"token": t, "before": float(self.before[t]), "after": float(self.after[t]), "ratio": r}
            for t, r in self.ratios.items()
        ]


def stopword_shift(spec: ModelSpec, weights: WeightStore, prompts: Sequence[Sequence[int]],
                   stopwords: Iterable[int], interventions: Sequence[Intervention] = (),
                   threads: int | None = None) -> StopwordShift:
    if not prompts:
        raise ValueError("prompts must be nonempty")
    ivs = list(interventions)
    base = parallel_map(lambda p: next_token_distribution(spec, weights, p), prompts, threads)
    if ivs:
        post = parallel_map(lambda p: next_token_distribution(spec, weights, p, ivs), prompts, threads)
    else:
        post = base
    before = np.mean(np.stack(base).astype(np.float64), axis=0)
    after = np.mean(np.stack(post).astype(np.float64), axis=0)
    ids = sorted(set(int(s) for s in stopwords)) or list(range(spec.vocab))
    ratios = {}
    for t in ids:
        ratios[t] = 1.0 if after[t] == before[t] else float(after[t] / before[t])
    return StopwordShift(before, after, ratios)


def scale_interventions(sw_list: Iterable[SuperWeightRecord], factor: float) -> list[Intervention]:
    return [Intervention.scale_weight(sw.weight_name, (sw.row, sw.col), factor) for sw in sw_list]


def sensitivity_sweep(spec: ModelSpec, weights: WeightStore, sw_list: Sequence[SuperWeightRecord],
                      factors: Sequence[float], quality_fn: Callable[[WeightStore], float],
                      threads: int | None = None) -> list[tuple[float, float]]:
    """Scale every super weight by each factor and score the result."""
    if not factors:
        raise ValueError("factors must be nonempty")

    def run(f):
        return float(quality_fn(apply_weight_interventions(weights, scale_interventions(sw_list, f))))

    return list(zip([float(f) for f in factors], parallel_map(run, factors, threads)))


def known_super_weights() -> dict[str, list[SuperWeightRecord]]:
    """Known super weight coordinates of public checkpoints, by model name."""
    text = resources.files("superscope").joinpath("data/superweight_directory.json").read_text()
    out: dict[str, list[SuperWeightRecord]] = {}
    for row in json.loads(text)["records"]:
        out.setdefault(row["model"], []).append(
            SuperWeightRecord(row["layer"], row["module"], row["row"], row["col"], float("nan"))
        )
    return out


def record_dict(rec) -> dict:
    return asdict(rec)
