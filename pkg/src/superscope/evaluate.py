"""Perplexity evaluation, W8A8 simulation and weight block-size sweeps."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from ._parallel import parallel_map
from .detect import SuperActivationRecord, SuperWeightRecord
from .model import ModelSpec, WeightStore, forward, reference_distributions, sequence_nll
from .quant import (
    QuantScheme,
    quantize_activation_restore,
    quantize_dequantize,
    quantize_weight_clip_restore,
    tune_z,
)

# linear-layer inputs that read the (normed) residual stream
RESIDUAL_INPUTS = ("attn_in", "mlp_in")
# which captured input feeds which projection
INPUT_OF = {
    "attn.q_proj": "attn_in", "attn.k_proj": "attn_in", "attn.v_proj": "attn_in",
    "attn.o_proj": "o_proj_in",
    "mlp.gate_proj": "mlp_in", "mlp.up_proj": "mlp_in",
    "mlp.down_proj": "down_proj_in",
}


@dataclass(frozen=True)
class QuantEvalRow:
    scheme: str
    block: str
    bits: int
    ppl: float
    mse: float


def _sequences(corpus) -> list[list[int]]:
    seqs = getattr(corpus, "sequences", corpus)
    return [list(s) for s in seqs]


def windows(corpus, max_len: int) -> list[list[int]]:
    """Split every sequence into consecutive non-overlapping windows of max_len."""
    out = []
    for seq in _sequences(corpus):
        for i in range(0, len(seq), max_len):
            w = seq[i:i + max_len]
            if len(w) >= 2:
                out.append(w)
    return out


def perplexity(spec: ModelSpec, weights: WeightStore, corpus, reference=None,
               threads: int | None = None, **fwd) -> float:
    """exp(mean next-token NLL) over the corpus.

    ``reference`` switches to soft targets: either a WeightStore (a
    reference model sharing ``spec``) or precomputed per-window reference
    probabilities from :func:`reference_probs`.  The loss is then the
    cross-entropy against the reference's next-token distribution, which is
    minimised exactly when the evaluated model matches the reference.
    """
    seqs = windows(corpus, spec.max_seq)
    if not seqs:
        raise ValueError("corpus has no window with at least two tokens")
    if isinstance(reference, WeightStore):
        reference = reference_probs(spec, reference, seqs, threads)
    if reference is None:
        parts = parallel_map(lambda s: sequence_nll(spec, weights, s, **fwd), seqs, threads)
    else:
        parts = parallel_map(
            lambda i: sequence_nll(spec, weights, seqs[i], reference=reference[i], **fwd),
            range(len(seqs)), threads,
        )
    total = sum(p[0] for p in parts)
    count = sum(p[1] for p in parts)
    return float(np.exp(total / count))


def reference_probs(spec: ModelSpec, weights: WeightStore, corpus, threads: int | None = None):
    seqs = windows(corpus, spec.max_seq)
    return parallel_map(lambda s: reference_distributions(spec, weights, [s])[0], seqs, threads)


# ------------------------------------------------------------------- W8A8

def quantize_projections(spec: ModelSpec, weights: WeightStore, scheme: QuantScheme) -> WeightStore:
    return weights.updated({n: quantize_dequantize(weights[n], scheme) for n in spec.projection_names()})


def w8a8_hook(bits: int = 8, sa: SuperActivationRecord | None = None):
    """Activation hook: per-token RTN on every linear input and BMM operand.

    With ``sa``, residual-stream inputs of layers after ``sa.layer`` hold out
    the super activation: channel ``sa.channel`` at the token where that
    channel peaks in the current sequence.
    """
    scheme = QuantScheme(bits=bits, granularity="per_token")

    def hook(site, layer, x):
        if sa is not None and site in RESIDUAL_INPUTS and layer > sa.layer and x.shape[1] > sa.channel:
            tok = int(np.argmax(np.abs(x[:, sa.channel])))
            held = SuperActivationRecord(layer, tok, sa.channel, float(x[tok, sa.channel]))
            return quantize_activation_restore(x, held, bits)
        return quantize_dequantize(x, scheme)

    return hook


def simulate_w8a8(spec: ModelSpec, weights: WeightStore, corpus,
                  sa: SuperActivationRecord | None = None, bits: int = 8,
                  reference=None, threads: int | None = None) -> float:
    """Perplexity with per-tensor weight and per-token activation fake quantization."""
    if not _sequences(corpus):
        raise ValueError("corpus is empty")
    qweights = quantize_projections(spec, weights, QuantScheme(bits=bits, granularity="per_tensor"))
    return perplexity(spec, qweights, corpus, reference=reference, threads=threads,
                      act_hook=w8a8_hook(bits, sa))


# ------------------------------------------------------------ block sweep

def capture_linear_inputs(spec: ModelSpec, weights: WeightStore, corpus,
                          max_rows: int = 4096) -> dict[tuple[str, int], np.ndarray]:
    """Inputs seen by each linear layer, keyed by (site, layer)."""
    got: dict[tuple[str, int], list[np.ndarray]] = {}

    def hook(site, layer, x):
        if site in ("attn_in", "o_proj_in", "mlp_in", "down_proj_in"):
            got.setdefault((site, layer), []).append(np.array(x))
        return x

    for seq in windows(corpus, spec.max_seq):
        forward(spec, weights, seq, act_hook=hook)
    return {k: np.concatenate(v)[:max_rows] for k, v in got.items()}


def quantize_weights(spec: ModelSpec, weights: WeightStore, bits: int, block: tuple[int, int] | None,
                     with_restore: bool, sw_list: Sequence[SuperWeightRecord] = (),
                     calib: dict | None = None, z: float | None = None) -> tuple[WeightStore, float]:
    """Weight-only RTN of every projection.

    With ``with_restore`` each tensor is z-clipped (z tuned per tensor unless
    given) and its super weights are restored after dequantization.  Returns
    the new store and the mean squared weight error over all projections.
    """
    base = QuantScheme.blocks(bits, block)
    changes, sq, n = {}, 0.0, 0
    for name in spec.projection_names():
        w = weights[name]
        if with_restore:
            layer = int(name.split(".")[1])
            module = name.split(".", 2)[2].rsplit(".", 1)[0]
            restore = tuple((s.row, s.col) for s in sw_list if s.layer == layer and s.module == module)
            scheme = replace(base, restore=restore)
            x = None if calib is None else calib.get((INPUT_OF[module], layer))
            zz = z if z is not None else tune_z(w, scheme, calib=x)
            w_hat = quantize_weight_clip_restore(w, replace(scheme, clip_z=zz))
        else:
            w_hat = quantize_dequantize(w, base)
        changes[name] = w_hat
        sq += float(np.sum((w_hat.astype(np.float64) - w) ** 2))
        n += w.size
    return weights.updated(changes), sq / n


def blocksize_sweep(spec: ModelSpec, weights: WeightStore, corpus, bits: int = 4,
                    blocks: Sequence[tuple[int, int] | None] = ((8, 8), (64, 64), (512, 512), None),
                    with_restore: bool = True, sw_list: Sequence[SuperWeightRecord] = (),
                    calib=None, z: float | None = None, reference=None,
                    threads: int | None = None) -> list[QuantEvalRow]:
    """Weight-only quantization at each block size; one quant-eval row per block.

    ``calib`` is a corpus used to collect linear-layer inputs for output-space
    z tuning; without it z is tuned on weight reconstruction error.
    """
    if not blocks:
        raise ValueError("blocks must be nonempty")
    if isinstance(reference, WeightStore):
        reference = reference_probs(spec, reference, corpus, threads)
    acts = capture_linear_inputs(spec, weights, calib) if calib is not None else None
    rows = []
    for block in blocks:
        qw, mse = quantize_weights(spec, weights, bits, block, with_restore, sw_list, acts, z)
        ppl = perplexity(spec, qw, corpus, reference=reference, threads=threads)
        label = "per_tensor" if block is None else f"{block[0]}x{block[1]}"
        rows.append(QuantEvalRow("clip_restore" if with_restore else "rtn", label, bits, ppl, mse))
    return rows
