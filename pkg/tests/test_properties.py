"""Property tests for invariants that cut across modules."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from superscope.detect import DEFAULT_PROMPT
from superscope.model import Intervention, apply_weight_interventions, forward, make_toy_model
from superscope.quant import QuantScheme, dequantize, quantize

SPEC, W = make_toy_model(5, (1, 5, 9, 100.0))
BASE, _ = forward(SPEC, W, DEFAULT_PROMPT)
PROJ = SPEC.projection_names()

weight_iv = st.builds(
    lambda name, r, c, f, zero: (Intervention.zero_weight(name, (r % W[name].shape[0], c % W[name].shape[1])) if zero
                                 else Intervention.scale_weight(name, (r % W[name].shape[0], c % W[name].shape[1]), f)),
    st.sampled_from(PROJ), st.integers(0, 63), st.integers(0, 63),
    st.sampled_from([0.0, 0.5, 2.0, -1.0]), st.booleans(),
)
act_iv = st.builds(
    lambda layer, t, c, v, site: Intervention.set_activation(layer, t, c % (16 if site == "down_proj_out" else 64), v, site),
    st.integers(0, 3), st.integers(0, len(DEFAULT_PROMPT) - 1), st.integers(0, 63),
    st.floats(-50, 50, width=32), st.sampled_from(["down_proj_out", "down_proj_in"]),
)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.one_of(weight_iv, act_iv), max_size=5), st.integers(0, 5))
def test_interventions_split_anywhere(ivs, k):
    k = min(k, len(ivs))
    whole, _ = forward(SPEC, W, DEFAULT_PROMPT, interventions=ivs)
    pre = apply_weight_interventions(W, ivs[:k])
    rest = [iv for iv in ivs[:k] if iv.is_activation] + ivs[k:]
    split, _ = forward(SPEC, pre, DEFAULT_PROMPT, interventions=rest)
    np.testing.assert_array_equal(whole, split)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(PROJ), st.integers(0, 63), st.integers(0, 63))
def test_scale_by_one_is_identity(name, r, c):
    idx = (r % W[name].shape[0], c % W[name].shape[1])
    out, _ = forward(SPEC, W, DEFAULT_PROMPT, interventions=[Intervention.scale_weight(name, idx, 1.0)])
    np.testing.assert_array_equal(out, BASE)


@settings(max_examples=15, deadline=None)
@given(st.lists(weight_iv, min_size=1, max_size=4))
def test_weight_interventions_never_mutate_source(ivs):
    snap = {k: np.array(v) for k, v in W.items()}
    apply_weight_interventions(W, ivs)
    assert all(np.array_equal(W[k], snap[k]) for k in snap)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(1, 6), st.integers(1, 7), st.integers(1, 7),
       st.integers(0, 2**31 - 1))
def test_packed_layout_sizes(bits, R, C, br, bc, seed):
    x = np.random.default_rng(seed).normal(size=(R, C)).astype(np.float32)
    q = quantize(x, QuantScheme(bits, "block2d", (br, bc)))
    n_groups = -(-R // min(br, R)) * -(-C // min(bc, C))
    assert q.codes.shape == x.shape and q.scales.shape == q.mins.shape == (n_groups,)
    assert int(q.codes.max()) <= 2 ** bits - 1
    # quantization is deterministic and decoding reproduces from the packed parts alone
    q2 = quantize(x, QuantScheme(bits, "block2d", (br, bc)))
    np.testing.assert_array_equal(dequantize(q), dequantize(q2))
