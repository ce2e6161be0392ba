import numpy as np
import pytest

from superscope.detect import detect_super_weights, trace_super_activation
from superscope.evaluate import (
    blocksize_sweep,
    capture_linear_inputs,
    perplexity,
    reference_probs,
    simulate_w8a8,
    w8a8_hook,
    windows,
)
from superscope.model import forward, log_softmax, make_toy_model, toy_corpus
from superscope.quant import QuantScheme, quantize_dequantize


def test_windows():
    assert windows([[1, 2, 3, 4, 5]], 2) == [[1, 2], [3, 4]]
    assert windows([[1]], 4) == []


def test_perplexity_matches_direct_nll(planted):
    spec, w = planted
    corpus = toy_corpus(1, n_seqs=3, length=10)
    total, count = 0.0, 0
    for seq in corpus:
        lp = log_softmax(forward(spec, w, seq)[0])
        total -= sum(lp[i, seq[i + 1]] for i in range(len(seq) - 1))
        count += len(seq) - 1
    assert perplexity(spec, w, corpus) == pytest.approx(np.exp(total / count), rel=1e-12)
    with pytest.raises(ValueError):
        perplexity(spec, w, [[1]])


def test_reference_perplexity_is_minimised_by_reference(planted, corpus):
    spec, w = planted
    ref = reference_probs(spec, w, corpus)
    base = perplexity(spec, w, corpus, reference=ref)
    noisy = w.updated({"lm_head.weight": w["lm_head.weight"] * np.float32(1.5)})
    assert perplexity(spec, noisy, corpus, reference=ref) > base
    assert perplexity(spec, w, corpus, reference=w) == base


def test_perplexity_thread_independent(planted, corpus):
    spec, w = planted
    assert perplexity(spec, w, corpus, threads=1) == perplexity(spec, w, corpus, threads=4)


def test_w8a8_close_to_fp32_without_plant():
    for seed in range(3):
        spec, w = make_toy_model(seed)
        c = toy_corpus(seed)
        base = perplexity(spec, w, c)
        assert abs(simulate_w8a8(spec, w, c) - base) / base < 0.10


def test_w8a8_hook_quantizes_every_operand(planted):
    spec, w = planted
    seen = set()
    hook = w8a8_hook(8)

    def spy(site, layer, x):
        seen.add(site)
        return hook(site, layer, x)

    forward(spec, w, [1, 2, 3, 4], act_hook=spy)
    assert seen == {"attn_in", "bmm_q", "bmm_k", "bmm_probs", "bmm_v", "o_proj_in", "mlp_in", "down_proj_in"}


def _residual_inputs(spec, w, seq):
    got = {}

    def hook(site, layer, x):
        if site in ("attn_in", "mlp_in"):
            got[(site, layer)] = np.array(x)
        return x

    forward(spec, w, seq, act_hook=hook)
    return got


def test_super_activation_handling_reduces_input_error(planted):
    spec, w = planted
    sa, _ = trace_super_activation(spec, w, detect_super_weights(spec, w)[0])
    seq = toy_corpus(0)[0]
    hook_sa, naive = w8a8_hook(8, sa), QuantScheme(8, "per_token")
    for (site, layer), x in _residual_inputs(spec, w, seq).items():
        if layer <= sa.layer:
            continue
        tok = int(np.argmax(np.abs(x[:, sa.channel])))
        held = hook_sa(site, layer, x)
        plain = quantize_dequantize(x, naive)
        assert held[tok, sa.channel] == x[tok, sa.channel]
        inl = np.ones(x.shape[1], bool)
        inl[sa.channel] = False
        e_sa = np.mean((held[tok, inl] - x[tok, inl]) ** 2)
        e_naive = np.mean((plain[tok, inl] - x[tok, inl]) ** 2)
        assert e_sa < 0.25 * e_naive


@pytest.mark.xfail(strict=True, reason="toy outputs barely depend on inliers at the super activation token")
def test_w8a8_super_activation_perplexity_margin():
    # the benefit at the perplexity level is below noise on the toy; see the decisions log
    for seed in range(3):
        spec, w = make_toy_model(seed, (1, 5, 9, 100.0))
        c = toy_corpus(seed)
        ref = reference_probs(spec, w, c)
        base = perplexity(spec, w, c, reference=ref)
        sa, _ = trace_super_activation(spec, w, detect_super_weights(spec, w)[0])
        naive = simulate_w8a8(spec, w, c, reference=ref)
        ours = simulate_w8a8(spec, w, c, sa=sa, reference=ref)
        assert ours <= naive - 0.01 * (naive - base)


def test_capture_linear_inputs(planted, corpus):
    spec, w = planted
    acts = capture_linear_inputs(spec, w, corpus[:2], max_rows=40)
    assert acts[("mlp_in", 0)].shape == (40, spec.d_model)
    assert acts[("down_proj_in", 3)].shape == (40, spec.d_hidden)


def test_sweep_degenerate_config_matches_naive(unplanted, corpus):
    spec, w = unplanted
    small = corpus[:2]
    rtn = blocksize_sweep(spec, w, small, blocks=[None], with_restore=False)
    ours = blocksize_sweep(spec, w, small, blocks=[None], with_restore=True, sw_list=[], z=1e9)
    assert (rtn[0].ppl, rtn[0].mse) == (ours[0].ppl, ours[0].mse)
    assert rtn[0].scheme == "rtn" and ours[0].scheme == "clip_restore" and ours[0].block == "per_tensor"
    with pytest.raises(ValueError):
        blocksize_sweep(spec, w, small, blocks=[])
