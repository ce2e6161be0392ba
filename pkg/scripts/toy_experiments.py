"""Toy-scale analogs of the super weight figures, written as CSV series.

    python scripts/toy_experiments.py --out results/ --seed 0

Outputs (one CSV per experiment):
    activation_maxima.csv   per-layer max |down_proj in/out| (spike layer)
    sa_lifetime.csv         residual magnitude at the SA position, with/without SW
    token_shift.csv         mean next-token probability before/after pruning the SW
    sw_scaling.csv          teacher-referenced PPL vs SW scale factor
    block_sweep.csv         4-bit RTN vs clip+restore PPL across block sizes
    w8a8.csv                fp32 / naive W8A8 / W8A8 with SA handling
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from superscope.detect import (
    DEFAULT_PROMPT,
    detect_super_weights,
    scale_interventions,
    sensitivity_sweep,
    stopword_shift,
    trace_super_activation,
)
from superscope.evaluate import blocksize_sweep, perplexity, reference_probs, simulate_w8a8
from superscope.model import forward, make_toy_model, toy_corpus


def write(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--magnitude", type=float, default=100.0, help="plant magnitude for detection experiments")
    ap.add_argument("--quant-magnitude", type=float, default=2.0, help="plant magnitude for the block sweep")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    plant = (1, 5, 9, args.magnitude)
    spec, w = make_toy_model(args.seed, plant)
    corpus = toy_corpus(args.seed)
    sws = detect_super_weights(spec, w)
    if not sws:
        raise SystemExit("no super weight detected")
    sw = sws[0]
    prune = scale_interventions([sw], 0.0)

    _, taps = forward(spec, w, DEFAULT_PROMPT, taps=("down_proj_in", "down_proj_out"))
    write(out / "activation_maxima.csv", ["layer", "site", "token", "channel", "max_abs"],
          [(r.layer, r.site, r.token, r.channel, abs(r.value)) for r in sorted(taps, key=lambda r: (r.site, r.layer))])

    sa, mags = trace_super_activation(spec, w, sw)
    _, pruned = trace_super_activation(spec, w, sw, interventions=prune, token=sa.token)
    write(out / "sa_lifetime.csv", ["layer", "original", "prune_sw"],
          [(sw.layer + i, a, b) for i, (a, b) in enumerate(zip(mags, pruned))])

    prompts = [s[:16] for s in corpus]
    shift = stopword_shift(spec, w, prompts, (), prune, threads=args.threads)
    rows = sorted(shift.rows(), key=lambda r: -r["ratio"])
    write(out / "token_shift.csv", ["token", "before", "after", "ratio"],
          [(r["token"], r["before"], r["after"], r["ratio"]) for r in rows])

    ref = reference_probs(spec, w, corpus, args.threads)
    factors = [0.0, 0.5, 0.8, 1.0, 1.2, 1.5, 2.0, 3.0]
    pts = sensitivity_sweep(spec, w, [sw], factors,
                            lambda ws: perplexity(spec, ws, corpus, reference=ref), args.threads)
    write(out / "sw_scaling.csv", ["factor", "ppl"], pts)

    qspec, qw = make_toy_model(args.seed, (1, 5, 9, args.quant_magnitude))
    qsws = detect_super_weights(qspec, qw)
    qref = reference_probs(qspec, qw, corpus, args.threads)
    blocks = [(8, 8), (16, 16), (32, 32), (64, 64), (512, 512), None]
    rows = []
    for restore in (False, True):
        for r in blocksize_sweep(qspec, qw, corpus, 4, blocks, with_restore=restore, sw_list=qsws,
                                 reference=qref, threads=args.threads):
            rows.append((r.scheme, r.block, r.bits, r.ppl, r.mse))
    write(out / "block_sweep.csv", ["scheme", "block", "bits", "ppl", "mse"], rows)

    fp = perplexity(spec, w, corpus, reference=ref)
    naive = simulate_w8a8(spec, w, corpus, reference=ref, threads=args.threads)
    held = simulate_w8a8(spec, w, corpus, sa=sa, reference=ref, threads=args.threads)
    write(out / "w8a8.csv", ["method", "ppl", "excess_over_fp32"],
          [("fp32", fp, 0.0), ("naive_w8a8", naive, naive - fp), ("w8a8_sa_restore", held, held - fp)])
    print(f"super weight {sw.coords} value {sw.value}; SA {sa.value:.3f} at token {sa.token}; "
          f"pruned SA {np.abs(pruned[0]):.3f}")


if __name__ == "__main__":
    main()
