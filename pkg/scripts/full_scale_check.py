"""Optional full-scale check against published super weight coordinates.

    python scripts/full_scale_check.py --checkpoint /models/llama-7b --model llama-7b \
        [--corpus wikitext2_test.tokens --max-len 2048]

Needs a local Hugging Face style directory (config.json + *.safetensors) and,
for perplexity, a pre-tokenized corpus (one sequence of ids per line).
Uses BLAS matmuls; expect tens of GB of RAM for 7B models in fp32.
"""

import argparse
import time

from superscope import tensor
from superscope.checkpoint import load_checkpoint, load_token_corpus
from superscope.detect import detect_super_weights, known_super_weights, trace_super_activation
from superscope.evaluate import perplexity, simulate_w8a8


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--model", help="directory key, e.g. llama-7b or mistral-7b-v0.1")
    ap.add_argument("--corpus")
    ap.add_argument("--max-len", type=int, default=2048)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()

    tensor.use_blas(True)
    t0 = time.time()
    spec, w, _ = load_checkpoint(args.checkpoint)
    print(f"loaded {spec.n_layers} layers in {time.time() - t0:.0f}s")
    found = detect_super_weights(spec, w)
    for r in found:
        print(f"detected layer {r.layer} {r.module} [{r.row}, {r.col}] = {r.value}")
    if args.model:
        known = {(r.layer, r.row, r.col) for r in known_super_weights().get(args.model, [])}
        got = {(r.layer, r.row, r.col) for r in found}
        print(f"published: {sorted(known)}; match: {known <= got}")
    if args.corpus and found:
        seqs = load_token_corpus(args.corpus, vocab=spec.vocab).sequences
        flat = [t for s in seqs for t in s]
        corpus = [flat[i:i + args.max_len] for i in range(0, len(flat), args.max_len)]
        sa, _ = trace_super_activation(spec, w, found[0])
        print(f"fp32 ppl        {perplexity(spec, w, corpus, threads=args.threads):.3f}")
        print(f"naive W8A8 ppl  {simulate_w8a8(spec, w, corpus, threads=args.threads):.3f}")
        print(f"W8A8 + SA ppl   {simulate_w8a8(spec, w, corpus, sa=sa, threads=args.threads):.3f}")


if __name__ == "__main__":
    main()
