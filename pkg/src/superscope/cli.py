"""superscope command line.

Exit codes: 0 ok, 1 input error, 2 partial detection, 64 usage error.
All output paths are relative to --output-dir.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import detect as D
from . import evaluate as E
from .checkpoint import (
    CheckpointError,
    Report,
    load_checkpoint,
    load_token_corpus,
    read_report,
    report_json,
    save_checkpoint,
    write_report,
)
from .model import Intervention, InterventionError, apply_weight_interventions, forward, make_toy_model, toy_corpus
from .quant import parse_block

EXIT_OK, EXIT_INPUT, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2, 64
SWEEP_BLOCKS = "8x8,64x64,512x512,per_tensor"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    subcommand: str
    checkpoint: str | None = None
    toy_seed: int | None = None
    toy_plant: list | None = None
    output_dir: str = "."
    format: str = "json"
    threads: int | None = None
    scheme: dict = field(default_factory=dict)
    interventions: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


# ------------------------------------------------------------------ parsing

def _ints(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} comma-separated values")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what}: expected integers, got {text!r}") from None


def _plant(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("--plant needs layer,row,col,magnitude")
    try:
        return [int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --plant {text!r}") from None


def _coord(text: str):
    return _ints(text, 3, "coordinate")


def _id_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integer ids, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _block(text: str):
    try:
        return parse_block(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad block {text!r}; use RxC or per_tensor") from None


def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    if model:
        src = p.add_argument_group("model source (exactly one)")
        src.add_argument("--toy", action="store_true", help="use the random toy model")
        src.add_argument("--checkpoint", help="directory with config.json and *.safetensors")
        p.add_argument("--seed", type=int, default=0, help="toy model seed (default 0)")
        p.add_argument("--plant", type=_plant, help="plant a super weight: layer,row,col,magnitude")
        p.add_argument("--prompt", type=_id_list, help="detection/trace prompt token ids")
        p.add_argument("--corpus", help="token-id corpus file (one sequence per line)")
        p.add_argument("--corpus-binary", action="store_true", help="corpus is a raw int32 stream")
    p.add_argument("--output-dir", default=".", help="directory for all outputs (default .)")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    p.add_argument("--threads", type=int, help="cap worker threads (env SUPERSCOPE_THREADS)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved RunConfig and exit")


def _sw_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sw", type=_coord, action="append",
                   help="super weight layer,row,col in down_proj (repeatable; default: detect)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="superscope", description="Super weight detection, ablation and quantization on CPU.")
    sub = ap.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="find super weights (writes superweights report)")
    _common(p)
    p.add_argument("--spike-ratio", type=float, default=50.0)
    p.add_argument("--input-ratio", type=float, default=5.0)
    p.add_argument("--max-iters", type=int, default=10)

    p = sub.add_parser("trace", help="per-layer down_proj maxima and super activation trace")
    _common(p)
    _sw_flags(p)
    p.add_argument("--site", choices=("down_proj_in", "down_proj_out", "post_block"), default="down_proj_out")

    p = sub.add_parser("intervene", help="write an edited model directory")
    _common(p)
    _sw_flags(p)
    p.add_argument("--zero-sw", action="store_true", help="zero the super weights")
    p.add_argument("--scale-sw", type=float, metavar="FACTOR", help="scale the super weights")
    p.add_argument("--interventions", metavar="FILE", help="JSON list of interventions")

    p = sub.add_parser("quantize", help="weight-only RTN, optionally with clip and SW restore")
    _common(p)
    _sw_flags(p)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--block", type=_block, default=(64, 64), help="RxC or per_tensor (default 64x64)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--restore-sw", dest="restore", action="store_true", default=True,
                   help="z-clip and restore super weights (default)")
    g.add_argument("--no-restore", dest="restore", action="store_false", help="plain RTN")
    p.add_argument("--z", type=float, help="fixed clip z (default: tuned per tensor)")
    p.add_argument("--calib", action="store_true", help="tune z on layer outputs over the corpus")
    p.add_argument("--sweep", nargs="?", const=SWEEP_BLOCKS, metavar="BLOCKS",
                   help=f"evaluate every block size (default {SWEEP_BLOCKS}); no model is written")

    p = sub.add_parser("eval", help="corpus perplexity; prints it as the last line")
    _common(p)
    _sw_flags(p)
    p.add_argument("--interventions", metavar="FILE", help="JSON list of interventions to apply")
    p.add_argument("--w8a8", action="store_true", help="simulate W8A8 fake quantization")
    p.add_argument("--restore-sa", action="store_true", help="hold out the super activation (with --w8a8)")
    p.add_argument("--bits", type=int, default=8, help="W/A bits for --w8a8")
    p.add_argument("--sensitivity", type=_float_list, metavar="FACTORS",
                   help="also sweep SW scale factors (writes sensitivity report)")
    p.add_argument("--stopwords", type=_id_list, metavar="IDS",
                   help="also report next-token probability shift of these ids")

    p = sub.add_parser("report", help="print or convert reports; list known super weights")
    _common(p, model=False)
    p.add_argument("inputs", nargs="*", help="report files to convert")
    p.add_argument("--directory", action="store_true", help="list shipped super weight coordinates")
    p.add_argument("--model", help="filter --directory by model name")
    return ap


# ------------------------------------------------------------------ config

def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(args.subcommand, output_dir=args.output_dir, format=args.format, threads=args.threads)
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.subcommand != "report":
        if args.toy == (args.checkpoint is not None):
            raise UsageError("give exactly one of --toy or --checkpoint")
        if args.checkpoint is not None:
            if args.plant is not None:
                raise UsageError("--plant only applies to --toy")
            cfg.checkpoint = args.checkpoint
        else:
            cfg.toy_seed = args.seed
            cfg.toy_plant = args.plant
        opts = {"prompt": list(args.prompt) if args.prompt else list(D.DEFAULT_PROMPT)}
        if args.corpus:
            opts["corpus"] = args.corpus
            opts["corpus_binary"] = args.corpus_binary
        if getattr(args, "sw", None):
            opts["sw"] = [list(c) for c in args.sw]
        cfg.options = opts
    sub = args.subcommand
    if sub == "detect":
        cfg.options.update(spike_ratio=args.spike_ratio, input_ratio=args.input_ratio, max_iters=args.max_iters)
    elif sub == "trace":
        cfg.options["site"] = args.site
    elif sub == "intervene":
        chosen = [args.zero_sw, args.scale_sw is not None, args.interventions is not None]
        if sum(chosen) != 1:
            raise UsageError("intervene needs exactly one of --zero-sw, --scale-sw, --interventions")
        cfg.interventions = _flag_interventions(args)
    elif sub == "quantize":
        if not 2 <= args.bits <= 8:
            raise UsageError("--bits must be in [2, 8]")
        if not args.restore and (args.z is not None or args.calib):
            raise UsageError("--z/--calib only apply with --restore-sw")
        if args.z is not None and args.calib:
            raise UsageError("--z and --calib conflict")
        blocks = [args.block]
        if args.sweep is not None:
            try:
                blocks = [parse_block(b) for b in args.sweep.split(",")]
            except ValueError:
                raise UsageError(f"bad --sweep list {args.sweep!r}") from None
        cfg.scheme = {
            "bits": args.bits,
            "blocks": [None if b is None else list(b) for b in blocks],
            "restore_sw": args.restore,
            "z": args.z,
            "calib": args.calib,
            "sweep": args.sweep is not None,
        }
    elif sub == "eval":
        if args.restore_sa and not args.w8a8:
            raise UsageError("--restore-sa requires --w8a8")
        if args.w8a8 and (args.sensitivity or args.stopwords):
            raise UsageError("--w8a8 cannot be combined with --sensitivity or --stopwords")
        if not 2 <= args.bits <= 8:
            raise UsageError("--bits must be in [2, 8]")
        if args.w8a8:
            cfg.scheme = {"w8a8": True, "bits": args.bits, "restore_sa": args.restore_sa}
        cfg.interventions = _flag_interventions(args) if args.interventions else []
        if args.sensitivity is not None:
            cfg.options["sensitivity"] = args.sensitivity
        if args.stopwords is not None:
            cfg.options["stopwords"] = args.stopwords
    elif sub == "report":
        if args.directory == bool(args.inputs):
            raise UsageError("give report files or --directory, not both or neither")
        cfg.options = {"inputs": list(args.inputs), "directory": args.directory, "model": args.model}
    return cfg


def _flag_interventions(args) -> list[dict]:
    if getattr(args, "interventions", None):
        try:
            data = json.loads(Path(args.interventions).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read interventions file: {e}") from None
        if not isinstance(data, list):
            raise CheckpointError("interventions file must hold a JSON list")
        return [Intervention.from_dict(d).to_dict() for d in data]
    if args.zero_sw:
        return [{"sw_op": "zero"}]
    return [{"sw_op": "scale", "factor": args.scale_sw}]


# ----------------------------------------------------------------- running

@dataclass
class _Model:
    spec: object
    weights: object
    reference: object
    corpus: list
    source: dict
    activation_ivs: list


def _load(cfg: RunConfig) -> _Model:
    if cfg.checkpoint is None:
        plant = tuple(cfg.toy_plant) if cfg.toy_plant else None
        spec, w = make_toy_model(cfg.toy_seed, plant)
        source = {"toy_seed": cfg.toy_seed, "toy_plant": cfg.toy_plant}
        ivs = []
    else:
        spec, w, raw = load_checkpoint(cfg.checkpoint)
        source = {k: raw[k] for k in ("toy_seed", "toy_plant") if k in raw}
        path = Path(cfg.checkpoint) / "interventions.json"
        ivs = []
        if path.exists():
            ivs = [Intervention.from_dict(d) for d in json.loads(path.read_text()) if "kind" in d]
            ivs = [iv for iv in ivs if iv.is_activation]
    reference = None
    corpus = None
    if "toy_seed" in source:
        # toy models are scored against the unedited toy model's predictions
        plant = tuple(source["toy_plant"]) if source.get("toy_plant") else None
        _, reference = make_toy_model(source["toy_seed"], plant)
        corpus = toy_corpus(source["toy_seed"])
    if "corpus" in cfg.options:
        corpus = load_token_corpus(cfg.options["corpus"], cfg.options.get("corpus_binary", False), spec.vocab).sequences
    return _Model(spec, w, reference, corpus, source, ivs)


def _need_corpus(m: _Model) -> list:
    if not m.corpus:
        raise CheckpointError("a --corpus is required for checkpoint models")
    return m.corpus


def _sw_list(cfg: RunConfig, m: _Model) -> list[D.SuperWeightRecord]:
    if "sw" in cfg.options:
        out = []
        for layer, row, col in cfg.options["sw"]:
            rec = D.SuperWeightRecord(layer, D.DOWN_PROJ, row, col, 0.0)
            if rec.weight_name not in m.weights:
                raise CheckpointError(f"no tensor {rec.weight_name}")
            w = m.weights[rec.weight_name]
            if not (0 <= row < w.shape[0] and 0 <= col < w.shape[1]):
                raise CheckpointError(f"super weight {layer},{row},{col} out of range")
            out.append(D.SuperWeightRecord(layer, D.DOWN_PROJ, row, col, float(w[row, col])))
        return out
    return list(D.detect_super_weights(m.spec, m.weights, D.DetectionConfig(prompt=tuple(cfg.options["prompt"]))))


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.output_dir) / f"{name}.{cfg.format}"


def _emit(cfg: RunConfig, report: Report, name: str) -> Path:
    path = _out(cfg, name)
    write_report(report, path, cfg.format)
    return path


def cmd_detect(cfg: RunConfig) -> int:
    m = _load(cfg)
    o = cfg.options
    dcfg = D.DetectionConfig(o["spike_ratio"], o["max_iters"], tuple(o["prompt"]), o["input_ratio"])
    found = D.detect_super_weights(m.spec, m.weights, dcfg)
    path = _emit(cfg, Report.of("superweights.v1", found, partial=found.partial), "superweights")
    for r in found:
        print(f"layer {r.layer} {r.module} [{r.row}, {r.col}] = {r.value!r}")
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_PARTIAL if found.partial else EXIT_OK


def cmd_trace(cfg: RunConfig) -> int:
    m = _load(cfg)
    prompt = cfg.options["prompt"]
    _, taps = forward(m.spec, m.weights, prompt, taps=(cfg.options["site"],), interventions=m.activation_ivs)
    taps = sorted(taps, key=lambda r: r.layer)
    _emit(cfg, Report.of("trace-report.v1", taps, prompt=prompt), "trace")
    sws = _sw_list(cfg, m)
    if sws:
        sa, post = D.trace_super_activation(m.spec, m.weights, sws[0], prompt, m.activation_ivs)
        recs = [{"layer": sa.layer, "site": "down_proj_out", "token": sa.token, "channel": sa.channel, "value": sa.value}]
        recs += [{"layer": sa.layer + i, "site": "post_block", "token": sa.token, "channel": sa.channel, "value": v}
                 for i, v in enumerate(post)]
        _emit(cfg, Report.of("trace-report.v1", recs, prompt=prompt), "super_activation")
    for r in taps:
        print(f"layer {r.layer} {r.site} max |x| = {abs(r.value):.6g} at token {r.token} channel {r.channel}")
    return EXIT_OK


def _resolve_ivs(cfg: RunConfig, m: _Model) -> list[Intervention]:
    out = []
    for d in cfg.interventions:
        if "sw_op" in d:
            sws = _sw_list(cfg, m)
            factor = 0.0 if d["sw_op"] == "zero" else d["factor"]
            out += D.scale_interventions(sws, factor) if factor != 0.0 else [
                Intervention.zero_weight(s.weight_name, (s.row, s.col)) for s in sws]
        else:
            out.append(Intervention.from_dict(d))
    return out


def _save_model(cfg: RunConfig, m: _Model, weights, ivs: list[Intervention]) -> Path:
    target = Path(cfg.output_dir) / "model"
    save_checkpoint(target, m.spec, weights, extra=m.source)
    (target / "interventions.json").write_text(json.dumps([iv.to_dict() for iv in ivs], indent=1) + "\n")
    return target


def cmd_intervene(cfg: RunConfig) -> int:
    m = _load(cfg)
    ivs = _resolve_ivs(cfg, m)
    weights = apply_weight_interventions(m.weights, ivs)
    target = _save_model(cfg, m, weights, ivs)
    print(f"wrote {target} ({len(ivs)} interventions)")
    return EXIT_OK


def cmd_quantize(cfg: RunConfig) -> int:
    m = _load(cfg)
    corpus = _need_corpus(m)
    s = cfg.scheme
    blocks = [None if b is None else tuple(b) for b in s["blocks"]]
    sws = _sw_list(cfg, m) if s["restore_sw"] else []
    rows = E.blocksize_sweep(m.spec, m.weights, corpus, bits=s["bits"], blocks=blocks,
                             with_restore=s["restore_sw"], sw_list=sws,
                             calib=corpus if s["calib"] else None, z=s["z"],
                             reference=m.reference, threads=cfg.threads)
    _emit(cfg, Report.of("quant-eval.v1", rows), "quant_eval")
    if not s["sweep"]:
        acts = E.capture_linear_inputs(m.spec, m.weights, corpus) if s["calib"] else None
        qw, _ = E.quantize_weights(m.spec, m.weights, s["bits"], blocks[0], s["restore_sw"], sws, acts, s["z"])
        _save_model(cfg, m, qw, [])
    for r in rows:
        print(f"{r.scheme} {r.block} {r.bits}-bit ppl={r.ppl!r} mse={r.mse!r}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    m = _load(cfg)
    corpus = _need_corpus(m)
    ivs = m.activation_ivs + _resolve_ivs(cfg, m)
    weights = apply_weight_interventions(m.weights, ivs)
    act = [iv for iv in ivs if iv.is_activation]
    ref = m.reference
    if ref is not None:
        ref = E.reference_probs(m.spec, ref, corpus, cfg.threads)
    if cfg.options.get("stopwords") is not None:
        shift = D.stopword_shift(m.spec, m.weights, [cfg.options["prompt"]], cfg.options["stopwords"], ivs, cfg.threads)
        _emit(cfg, Report.of("stopword-shift.v1", shift.rows()), "stopword_shift")
    if cfg.options.get("sensitivity") is not None:
        sws = _sw_list(cfg, m)

        def quality(w):
            return E.perplexity(m.spec, w, corpus, reference=ref, interventions=act)

        pts = D.sensitivity_sweep(m.spec, weights, sws, cfg.options["sensitivity"], quality, cfg.threads)
        _emit(cfg, Report.of("sensitivity.v1", [{"factor": f, "quality": q} for f, q in pts]), "sensitivity")
    if cfg.scheme.get("w8a8"):
        if act:
            raise CheckpointError("activation interventions cannot be combined with --w8a8")
        sa = None
        if cfg.scheme["restore_sa"]:
            sws = _sw_list(cfg, m)
            if not sws:
                raise CheckpointError("--restore-sa: no super weight found")
            sa, _ = D.trace_super_activation(m.spec, weights, sws[0], cfg.options["prompt"])
        ppl = E.simulate_w8a8(m.spec, weights, corpus, sa=sa, bits=cfg.scheme["bits"], reference=ref,
                              threads=cfg.threads)
    else:
        ppl = E.perplexity(m.spec, weights, corpus, reference=ref, threads=cfg.threads, interventions=act)
    print(repr(ppl))
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    o = cfg.options
    if o["directory"]:
        directory = D.known_super_weights()
        if o["model"] is not None and o["model"] not in directory:
            raise CheckpointError(f"unknown model {o['model']!r}; known: {', '.join(sorted(directory))}")
        names = [o["model"]] if o["model"] else sorted(directory)
        for name in names:
            for r in directory[name]:
                print(f"{name}\tlayer {r.layer}\t{r.module}\t[{r.row}, {r.col}]")
        return EXIT_OK
    for inp in o["inputs"]:
        try:
            rep = read_report(inp)
        except (OSError, KeyError, ValueError) as e:
            raise CheckpointError(f"cannot read report {inp}: {e}") from None
        path = _out(cfg, Path(inp).stem)
        if path.resolve() == Path(inp).resolve():
            raise CheckpointError(f"refusing to overwrite {inp}")
        write_report(rep, path, cfg.format)
        print(report_json(rep), end="")
    return EXIT_OK


COMMANDS = {
    "detect": cmd_detect,
    "trace": cmd_trace,
    "intervene": cmd_intervene,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"superscope: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, InterventionError) as e:
        print(f"superscope: {e}", file=sys.stderr)
        return EXIT_INPUT
    if args.dry_run:
        print(cfg.to_json())
        return EXIT_OK
    try:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.subcommand](cfg)
    except (CheckpointError, InterventionError, OSError, ValueError, IndexError, KeyError) as e:
        print(f"superscope: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
