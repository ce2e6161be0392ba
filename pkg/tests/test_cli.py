import csv
import json
import subprocess
import sys

import pytest

from superscope.cli import main

PLANT = "1,5,9,100"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_detect_planted(tmp_path, capsys):
    code, _, _ = run(capsys, "detect", "--toy", "--plant", PLANT, "--output-dir", str(tmp_path))
    assert code == 0
    doc = json.loads((tmp_path / "superweights.json").read_text())
    assert doc["schema"] == "superweights.v1"
    assert [(r["layer"], r["row"], r["col"]) for r in doc["records"]] == [(1, 5, 9)]


def test_detect_unplanted_empty(tmp_path, capsys):
    code, _, _ = run(capsys, "detect", "--toy", "--output-dir", str(tmp_path))
    assert code == 0
    assert json.loads((tmp_path / "superweights.json").read_text())["records"] == []


def test_detect_partial_exit_code(tmp_path, capsys):
    code, _, _ = run(capsys, "detect", "--toy", "--plant", PLANT, "--max-iters", "1",
                     "--spike-ratio", "1.01", "--input-ratio", "1.01", "--output-dir", str(tmp_path))
    assert code == 2
    assert json.loads((tmp_path / "superweights.json").read_text())["partial"] is True


def test_bad_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "detect", "--checkpoint", str(tmp_path / "missing"))
    assert code == 1 and "config" in err


@pytest.mark.parametrize("argv", [
    ["detect"],
    ["detect", "--toy", "--checkpoint", "x"],
    ["quantize", "--toy", "--restore-sw", "--no-restore"],
    ["intervene", "--toy", "--zero-sw", "--scale-sw", "2"],
    ["eval", "--toy", "--restore-sa"],
    ["detect", "--toy", "--plant", "1,2"],
    ["frobnicate"],
])
def test_usage_errors(capsys, argv):
    with pytest.raises(SystemExit) as e:
        code = main(argv)
        raise SystemExit(code)
    assert e.value.code == 64


def test_trace_csv(tmp_path, capsys):
    code, _, _ = run(capsys, "trace", "--toy", "--plant", PLANT, "--format", "csv", "--output-dir", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == 4
    mags = [abs(float(r["value"])) for r in rows]
    assert max(range(4), key=mags.__getitem__) == 1
    sa = list(csv.DictReader(open(tmp_path / "super_activation.csv")))
    assert {r["channel"] for r in sa} == {"5"}


def test_scale_one_then_eval_is_bit_exact(tmp_path, capsys):
    _, base, _ = run(capsys, "eval", "--toy", "--plant", PLANT)
    code, _, _ = run(capsys, "intervene", "--toy", "--plant", PLANT, "--scale-sw", "1.0", "--output-dir", str(tmp_path))
    assert code == 0
    _, after, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "model"))
    assert base.strip().splitlines()[-1] == after.strip().splitlines()[-1]
    float(after.strip().splitlines()[-1])


def test_zero_sw_hurts(tmp_path, capsys):
    _, base, _ = run(capsys, "eval", "--toy", "--plant", PLANT)
    run(capsys, "intervene", "--toy", "--plant", PLANT, "--zero-sw", "--output-dir", str(tmp_path))
    _, after, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "model"))
    assert float(after.split()[-1]) > float(base.split()[-1])


def test_interventions_file(tmp_path, capsys):
    ivs = [{"kind": "zero_weight", "target": "layers.1.mlp.down_proj.weight", "index": [5, 9]},
           {"kind": "set_activation", "target": "down_proj_out", "index": [4, 5], "value": 24.0, "layer": 1}]
    f = tmp_path / "ivs.json"
    f.write_text(json.dumps(ivs))
    code, out, _ = run(capsys, "eval", "--toy", "--plant", PLANT, "--interventions", str(f))
    assert code == 0 and float(out.split()[-1]) > 1
    code, _, _ = run(capsys, "intervene", "--toy", "--plant", PLANT, "--interventions", str(f),
                     "--output-dir", str(tmp_path / "o"))
    assert code == 0
    kept = json.loads((tmp_path / "o" / "model" / "interventions.json").read_text())
    assert len(kept) == 2
    _, again, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "o" / "model"))
    assert again.split()[-1] == out.split()[-1]
    f.write_text("{not json")
    assert run(capsys, "eval", "--toy", "--interventions", str(f))[0] == 1


def test_quantize_restore_beats_rtn(tmp_path, capsys):
    plant = "1,5,9,2"
    ppl = {}
    for flag in ("--restore-sw", "--no-restore"):
        d = tmp_path / flag.strip("-")
        code, _, _ = run(capsys, "quantize", "--toy", "--plant", plant, "--bits", "4", "--block", "64x64",
                         flag, "--output-dir", str(d))
        assert code == 0
        _, out, _ = run(capsys, "eval", "--checkpoint", str(d / "model"))
        ppl[flag] = float(out.split()[-1])
    assert ppl["--restore-sw"] < ppl["--no-restore"]


def test_quantize_sweep_report(tmp_path, capsys):
    code, _, _ = run(capsys, "quantize", "--toy", "--plant", "1,5,9,2", "--sweep", "8x8,per_tensor",
                     "--format", "csv", "--output-dir", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "quant_eval.csv")))
    assert [r["block"] for r in rows] == ["8x8", "per_tensor"]
    assert set(rows[0]) == {"scheme", "block", "bits", "ppl", "mse"}
    assert not (tmp_path / "model").exists()


def test_eval_extras(tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--toy", "--plant", PLANT, "--sensitivity", "0,1", "--stopwords", "0,1,2",
                       "--output-dir", str(tmp_path))
    assert code == 0
    sens = json.loads((tmp_path / "sensitivity.json").read_text())["records"]
    assert sens[1]["quality"] == float(out.split()[-1])
    assert sens[0]["quality"] > sens[1]["quality"]
    shift = json.loads((tmp_path / "stopword_shift.json").read_text())
    assert all(r["ratio"] == 1.0 for r in shift["records"])


def test_w8a8_eval(capsys):
    _, a, _ = run(capsys, "eval", "--toy", "--plant", PLANT, "--w8a8")
    _, b, _ = run(capsys, "eval", "--toy", "--plant", PLANT, "--w8a8", "--restore-sa")
    assert float(a.split()[-1]) > 1 and float(b.split()[-1]) > 1


def test_dry_run_does_nothing(tmp_path, capsys):
    for sub in ("detect", "trace", "quantize", "eval"):
        code, out, _ = run(capsys, sub, "--toy", "--dry-run", "--output-dir", str(tmp_path / sub))
        assert code == 0
        cfg = json.loads(out)
        assert cfg["subcommand"] == sub and cfg["toy_seed"] == 0
        assert not (tmp_path / sub).exists()
    code, out, _ = run(capsys, "report", "--directory", "--dry-run")
    assert json.loads(out)["subcommand"] == "report"


def test_reports_byte_identical_and_thread_independent(tmp_path, capsys, monkeypatch):
    outs = []
    for i, threads in enumerate(("1", "3")):
        monkeypatch.setenv("SUPERSCOPE_THREADS", threads)
        d = tmp_path / str(i)
        run(capsys, "detect", "--toy", "--plant", PLANT, "--output-dir", str(d))
        run(capsys, "quantize", "--toy", "--plant", "1,5,9,2", "--sweep", "8x8,64x64", "--output-dir", str(d))
        outs.append([(d / n).read_bytes() for n in ("superweights.json", "quant_eval.json")])
    assert outs[0] == outs[1]


def test_report_convert_and_directory(tmp_path, capsys):
    run(capsys, "detect", "--toy", "--plant", PLANT, "--output-dir", str(tmp_path))
    code, out, _ = run(capsys, "report", str(tmp_path / "superweights.json"), "--format", "csv",
                       "--output-dir", str(tmp_path / "conv"))
    assert code == 0 and "superweights.v1" in out
    assert (tmp_path / "conv" / "superweights.csv").read_text().startswith("layer,module,row,col,value")
    code, out, _ = run(capsys, "report", "--directory", "--model", "llama-7b")
    assert code == 0 and "3968" in out and "7003" in out
    assert run(capsys, "report", "--directory", "--model", "gpt-9")[0] == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "superscope.cli", "eval", "--toy", "--seed", "3"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0
    float(proc.stdout.strip().splitlines()[-1])
    proc = subprocess.run([sys.executable, "-m", "superscope.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "quantize" in proc.stdout
