import re
import subprocess
import sys

import numpy as np
import pytest

from conftest import KNOWN_WARP
from hessreg.cli import build_parser, run
from hessreg.volume_io import Volume, load_volume, save_volume


def _synth(tmp_path, *extra, name="a"):
    files = {k: tmp_path / f"{name}_{k}" for k in ("f.raw", "m.raw", "lf.txt", "lm.txt")}
    argv = [
        "synth", "--dims", "64", "--seed", "11",
        "--out-fixed", str(files["f.raw"]), "--out-moving", str(files["m.raw"]),
        "--out-lms", str(files["lf.txt"]), "--out-lms-moving", str(files["lm.txt"]), *extra,
    ]
    assert run(argv) == 0
    return files


def test_usage_errors(capsys):
    assert run([]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["mtre", "--bogus"]) == 2
    assert run(["register", "--fixed", "a"]) == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["register", "--help"])
    out = capsys.readouterr().out
    # option descriptions follow the usage block; each ends with its default
    body = " ".join(out[out.index("options:"):].split())
    for flag, default in [
        ("--sigma", "1.5"), ("--samples", "5000"), ("--population", "24"), ("--iterations", "200"),
        ("--crossover", "0.7"), ("--weight-min", "0.5"), ("--weight-max", "1.0"),
        ("--max-translation", "10.0"), ("--max-rotation", "5.0"), ("--max-shear", "0.05"),
        ("--max-scale", "0.05"), ("--termination", "0.002"), ("--metric", "hessian"),
    ]:
        m = re.search(re.escape(flag) + r" \S+ .*?\(default: ([^)]*)\)", body)
        assert m is not None and m.group(1) == default, flag


def test_runtime_error_exit_code(tmp_path, capsys):
    assert run(["bias", "--in", str(tmp_path / "missing.raw"), "--strength", "0.2", "--out", str(tmp_path / "o.raw")]) == 1
    assert "error" in capsys.readouterr().err


def test_mtre_identity_zero(tmp_path, capsys):
    f = _synth(tmp_path)
    assert run(["mtre", "--lms-fixed", str(f["lf.txt"]), "--lms-moving", str(f["lf.txt"])]) == 0
    assert "mean: 0.0000" in capsys.readouterr().out


def test_map_mismatched_grids(tmp_path, capsys):
    a = tmp_path / "a.raw"
    b = tmp_path / "b.raw"
    save_volume(Volume(np.ones((10, 10, 10))), a)
    save_volume(Volume(np.ones((10, 10, 12))), b)
    assert run(["map", "--fixed", str(a), "--moving", str(b), "--sigma", "1", "--out", str(tmp_path / "m.raw")]) == 1
    assert "grid" in capsys.readouterr().err


def test_map_and_bias(tmp_path, capsys):
    f = _synth(tmp_path)
    out = tmp_path / "map.raw"
    rc = run(["map", "--fixed", str(f["f.raw"]), "--moving", str(f["f.raw"]), "--sigma", "1.5",
              "--metric", "goa", "--out", str(out), "--pgm", str(tmp_path / "map")])
    assert rc == 0
    m = load_volume(out)
    assert m.dims == (64, 64, 64) and m.data.max() <= 1.0
    assert (tmp_path / "map_axial.pgm").exists()
    biased = tmp_path / "b.raw"
    assert run(["bias", "--in", str(f["f.raw"]), "--strength", "0.3", "--seed", "2", "--out", str(biased)]) == 0
    ratio = load_volume(biased).data / load_volume(f["f.raw"]).data
    assert ratio.min() >= 0.7 - 1e-6 and ratio.max() <= 1.3 + 1e-6


def test_synth_deterministic(tmp_path):
    a = _synth(tmp_path, "--noise", "0.01", "--bias", "0.3", name="a")
    b = _synth(tmp_path, "--noise", "0.01", "--bias", "0.3", name="b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
        if k.endswith(".raw"):
            assert a[k].with_suffix(".json").read_bytes() == b[k].with_suffix(".json").read_bytes()


@pytest.mark.slow
def test_end_to_end_registration(tmp_path, capsys):
    warp = [str(x) for x in KNOWN_WARP]
    f = _synth(tmp_path, "--noise", "0.01", "--bias", "0.3", "--warp", *warp)
    t, trace = tmp_path / "T.txt", tmp_path / "trace.csv"
    argv = ["--threads", "4", "register", "--fixed", str(f["f.raw"]), "--moving", str(f["m.raw"]),
            "--out", str(t), "--trace", str(trace)]
    assert run(argv) == 0
    out = capsys.readouterr().out
    assert "preprocess_time_s:" in out and "optimize_time_s:" in out
    assert run(["mtre", "--lms-fixed", str(f["lf.txt"]), "--lms-moving", str(f["lm.txt"]), "--transform", str(t)]) == 0
    mean = float(capsys.readouterr().out.split("mean:")[1].split()[0])
    assert mean < 1.0

    scatter = tmp_path / "scatter.csv"
    assert run(["trace-export", "--trace", str(trace), "--transform", str(t), "--lms-fixed", str(f["lf.txt"]),
                "--lms-moving", str(f["lm.txt"]), "--out", str(scatter)]) == 0
    assert len(scatter.read_text().splitlines()) == len(trace.read_text().splitlines())

    # same argv, same seed: identical text outputs whatever the thread count
    t2, trace2 = tmp_path / "T2.txt", tmp_path / "trace2.csv"
    argv2 = ["--threads", "1", "register", "--fixed", str(f["f.raw"]), "--moving", str(f["m.raw"]),
             "--out", str(t2), "--trace", str(trace2)]
    assert run(argv2) == 0
    assert t.read_bytes() == t2.read_bytes()
    assert trace.read_bytes() == trace2.read_bytes()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hessreg", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("hessreg ")
    r = subprocess.run([sys.executable, "-m", "hessreg", "nope"], capture_output=True, text=True)
    assert r.returncode == 2
