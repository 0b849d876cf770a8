import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from vpflow import cli
from vpflow.grid import DistanceField, GridGeometry, GridSet, perimeter
from vpflow.io import read_pgm, write_raw_field


def _run(capsys, *argv):
    code = cli.main(list(argv) + ["--quiet"])
    return code, capsys.readouterr().err


def _config(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# -- configuration -------------------------------------------------------------------


def test_read_config_text_comments_and_duplicates():
    raw = cli.read_config_text("h = 2  # step\n\n# only a comment\ndims = 8x8\n")
    assert raw == {"h": "2", "dims": "8x8"}
    with pytest.raises(cli.ConfigError, match="duplicate key 'h'"):
        cli.read_config_text("h = 1\nh = 2\n")
    with pytest.raises(cli.ConfigError, match=":1:"):
        cli.read_config_text("no equals sign\n")


def test_resolve_config_defaults_and_presets():
    cfg = cli.resolve_config({"preset": "fixed-disk", "n_max": "3"}, cli.RUN_KEYS, cli.RUN_PRESETS)
    assert cfg["dims"] == (128, 128) and cfg["h"] == 57.6 and cfg["n_max"] == 3
    assert cfg["spacing"] == 1.0 and cfg["stop_threshold"] is None
    with pytest.raises(cli.ConfigError, match="preset: unknown preset"):
        cli.resolve_config({"preset": "nope"}, cli.RUN_KEYS, cli.RUN_PRESETS)


@pytest.mark.parametrize(
    "raw,key",
    [
        ({"h": "-1"}, "h"),
        ({"h": "nan"}, "h"),
        ({"dims": "0,8"}, "dims"),
        ({"n_max": "many"}, "n_max"),
        ({"shape": "triangle"}, "shape"),
        ({"mask_file": "missing.pgm"}, "mask_file"),
    ],
)
def test_resolve_config_errors_name_the_key(raw, key):
    with pytest.raises(cli.ConfigError) as exc:
        cli.resolve_config(raw, cli.RUN_KEYS, cli.RUN_PRESETS)
    assert str(exc.value).startswith(f"{key}:")


def test_negative_h_exits_1_naming_key(tmp_path, capsys):
    cfg = _config(tmp_path, "preset = fixed-disk\nh = -1\n")
    code, err = _run(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR
    assert "h: must be positive (got '-1')" in err


def test_unknown_key_exits_1(tmp_path, capsys):
    cfg = _config(tmp_path, "preset = fixed-disk\ntimestep = 3\n")
    code, err = _run(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR and "unknown key 'timestep'" in err


def test_paths_resolve_relative_to_config(tmp_path, capsys):
    sub = tmp_path / "cfgdir"
    sub.mkdir()
    m = np.zeros((24, 24), np.uint8)
    m[8:16, 6:18] = 255
    (sub / "start.pgm").write_bytes(b"P5\n24 24\n255\n" + m.tobytes())
    cfg = _config(sub, "shape = mask-file\nmask_file = start.pgm\nh = 6\nn_max = 30\n")
    out = tmp_path / "o"
    code, _ = _run(capsys, "run", "--config", cfg, "--out", str(out))
    assert code == cli.EXIT_OK
    assert read_pgm(out / "final.pgm").volume == 96


# -- run ----------------------------------------------------------------------------


def test_run_fixed_disk_preset(tmp_path, capsys):
    out = tmp_path / "o"
    code, _ = _run(capsys, "run", "--preset", "fixed-disk", "--out", str(out))
    assert code == cli.EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"] and summary["steps"] <= 10
    assert summary["monotonicity_violations"] == [] and summary["summability_gap"] >= 0
    limit = json.loads((out / "limit.json").read_text())
    assert limit["L"] == 1 and limit["hausdorff_residual"] <= 2.0
    assert abs(limit["formula_L"] - 1) < 0.05 and "formula_L_printed" in limit
    for name in ("trace.csv", "components.csv", "events.json", "decay.json", "final.pgm"):
        assert (out / name).exists()


def test_run_not_converged_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, "dims = 64,64\nshape = ellipse\nsemi_axes = 20,10\nh = 20\nn_max = 2\n")
    code, _ = _run(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_NOT_CONVERGED
    rows = list(csv.DictReader(open(tmp_path / "o" / "trace.csv")))
    assert len(rows) == 3


def test_run_outputs_are_byte_identical(tmp_path, capsys):
    cfg = _config(tmp_path, "dims = 64,64\nshape = two-disks\nradius = 10\ngap = 2\nh = 30\nn_max = 8\nsnapshot_every = 4\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        _run(capsys, "run", "--config", cfg, "--out", str(o))
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert len(files) >= 8
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_run_tangent_disks_preset_merges(tmp_path, capsys):
    out = tmp_path / "o"
    code, _ = _run(capsys, "run", "--preset", "tangent-disks", "--out", str(out))
    assert code == cli.EXIT_OK
    assert json.loads((out / "limit.json").read_text())["L"] == 1


def test_empty_initial_set_rejected(tmp_path, capsys):
    cfg = _config(tmp_path, "dims = 16,16\nshape = disk\nradius = 0.1\nh = 1\n")
    code, err = _run(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR and "shape:" in err


# -- sphere ---------------------------------------------------------------------------


def test_sphere_halving_preset(tmp_path, capsys):
    out = tmp_path / "o"
    code, _ = _run(capsys, "sphere", "--preset", "halving", "--out", str(out))
    assert code == cli.EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["relative_change_last_two"] <= 0.1
    rows = list(csv.DictReader(open(out / "halving.csv")))
    assert len(rows) == 4 and float(rows[0]["eps"]) == 1e-3


def test_sphere_alexandrov_preset_is_byte_identical(tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert _run(capsys, "sphere", "--preset", "alexandrov", "--out", str(o))[0] == cli.EXIT_OK
    a = (outs[0] / "alexandrov.csv").read_bytes()
    assert a == (outs[1] / "alexandrov.csv").read_bytes()
    assert a.count(b"\n") == 101 and b"\r" not in a
    assert (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()


def test_sphere_sandwich_preset(tmp_path, capsys):
    out = tmp_path / "o"
    code, _ = _run(capsys, "sphere", "--preset", "sandwich", "--out", str(out))
    assert code == cli.EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["all_pass"] and s["pairs"] == 50 and s["concentric_relative_error"] < 0.02


def test_sphere_small_alexandrov_and_probe(tmp_path, capsys):
    cfg = _config(tmp_path, "preset = alexandrov\nl_max = 12\ntrials = 4\n")
    code, _ = _run(capsys, "sphere", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "a"))
    assert code == cli.EXIT_OK
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["all_finite"] and s["seed"] == 5 and s["trials"] == 4
    cfg = _config(tmp_path, "preset = probe\nN = 2\nl_max = 16\n", "p.cfg")
    code, _ = _run(capsys, "sphere", "--config", cfg, "--out", str(tmp_path / "p"))
    assert code == cli.EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "p" / "probe.csv")))
    assert [float(r["eps"]) for r in rows] == [1e-2, 1e-3]
    assert all(float(r["residual"]) <= 1e-6 for r in rows)


def test_sphere_degree_beyond_lmax(tmp_path, capsys):
    cfg = _config(tmp_path, "experiment = alexandrov\nl_max = 4\n")
    code, err = _run(capsys, "sphere", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR and "degree_max" in err


# -- oracle ---------------------------------------------------------------------------


@pytest.mark.parametrize("m", [0, 3, 9])
def test_oracle_agrees_with_solver(tmp_path, capsys, m):
    cfg = _config(tmp_path, f"dims = 5,5\nh = 1.5\nm_cells = {m}\nseed = 4\n")
    out = tmp_path / "o"
    code, _ = _run(capsys, "oracle", "--config", cfg, "--out", str(out))
    assert code == cli.EXIT_OK
    rep = json.loads((out / "oracle.json").read_text())
    assert len(rep["cells"]) == m
    assert all(1 <= i <= 3 and 1 <= j <= 3 for i, j in rep["cells"])
    if m == 0:
        assert rep["energy"] == 0.0 and "solver_agrees" not in rep
    else:
        assert rep["solver_agrees"] and rep["solver_energy"] == rep["energy"]
    assert read_pgm(out / "oracle_mask.pgm").volume == m


def test_oracle_full_block_energy(tmp_path, capsys):
    cfg = _config(tmp_path, "dims = 5,5\nh = 2\nm_cells = 9\nseed = 11\nd_scale = 0.5\n")
    _run(capsys, "oracle", "--config", cfg, "--out", str(tmp_path / "o"))
    rep = json.loads((tmp_path / "o" / "oracle.json").read_text())
    geo = GridGeometry((5, 5))
    d = 0.5 * np.random.default_rng(11).standard_normal((5, 5))
    block = np.zeros((5, 5), bool)
    block[1:4, 1:4] = True
    expect = perimeter(GridSet(geo, block)) + d[block].sum() / 2
    assert rep["energy"] == pytest.approx(expect, rel=1e-12)
    assert rep["n_candidates"] == 1


def test_oracle_distance_file(tmp_path, capsys):
    g = GridGeometry((4, 6))
    write_raw_field(tmp_path / "d.raw", DistanceField(g, np.arange(24.0).reshape(4, 6) - 10))
    cfg = _config(tmp_path, "d_kind = file\nd_file = d.raw\nm_cells = 2\n")
    code, _ = _run(capsys, "oracle", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_OK
    assert json.loads((tmp_path / "o" / "oracle.json").read_text())["solver_agrees"]


def test_oracle_too_large_exits_1(tmp_path, capsys):
    cfg = _config(tmp_path, "dims = 7,7\nm_cells = 4\n")
    code, err = _run(capsys, "oracle", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR and "free cells" in err


def test_oracle_has_no_presets(tmp_path, capsys):
    code, err = _run(capsys, "oracle", "--preset", "x", "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR and "no presets" in err


# -- decay ----------------------------------------------------------------------------


def test_decay_from_trace(tmp_path, capsys):
    lines = ["n,perimeter,volume,dissipation,lambda,eps_adj,n_components,min_gap", "0,10,5,0,0,0,2,3"]
    lines.append("1,9,5,4,0,0,2,1")
    for n in range(2, 20):
        lines.append(f"{n},8,5,{5 * 0.7**n!r},0,0,1,0")
    (tmp_path / "trace.csv").write_text("\n".join(lines) + "\n")
    cfg = _config(tmp_path, "trace = trace.csv\n")
    code, _ = _run(capsys, "decay", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_OK
    fit = json.loads((tmp_path / "o" / "decay.json").read_text())
    assert fit["rate"] == pytest.approx(0.7, rel=1e-12)
    # the count changes at step 2, so the tail starts one step later
    assert fit["tail_start"] == 3


def test_decay_rejects_non_trace(tmp_path, capsys):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    cfg = _config(tmp_path, "trace = x.csv\n")
    code, err = _run(capsys, "decay", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_ERROR and "trace:" in err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "vpflow.cli", "oracle", "--quiet", "--out", str(tmp_path)],
        input="",
        capture_output=True,
        text=True,
    )
    # m_cells has no default
    assert proc.returncode == cli.EXIT_ERROR and "m_cells: required" in proc.stderr
