import json
import shutil

import pytest

from canalshape.cli import EXIT_OK, EXIT_REFUSED, EXIT_USAGE, main
from canalshape.config import ConfigError, load_config, parse_config

TINY = {"membrane": [2, 4], "wall": [4, 4], "order": 2}
BUMP = {"kind": "canal", "bump": {"amplitude": 0.1}}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(capsys, *argv):
    code = main(["--log-level", "WARNING", *argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_config(work):
    doc = {"k": 1.0, "geometry": BUMP, "mesh": TINY, "noise_level": 0.01, "seed": 3,
           "excitations": [{"kind": "constant"}, {"kind": "gaussian-bump"}],
           "inverse": {"max_iters": 1, "truth": BUMP, "use_model_error": False}}
    return write(work / "tiny.json", doc)


@pytest.fixture(scope="module")
def synth_dir(work, tiny_config):
    out = work / "synth"
    assert main(["--log-level", "WARNING", "synth", "--config", tiny_config, "--out", str(out),
                 "--deterministic"]) == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
def test_missing_wavenumber_names_the_field(tmp_path):
    with pytest.raises(ConfigError, match=r"\bk\b"):
        load_config(write(tmp_path / "c.json", {"geometry": {"kind": "box"}}))


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="colour"):
        parse_config({"k": 1.0, "geometry": {"kind": "box"}, "colour": "red"})


def test_malformed_json_reports_the_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"k": 1.0,\n "geometry": }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(path)


def test_overrides_and_hash(tmp_path):
    doc = {"k": 1.0, "geometry": {"kind": "box"}}
    a = parse_config(doc)
    assert parse_config(doc, out="elsewhere").hash == a.hash
    b = parse_config(doc, seed=9, max_iters=3)
    assert b.seed == 9 and b.inverse.max_iters == 3 and b.hash != a.hash
    assert len(a.hash) == 16


def test_negative_noise_is_a_config_error():
    with pytest.raises(ConfigError, match="noise_level"):
        parse_config({"k": 1.0, "geometry": BUMP, "noise_level": -0.1})


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("k, code", [(0.9, EXIT_OK), (1.1, EXIT_REFUSED)])
def test_check_k_on_the_unit_cube(tmp_path, capsys, k, code):
    cfg = write(tmp_path / "c.json", {"k": k, "geometry": {"kind": "box"}})
    got, out, _ = run(capsys, "check-k", "--config", cfg, "--out", str(tmp_path / "o"))
    assert got == code
    assert "width d=1" in out
    report = json.loads((tmp_path / "o" / "check_k.json").read_text())
    assert report["report"]["admissible"] is (code == EXIT_OK)


def test_config_errors_exit_with_usage_status(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"geometry": {"kind": "box"}})
    code, _, err = run(capsys, "check-k", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == EXIT_USAGE and "k" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run(capsys, "check-k", "--config", str(bad))[0] == EXIT_USAGE


def test_missing_subcommand_exits_with_usage_status(capsys):
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == EXIT_USAGE


def test_synth_refuses_inadmissible_k(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"k": 2.0, "geometry": BUMP, "mesh": TINY})
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == EXIT_REFUSED and "--force" in err


# ---------------------------------------------------------------------------
# synth, invert, verify
# ---------------------------------------------------------------------------
def test_synth_outputs_carry_the_config_hash(synth_dir, tiny_config):
    h = load_config(tiny_config).hash
    names = {p.name for p in synth_dir.iterdir()}
    assert {"data_0.csv", "data_1.csv", "data_0.png", "synth.json", "truth_geometry.json",
            "synth.manifest.json", "synth.config.json"} <= names
    for p in synth_dir.iterdir():
        assert h.encode() in p.read_bytes(), p.name


def test_synth_is_byte_identical(work, tiny_config, synth_dir):
    again = work / "synth_again"
    assert main(["--log-level", "WARNING", "synth", "--config", tiny_config, "--out", str(again),
                 "--deterministic"]) == EXIT_OK
    for p in synth_dir.iterdir():
        assert (again / p.name).read_bytes() == p.read_bytes(), p.name


def test_excitations_share_the_truth_provenance(synth_dir):
    def provenance(path):
        for line in path.read_text().splitlines():
            if line.startswith("# provenance:"):
                return json.loads(line.split(":", 1)[1])
        raise AssertionError("no provenance header")

    a, b = provenance(synth_dir / "data_0.csv"), provenance(synth_dir / "data_1.csv")
    assert a["truth_geometry_hash"] == b["truth_geometry_hash"]
    assert a["seed"] != b["seed"]


def test_invert_end_to_end(work, tiny_config, synth_dir, capsys):
    out = work / "invert"
    data = [str(synth_dir / "data_0.csv"), str(synth_dir / "data_1.csv")]
    code, stdout, _ = run(capsys, "invert", "--config", tiny_config, "--out", str(out), *data)
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] <= 1
    assert summary["radial_error"] < 0.02
    assert summary["config_hash"] == load_config(tiny_config).hash
    for name in ("history.csv", "geometry.obj", "geometry.vtk", "history.png", "wall_offsets.png"):
        assert (out / name).exists()
    assert run(capsys, "verify", str(out))[0] == EXIT_OK


def test_zero_iterations(work, tiny_config, synth_dir, capsys):
    out = work / "invert0"
    code, stdout, _ = run(capsys, "invert", "--config", tiny_config, "--out", str(out),
                          "--max-iters", "0", str(synth_dir / "data_0.csv"))
    assert code == EXIT_OK and "after 0 iteration" in stdout
    assert json.loads((out / "summary.json").read_text())["iterations"] == 0


def test_invert_with_mismatched_mesh_is_a_usage_error(work, synth_dir, capsys):
    cfg = write(work / "other.json", {"k": 1.0, "geometry": BUMP, "mesh": {**TINY, "order": 3}})
    code, _, err = run(capsys, "invert", "--config", cfg, "--out", str(work / "x"),
                       str(synth_dir / "data_0.csv"))
    assert code == EXIT_USAGE and "mesh" in err


def test_invert_without_data_is_a_usage_error(work, tiny_config, capsys):
    assert run(capsys, "invert", "--config", tiny_config, "--out", str(work / "y"))[0] == EXIT_USAGE


def test_inverse_crime_is_refused_without_override(tmp_path, capsys):
    doc = {"k": 1.0, "geometry": BUMP, "mesh": {**TINY, "fine_factor": 1},
           "inverse": {"max_iters": 0, "use_model_error": False}}
    cfg = write(tmp_path / "c.json", doc)
    assert run(capsys, "synth", "--config", cfg, "--out", str(tmp_path / "s"))[0] == EXIT_REFUSED
    assert run(capsys, "synth", "--config", cfg, "--out", str(tmp_path / "s"),
               "--allow-inverse-crime")[0] == EXIT_OK
    data = str(tmp_path / "s" / "data_0.csv")
    code, _, err = run(capsys, "invert", "--config", cfg, "--out", str(tmp_path / "i"), data)
    assert code == EXIT_REFUSED and "inverse" in err.lower()
    assert run(capsys, "invert", "--config", cfg, "--out", str(tmp_path / "i"), data,
               "--allow-inverse-crime")[0] == EXIT_OK


def test_verify_detects_tampering(work, synth_dir, capsys):
    copy = work / "tampered"
    shutil.copytree(synth_dir, copy)
    assert run(capsys, "verify", str(copy))[0] == EXIT_OK
    with open(copy / "data_0.csv", "a") as fh:
        fh.write("\n")
    code, out, _ = run(capsys, "verify", str(copy))
    assert code == EXIT_REFUSED and "data_0.csv: digest mismatch" in out


def test_export(work, tiny_config, capsys):
    out = work / "export"
    code, _, _ = run(capsys, "export", "--config", tiny_config, "--out", str(out), "--name", "canal")
    assert code == EXIT_OK
    assert {"canal.obj", "canal.vtk", "canal.json"} <= {p.name for p in out.iterdir()}
    assert run(capsys, "verify", str(out))[0] == EXIT_OK


def test_forward(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"k": 1.0, "geometry": {"kind": "canal"}, "mesh": TINY})
    code, _, _ = run(capsys, "forward", "--config", cfg, "--out", str(tmp_path / "f"))
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "f" / "forward.json").read_text())
    assert doc["solves"][0]["residual"] < 1e-10
