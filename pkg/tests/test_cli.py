import csv
import json
import struct

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import scenario
from flowutil import FlowGeneratorSpec, build_dual_flow, build_flow_field, build_utility_field, default_grid, initial_utility, simulate_drivers
from flowutil.cli import main
from flowutil.config import ConfigError, ExperimentConfig, bundled_configs
from flowutil.container import ContainerError, field_to_csv, load_ensemble, load_field, read_container, save_ensemble, save_field

SMALL = """\
[run]
name = small
seed = 7
paths = 2000

[scenario]
drift = 0.1
volatility = 0.2
n_steps = 4
constraint = cone

[flow]
generator = linear
sources = asset:0
x_min = 0.01
x_max = 100.0
n_nodes = 21
time_stride = 2

[dual]
kind = {kind}
gamma = 0.5

[suites]
names = {suites}

[output]
directory = {out}
formats = json, csv
plots = false
"""


def write_cfg(tmp_path, suites="shape_audit, darboux", kind="constant", name="small.cfg", out="out"):
    path = tmp_path / name
    path.write_text(SMALL.format(suites=suites, kind=kind, out=tmp_path / out))
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.mark.parametrize("name", bundled_configs())
def test_bundled_configs_roundtrip(name):
    cfg = ExperimentConfig.from_file(name)
    text = cfg.to_text()
    again = ExperimentConfig.from_text(text)
    assert again == cfg
    assert again.to_text() == text
    assert again.config_hash == cfg.config_hash


def test_config_validation():
    base = SMALL.format(suites="darboux", kind="constant", out="x")
    with pytest.raises(ConfigError, match="unknown suite"):
        ExperimentConfig.from_text(base.replace("names = darboux", "names = darboux, astrology"))
    with pytest.raises(ConfigError, match="missing section"):
        ExperimentConfig.from_text(base.replace("[flow]", "[flo]"))
    with pytest.raises(ConfigError, match="time_stride"):
        ExperimentConfig.from_text(base.replace("time_stride = 2", "time_stride = 3"))
    with pytest.raises(ConfigError, match="unknown option"):
        ExperimentConfig.from_text(base.replace("names = darboux", "names = darboux\ndarboux.colour = red"))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(base.replace("volatility = 0.2", "volatility = 0.2, 0.1"))
    cfg = ExperimentConfig.from_text(base.replace("names = darboux", "names = darboux\ndarboux.ns = 4, 8"))
    assert cfg.suite_options("darboux") == {"ns": "4, 8"}
    commented = ExperimentConfig.from_text(base.replace("constraint = cone", "constraint = cone   ; homogeneous class"))
    assert commented.scenario.constraint_set.kind == "cone"


def test_unknown_suite_exits_2_before_simulation(tmp_path):
    cfg = write_cfg(tmp_path, suites="darboux, nonsense")
    result = invoke("run", cfg)
    assert result.exit_code == 2
    assert not (tmp_path / "out").exists()
    result = invoke("run", write_cfg(tmp_path, name="ok.cfg"), "--suite", "nonsense")
    assert result.exit_code == 2
    assert invoke("run", tmp_path / "missing.cfg").exit_code == 2


def test_empty_suite_list_writes_manifest_only(tmp_path):
    result = invoke("run", write_cfg(tmp_path, suites=""))
    assert result.exit_code == 0, result.output
    out = tmp_path / "out"
    assert (out / "manifest.json").exists()
    assert not list(out.glob("*.json"))[1:]  # the manifest is the only JSON
    assert not (out / "reports.csv").exists()
    assert json.loads((out / "manifest.json").read_text())["suites"] == {}


def test_two_suites_fan_out_and_reproduce(tmp_path):
    cfg = write_cfg(tmp_path)
    assert invoke("run", cfg).exit_code == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.glob("*.json")) == ["darboux.json", "manifest.json", "shape_audit.json"]
    with open(out / "reports.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["suite"] for r in rows} == {"darboux", "shape_audit"}
    manifest = json.loads((out / "manifest.json").read_text())
    doc = json.loads((out / "darboux.json").read_text())
    assert doc["config_hash"] == manifest["config_hash"] == rows[0]["config_hash"]
    assert manifest["exit_status"] == 0 and manifest["seed"] == 7
    first = {p.name: p.read_bytes() for p in out.glob("*.json") if p.name != "manifest.json"}
    first_csv = (out / "reports.csv").read_bytes()
    assert invoke("run", cfg).exit_code == 0
    for name, data in first.items():
        assert (out / name).read_bytes() == data
    assert (out / "reports.csv").read_bytes() == first_csv

    report = invoke("report", out)
    assert report.exit_code == 0 and "darboux: pass" in report.output


def test_report_rejects_mixed_configs(tmp_path):
    a = write_cfg(tmp_path, suites="shape_audit", name="a.cfg", out="a")
    assert invoke("run", a).exit_code == 0
    assert invoke("run", a, "--seed", "8", "--out", tmp_path / "b").exit_code == 0
    result = invoke("report", tmp_path / "a", tmp_path / "b")
    assert result.exit_code == 2
    assert "different configs" in result.output


def test_headless_plots(tmp_path):
    result = invoke("run", write_cfg(tmp_path, suites="shape_audit"), "--plots")
    assert result.exit_code == 0, result.output
    pngs = sorted((tmp_path / "out" / "plots").glob("*.png"))
    assert [p.name for p in pngs] == ["conjugate_overlay.png", "darboux_gap.png", "utility_fan.png"]
    assert all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)


def test_suite_failure_exits_1_and_names_case(tmp_path):
    result = invoke("run", write_cfg(tmp_path, suites="oc_check", kind="drifted"))
    assert result.exit_code == 1
    assert "FAILED suites: oc_check" in result.output
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["suites"] == {"oc_check": "fail"}
    assert any(name.startswith("X*Y[") for name in manifest["failing_cases"]["oc_check"])


def test_module_error_exits_3_with_failed_marker(tmp_path):
    path = write_cfg(tmp_path, suites="shape_audit", kind="modulated")
    path.write_text(path.read_text().replace("[dual]", "[dual]\naux_index = 4"))
    result = CliRunner().invoke(main, ["run", str(path)])
    assert result.exit_code == 3
    marker = (tmp_path / "out" / "FAILED").read_text()
    assert marker.startswith("duality: ConfigurationError at [dual]")
    assert (tmp_path / "out" / "config.cfg").exists()


def test_simulate_build_conjugate_subcommands(tmp_path):
    cfg = write_cfg(tmp_path)
    assert invoke("simulate", cfg).exit_code == 0
    ens = load_ensemble(tmp_path / "out" / "ensemble.fupe")
    assert ens.n_paths == 2000 and ens.n_steps == 4
    assert invoke("build", cfg, "--csv-paths", "2").exit_code == 0
    field = load_field(tmp_path / "out" / "field.fupe")
    assert field.U_values.shape == (2000, 3, 21)
    with open(tmp_path / "out" / "field.csv") as fh:
        header = fh.readline().strip()
        n_rows = sum(1 for _ in fh)
    assert header == "path,time,x,U,Ux" and n_rows == 2 * 3 * 21
    result = invoke("conjugate", cfg, "--t", "1.0", "--y", "0.5", "--y", "2.0")
    assert result.exit_code == 0
    doc = json.loads(result.output)
    np.testing.assert_allclose(doc["grid"], doc["via_flow"], rtol=1e-4)
    np.testing.assert_allclose(doc["grid"], doc["legendre"], atol=1e-6)
    assert invoke("configs").output.split() == bundled_configs()


def test_fupe_roundtrip(tmp_path):
    ens = simulate_drivers(scenario(n_steps=3), 17, seed=4)
    path = save_ensemble(ens, tmp_path / "e.fupe")
    head = path.read_bytes()[:16]
    assert struct.unpack("<4sIII", head) == (b"FUPE", 1, 17, 3)
    back = load_ensemble(path)
    for name in ("times", "drivers", "asset_paths", "deflator_paths", "aux_martingales"):
        assert getattr(back, name).tobytes() == getattr(ens, name).tobytes()
    assert back.scenario == ens.scenario and back.seed == 4

    grid = default_grid(0.1, 10, 9)
    flow = build_flow_field(FlowGeneratorSpec(), grid, ens)
    field = build_utility_field(flow, build_dual_flow("constant", initial_utility("power"), ens, grid))
    fpath = save_field(field, tmp_path / "f.fupe", {"config_hash": "abc"})
    loaded = load_field(fpath)
    assert loaded.U_values.tobytes() == field.U_values.tobytes()
    assert read_container(fpath)[1]["config_hash"] == "abc"
    np.testing.assert_allclose(loaded.evaluate(0, 2, grid[3]), field.evaluate(0, 2, grid[3]), rtol=1e-15)
    field_to_csv(field, tmp_path / "f.csv", [0])

    with pytest.raises(ContainerError):
        load_field(path)
    (tmp_path / "bad.fupe").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContainerError):
        read_container(tmp_path / "bad.fupe")


def test_ensemble_cache(tmp_path, monkeypatch):
    from flowutil.container import cached_ensemble

    monkeypatch.setenv("FLOWUTIL_CACHE", str(tmp_path / "cache"))
    calls = []

    def sim(sc, n, seed):
        calls.append(n)
        return simulate_drivers(sc, n, seed)

    a = cached_ensemble(scenario(n_steps=2), 10, 1, sim)
    b = cached_ensemble(scenario(n_steps=2), 10, 1, sim)
    assert calls == [10]
    assert a.asset_paths.tobytes() == b.asset_paths.tobytes()
