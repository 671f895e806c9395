import glob
import json
import os
import textwrap

import pytest

from mega_sim.cli import load_config, main

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return str(p)


def _run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def _data_files(directory):
    return {os.path.basename(p): open(p, "rb").read()
            for p in sorted(glob.glob(os.path.join(directory, "*")))
            if not p.endswith("manifest.json")}


SMALL_LDOS = """
experiment: ldos
model: {L: 4, U: 6.0}
source: {type: gibbs, kind: canonical, n: 4, beta: 1.0}
correlator: {i: 1, spin: down, eta: 0.2}
"""


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, "*.cfg"))))
def test_shipped_configs_validate(path, capsys):
    code, out, _ = _run(["validate", path], capsys)
    assert code == 0 and out.strip().endswith("ok")


def test_unknown_key_is_line_anchored(tmp_path, capsys):
    cfg = _write(tmp_path, """\
        experiment: spectrum
        model:
          L: 4
          U: 2.0
          colour: blue
        """)
    code, _, err = _run(["validate", cfg], capsys)
    assert code == 2
    assert f"{cfg}:5:" in err and "colour" in err


def test_type_error_is_line_anchored(tmp_path, capsys):
    cfg = _write(tmp_path, """\
        experiment: gibbs_fit
        model: {L: 4, U: 2.0}
        source:
          type: gibbs
          beta: hot
        """)
    code, _, err = _run(["validate", cfg], capsys)
    assert code == 2 and f"{cfg}:5:" in err and "source.beta" in err


def test_yaml_syntax_error(tmp_path, capsys):
    cfg = _write(tmp_path, "experiment: [spectrum\nmodel: {L: 4}\n")
    code, _, err = _run(["validate", cfg], capsys)
    assert code == 2 and "invalid YAML" in err


def test_semantic_errors(tmp_path, capsys):
    cfg = _write(tmp_path, """\
        experiment: greens
        model: {L: 4, U: 2.0}
        source: {type: gibbs, beta: 1.0}
        correlator: {i: 7, times: {dt: 0.1, horizon: 1.0}}
        """)
    code, _, err = _run(["validate", cfg], capsys)
    assert code == 2 and f"{cfg}:4:" in err and "site 7" in err
    cfg = _write(tmp_path, """\
        experiment: ldos
        model: {L: 4, U: 2.0}
        source: {type: gibbs, beta: 1.0, emin: 0.0}
        """)
    code, _, err = _run(["validate", cfg], capsys)
    assert code == 2 and "emin" in err


def test_empty_window_rejected_before_diagonalisation(tmp_path, capsys):
    cfg = _write(tmp_path, """\
        experiment: gibbs_fit
        model: {L: 4, U: 2.0}
        source: {type: window, n: 4, emin: 500.0, emax: 600.0}
        """)
    cache = tmp_path / "cache"
    code, _, err = _run(["run", cfg, "--cache-dir", str(cache), "--output", str(tmp_path / "o")], capsys)
    assert code == 2 and "spectral bounds" in err and f"{cfg}:3:" in err
    assert not cache.exists() or not list(cache.iterdir())


def test_resource_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, """\
        experiment: spectrum
        model: {L: 12, U: 2.0, boundary: open}
        sectors: [[6, 6]]
        """)
    code, _, err = _run(["run", cfg, "--output", str(tmp_path / "o"), "--cache-dir", str(tmp_path / "c")], capsys)
    assert code == 3 and "resource" in err


def test_gibbs_fit_selftest(tmp_path, capsys):
    cfg = os.path.join(CONFIG_DIR, "gibbs_fit_selftest.cfg")
    out = tmp_path / "selftest"
    code, _, _ = _run(["run", cfg, "--output", str(out), "--cache-dir", str(tmp_path / "c")], capsys)
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert abs(man["results"]["fit"]["beta"] - 1.0) < 1e-6
    assert abs(man["results"]["fit"]["mu"] - 1.5) < 1e-6
    assert man["status"] == "ok" and man["code_version"]
    assert set(man) >= {"config", "spectra_cache", "wall_time_s", "outputs"}


def test_rerun_is_byte_identical_and_cache_equivalent(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_LDOS)
    cache = str(tmp_path / "cache")
    runs = []
    for k, extra in enumerate([["--threads", "1"], ["--threads", "3"], []]):
        out = str(tmp_path / f"run{k}")
        code, _, _ = _run(["run", cfg, "--cache-dir", cache, "--output", out] + extra, capsys)
        assert code == 0
        runs.append(out)
    hits = [json.loads(open(os.path.join(r, "manifest.json")).read())["cache_hit"] for r in runs]
    assert hits == [False, True, True]
    cold = _data_files(runs[0])
    assert cold and cold == _data_files(runs[1]) == _data_files(runs[2])
    for line in cold["ldos.csv"].decode().splitlines()[1:50]:
        assert all(x == "%.17g" % float(x) for x in line.split(","))


def test_cache_dir_from_environment(tmp_path, capsys, monkeypatch):
    cfg = _write(tmp_path, SMALL_LDOS)
    monkeypatch.setenv("MEGA_SIM_CACHE", str(tmp_path / "envcache"))
    code, _, _ = _run(["run", cfg, "--output", str(tmp_path / "o")], capsys)
    assert code == 0 and list((tmp_path / "envcache").glob("spectrum_*.npz"))


def test_output_flag_overrides_config(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_LDOS + f"output: {tmp_path / 'from_config'}\n")
    code, _, _ = _run(["run", cfg, "--output", str(tmp_path / "flag"), "--cache-dir", str(tmp_path / "c")], capsys)
    assert code == 0 and (tmp_path / "flag" / "ldos.csv").exists()
    assert not (tmp_path / "from_config").exists()


def test_nonconverged_mega_exits_zero(tmp_path, capsys):
    cfg = _write(tmp_path, """\
        experiment: mega
        model: {L: 4, U: 3.0, t_prime: 0.4, u_prime: 0.7}
        source: {type: window, sectors: [[2, 2]], emin: 3.0, emax: 5.5}
        correlator: {family: density}
        fit: {convergence_threshold: 1.0e-300}
        """)
    out = tmp_path / "mega"
    code, stdout, _ = _run(["run", cfg, "--output", str(out), "--cache-dir", str(tmp_path / "c")], capsys)
    assert code == 0 and '"not_converged"' in stdout
    hist = json.loads((out / "mega_history.json").read_text())
    assert hist["status"] == "not_converged" and len(hist["history"]) > 1
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "not_converged"


def test_every_experiment_kind_runs(tmp_path, capsys):
    base = "model: {L: 4, U: 4.0}\n"
    cfgs = {
        "spectrum": "experiment: spectrum\nsectors: {n: 4}\n",
        "eth": "experiment: eth_scatter\nsectors: [[2, 2]]\nobservables: [H, {kind: local_density, site: 1, spin: up}]\n",
        "greens": ("experiment: greens\nsource: {type: eigenstate, sector: [2, 2], index: 3}\n"
                   "reference: gibbs_matched\ncorrelator: {times: {dt: 0.1, horizon: 4.0}, tail_model: exponential}\n"),
        "density": ("experiment: density_corr\nsource: {type: gibbs, kind: canonical, n: 4, beta: 0.5}\n"
                    "correlator: {i: 0, j: 1, times: {dt: 0.1, horizon: 2.0}}\n"),
        "trace": "experiment: trace_distance\nsource: {type: eigenstate, n: 4, temperature: 2.0}\n",
    }
    expected = {"spectrum": "spectrum.csv", "eth": "eth_scatter.csv", "greens": "greens_time.csv",
                "density": "density_spectrum.csv", "trace": "trace_distance.csv"}
    for name, body in cfgs.items():
        cfg = _write(tmp_path, base + body, f"{name}.cfg")
        out = tmp_path / name
        code, _, err = _run(["run", cfg, "--output", str(out), "--cache-dir", str(tmp_path / "c")], capsys)
        assert code == 0, err
        assert (out / expected[name]).exists()
    rows = (tmp_path / "trace" / "trace_distance.csv").read_text().splitlines()
    assert rows[0] == "subsystem_size,D" and len(rows) == 5
    d = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(a <= b + 1e-12 for a, b in zip(d, d[1:]))


def test_schema_command(capsys):
    code, out, _ = _run(["schema"], capsys)
    assert code == 0 and json.loads(out)["title"] == "mega-sim experiment"


def test_load_config_returns_mapping():
    cfg, _ = load_config(os.path.join(CONFIG_DIR, "fig4.cfg"))
    assert cfg["model"]["L"] == 6 and cfg["experiment"] == "eth_scatter"
