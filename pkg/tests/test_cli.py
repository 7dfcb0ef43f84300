import copy
import json
import math
import subprocess
import sys

import pytest

from mvdelay import __version__
from mvdelay.cli import main, threads_from
from mvdelay.experiments import spec_hash


def scenario(model, initial, grid=None, n=50, seed=4242):
    return {"grid": grid or {"h": 0.01, "delay_steps": 0, "horizon_steps": 100},
            "model": model, "n_particles": n, "initial": initial, "seed": seed}


OU = {"name": "ou", "params": {"a": 2.0}, "constants": {"K1": 0.0, "K2": 2.0, "K3": 6.0}, "beta": 1.0}
ZERO = {"name": "zero", "beta": 0.0}
POINT0 = {"name": "point", "params": {"value": 0.0}}
POINT1 = {"name": "point", "params": {"value": 1.0}}


def run(tmp_path, command, cfg, *extra, name="cfg.json", out="out"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    code = main([command, "--config", str(path), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def summary(out, name="summary.json"):
    return json.loads((out / name).read_text())


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1].split(","), [line.split(",") for line in lines[2:]]


def test_simulate_outputs_and_format(tmp_path):
    cfg = {"scenario": scenario(OU, {"name": "gaussian", "params": {"std": 0.5}},
                                grid={"h": 0.01, "delay_steps": 3, "horizon_steps": 20}),
           "experiment": {"record_every": 5, "snapshot_every": 10}}
    code, out = run(tmp_path, "simulate", cfg)
    assert code == 0
    comment, header, rows = read_csv(out / "trace.csv")
    assert comment == f"# mvdelay {__version__} spec_sha256={spec_hash(cfg)}"
    assert header == ["step", "time", "second_gamma_moment"]
    assert [r[0] for r in rows] == ["0", "5", "10", "15", "20"]
    mantissa = rows[1][1].split("e")[0]
    assert len(mantissa.replace("-", "").replace(".", "")) == 17
    doc = summary(out)
    assert doc["version"] == __version__ and doc["spec_sha256"] == spec_hash(cfg)
    assert doc["passed"] is True and doc["kind"] == "simulate"
    snaps = doc["result"]["snapshots"]
    assert snaps["format_version"] == 1
    assert [s["step"] for s in snaps["items"]] == [0, 10, 20]
    assert len(snaps["items"][0]["segments"]) == 50


def test_reruns_are_byte_identical(tmp_path):
    cfg = {"scenario": scenario(OU, {"name": "gaussian", "params": {"std": 0.5}}, n=30),
           "experiment": {"kind": "contract_sync", "initial_other": POINT1, "n_reference": 30}}
    run(tmp_path, "contract", cfg, out="a")
    run(tmp_path, "contract", cfg, out="b")
    for name in ("contract.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_and_thread_count_do_not_leak(tmp_path, monkeypatch):
    cfg = {"scenario": scenario(OU, {"name": "gaussian", "params": {"std": 0.5}}, n=20)}
    run(tmp_path, "simulate", cfg, out="base")
    run(tmp_path, "simulate", cfg, "--threads", "4", out="threads")
    monkeypatch.setenv("MVDELAY_THREADS", "3")
    run(tmp_path, "simulate", cfg, out="env")
    run(tmp_path, "simulate", cfg, "--seed", "7", out="seeded")
    base = (tmp_path / "base" / "trace.csv").read_bytes()
    assert (tmp_path / "threads" / "trace.csv").read_bytes() == base
    assert (tmp_path / "env" / "trace.csv").read_bytes() == base
    assert (tmp_path / "seeded" / "trace.csv").read_bytes() != base


def test_threads_env_overrides_flag(monkeypatch):
    monkeypatch.delenv("MVDELAY_THREADS", raising=False)
    assert threads_from(None) == 1 and threads_from(6) == 6
    monkeypatch.setenv("MVDELAY_THREADS", "2")
    assert threads_from(6) == 2


def test_contract_identical_laws_have_zero_distance(tmp_path):
    cfg = {"scenario": scenario(OU, {"name": "gaussian", "params": {"std": 0.5}}, n=40),
           "experiment": {"kind": "contract_sync", "n_reference": 40}}
    code, out = run(tmp_path, "contract", cfg)
    res = summary(out)["result"]
    assert code == 0
    assert res["initial_distance"] == 0 and res["final_distance"] == 0
    assert res["fitted_rate"] is None and res["fit_status"] == "undefined"
    _, header, rows = read_csv(out / "contract.csv")
    col = header.index("coupled_sup_w2")
    assert all(float(r[col]) == 0.0 for r in rows)


def test_contract_linear_ou_rate(tmp_path):
    cfg = {"scenario": scenario(OU, POINT0, n=20),
           "experiment": {"kind": "contract_sync", "initial_other": POINT1, "n_reference": 20}}
    code, out = run(tmp_path, "contract", cfg)
    res = summary(out)["result"]
    assert code == 0 and res["bound_violations"] == 0
    assert res["fitted_rate"] == pytest.approx(2.0, rel=0.1)
    assert res["monotone_after_burn_in"]


def test_contract_reflect_small_run(tmp_path):
    model = {"name": "double_well",
             "params": {"kernel": {"name": "linear_kernel", "kappa": 0.005},
                        "sigma": {"name": "linear_state_sigma", "scale": math.sqrt(0.02)}},
             "constants": {"K1": 2, "K2": 2, "K3": 1, "Ksigma": 0.01, "Kb": 0.01, "R": 1}, "beta": 1.0}
    cfg = {"scenario": scenario(model, {"name": "gaussian", "params": {"mean": -1.0, "std": 0.3}},
                                grid={"h": 0.01, "delay_steps": 10, "horizon_steps": 200}, n=200),
           "experiment": {"kind": "contract_reflect", "n_reference": 200, "epsilon": 1e-3,
                          "initial_other": {"name": "gaussian", "params": {"mean": 1.0, "std": 0.3}}}}
    code, out = run(tmp_path, "contract", cfg)
    res = summary(out)["result"]
    assert code == 0
    assert res["hypothesis_holds"] and res["mixing_residual_max"] <= 1e-12
    assert res["reflection_variant"] == "maximal"
    assert res["final_distance"] < res["initial_distance"]


def test_chaos_without_interaction_is_exact(tmp_path):
    cfg = {"scenario": scenario(OU, {"name": "gaussian", "params": {"std": 0.5}},
                                grid={"h": 0.01, "delay_steps": 2, "horizon_steps": 20}, n=16),
           "experiment": {"N": [4, 8, 16], "n_reference": 32, "particle_budget": 64}}
    code, out = run(tmp_path, "chaos", cfg)
    assert code == 0
    _, header, rows = read_csv(out / "chaos.csv")
    assert header == ["N", "replicas", "coupled_gamma_w1", "se"]
    assert [float(r[2]) for r in rows] == [0.0, 0.0, 0.0]
    assert summary(out)["result"]["slope"] is None


def test_chaos_needs_three_sizes(tmp_path):
    cfg = {"scenario": scenario(OU, POINT0), "experiment": {"N": [4, 8]}}
    assert run(tmp_path, "chaos", cfg)[0] == 1


def test_moments_zero_dynamics(tmp_path):
    cfg = {"scenario": scenario(ZERO, POINT0)}
    code, out = run(tmp_path, "moments", cfg)
    assert code == 0
    _, _, rows = read_csv(out / "moments.csv")
    assert all(float(r[2]) == 0.0 for r in rows)
    assert summary(out)["result"]["relative_growth"] == 0.0


def test_moments_failed_check_exits_2(tmp_path):
    cfg = {"scenario": scenario(OU, POINT0, n=200), "experiment": {"stationary_moment": 5.0}}
    code, out = run(tmp_path, "moments", cfg)
    assert code == 2
    doc = summary(out)
    assert doc["passed"] is False and doc["result"]["stationary_check"] is False


GIRSANOV_MODEL = {"name": "ou", "params": {"a": 1.0, "kernel": {"name": "linear_kernel", "kappa": 0.2},
                                           "sigma": {"name": "moment_sigma", "scale": 0.3}},
                  "constants": {"K1": 0.5, "K2": 0.5, "K3": 1, "Kb": 0.4}, "beta": 1.0, "mode": "theorem2"}


def test_girsanov_degenerate(tmp_path):
    cfg = {"scenario": scenario(GIRSANOV_MODEL, {"name": "gaussian", "params": {"std": 0.3}},
                                grid={"h": 0.02, "delay_steps": 5, "horizon_steps": 25}, n=50),
           "experiment": {"t0": 0.5, "n_replicas": 300, "n_reference": 50, "pairing": "optimal"}}
    code, out = run(tmp_path, "girsanov", cfg)
    assert code == 0
    res = summary(out, "girsanov.json")["result"]
    assert res["entropy_bound"]["mean"] == 0.0
    assert res["E_R"] == {"mean": 1.0, "se": 0.0}
    assert res["endpoint_residual_max"] < 1e-10
    assert (out / "girsanov_paths.csv").exists()


def test_rates_exit_codes(tmp_path):
    model = {"name": "double_well", "params": {"sigma": {"name": "linear_state_sigma", "scale": 0.1}},
             "constants": {"K1": 2, "K2": 2, "K3": 1, "Ksigma": 0.005, "Kb": 0.01, "R": 1}}
    grid = {"h": 0.01, "delay_steps": 10, "horizon_steps": 1}
    ok = {"scenario": scenario(model, POINT0, grid=grid)}
    code, out = run(tmp_path, "rates", ok)
    assert code == 0
    res = summary(out, "rates.json")["result"]
    assert res["conditions"]["kb_kd1"] and res["lambda"] > 0
    bad = copy.deepcopy(ok)
    bad["scenario"]["model"]["constants"]["Kb"] = 100.0
    code, out = run(tmp_path, "rates", bad, out="bad")
    assert code == 2
    res = summary(out, "rates.json")["result"]
    assert res["lambda"] < 0 and not res["contractive"]


@pytest.mark.parametrize("mutate", [
    lambda c: c["scenario"]["model"].update(name="quartic"),
    lambda c: c.pop("scenario"),
    lambda c: c.setdefault("experiment", {}).update(kind="contract_other"),
    lambda c: c.setdefault("experiment", {}).update(n_reference=0),
])
def test_operational_errors_exit_1(tmp_path, mutate, capsys):
    cfg = {"scenario": scenario(OU, POINT0)}
    mutate(cfg)
    assert run(tmp_path, "contract", cfg)[0] == 1
    assert "mvdelay: error:" in capsys.readouterr().err


def test_missing_config_and_bad_seed(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    cfg = {"scenario": scenario(OU, POINT0)}
    assert run(tmp_path, "simulate", cfg, "--seed", "-1")[0] == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mvdelay", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
