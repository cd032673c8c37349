import csv
import json

import numpy as np
import pytest

from rdmediation.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ConfigError, main, resolve_config
from rdmediation.core import Schema, SubjectRecord, write_dataset

FACTORS = ["--factor", "age=lt65,ge65", "--factor", "sex=female,male"]
FAST = ["--lddp-iterations", "120", "--lddp-burn-in", "40", "--lddp-thin", "2", "--lddp-H", "8",
        "--aft-iterations", "200", "--aft-burn-in", "40", "--rd-draws", "100", "--grid-points", "60"]


def _dataset(path, n=600, seed=3, age_effect=-0.3, drop=None):
    rng = np.random.default_rng(seed)
    schema = Schema.from_dict({"age": ["lt65", "ge65"], "sex": ["female", "male"]})
    recs = []
    for _ in range(n):
        g, age, sex = int(rng.random() < 0.5), int(rng.integers(2)), int(rng.integers(2))
        if drop and g == 0 and (age, sex) == drop:
            g = 1
        m = rng.normal(27 + 2 * g + age, 3.5)
        lt = 7.5 - 0.5 * g + 0.03 * (m - 28) + 0.02 * g * (m - 28) + age_effect * age * g
        ts = np.exp(lt + 0.82 * np.log(-np.log(rng.random())))
        tc = min(rng.exponential(3000), 1826.25)
        recs.append(SubjectRecord(float(min(ts, tc)), bool(ts <= tc), g, float(m),
                                  (schema.factors[0].levels[age], schema.factors[1].levels[sex])))
    write_dataset(recs, path, schema)
    return path


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return _dataset(tmp_path_factory.mktemp("d") / "subjects.csv")


def test_usage_errors(tmp_path, capsys):
    assert main(["simulate", "--reps", "1"]) == EXIT_USAGE
    assert "seed" in capsys.readouterr().err
    assert main(["simulate", "--seed", "1", "--scenario", "Quadrimodal"]) == EXIT_USAGE
    assert "unknown scenario" in capsys.readouterr().err
    assert main(["analyze", "--seed", "1", "--data", str(tmp_path / "none.csv")]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nbogus: 3\n")
    assert main(["simulate", "--config", str(cfg)]) == EXIT_USAGE
    with pytest.raises(ConfigError, match="not a declared factor"):
        resolve_config("lrt", {"seed": 1, "data": str(cfg), "interactions": "race:stage"}, {})


def test_runtime_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,event,group,mediator\n-1,1,0,25\n")
    assert main(["analyze", "--seed", "1", "--data", str(bad), "-o", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "row 1" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 4\nreplications: 7\nsimulate:\n  replications: 9\n  scenarios: [Bimodal]\n")
    from rdmediation.cli import load_config
    rc = resolve_config("simulate", load_config(str(cfg)), {"replications": 11, "jobs": None})
    assert rc.replications == 11 and rc.scenarios == ("Bimodal",) and rc.seed == 4
    assert rc.lddp_iterations == 3000 and rc.aft_burn_in == 1000


def test_simulate_deterministic(tmp_path):
    out = tmp_path / "sim" / "metrics.csv"
    args = ["simulate", "--seed", "11", "--scenario", "Trinomial", "--theta", "cancors", "--reps", "2",
            "--n-per-group", "150", "-o", str(out), "--replications-output", str(tmp_path / "sim" / "reps.csv"), *FAST]
    assert main(args) == EXIT_OK
    first = out.read_bytes(), out.with_suffix(".manifest.json").read_bytes(), (tmp_path / "sim" / "reps.csv").read_bytes()
    assert main([*args, "--jobs", "2"]) == EXIT_OK
    again = out.read_bytes(), out.with_suffix(".manifest.json").read_bytes(), (tmp_path / "sim" / "reps.csv").read_bytes()
    assert first == again
    man = json.loads(first[1])
    assert man["seed"] == 11 and len(man["config_hash"]) == 64 and "numpy" in man["versions"]
    assert "Trinomial/cancors" in man["censoring"]
    rows = list(csv.DictReader(out.open()))
    assert [r["method"] for r in rows] == ["Density", "Linear", "BCL", "Traditional"]


def test_analyze_outputs_and_determinism(tmp_path, data):
    args = ["analyze", "--seed", "5", "--data", str(data), *FACTORS, "--interactions", "race:age",
            "--bootstrap", "40", "-o", str(tmp_path / "a"), *FAST]
    assert main(args) == EXIT_OK
    res = (tmp_path / "a" / "results.csv").read_bytes()
    grid = (tmp_path / "a" / "density_grid.csv").read_bytes()
    assert main(args) == EXIT_OK
    assert (tmp_path / "a" / "results.csv").read_bytes() == res
    assert (tmp_path / "a" / "density_grid.csv").read_bytes() == grid
    rows = list(csv.DictReader((tmp_path / "a" / "results.csv").open()))
    methods = {r["method"] for r in rows}
    assert methods == {"Density", "Linear", "BCL", "Traditional"}
    marg = [r for r in rows if r["stratum"] == "marginal" and r["quantity"] == "rd"]
    assert len(marg) == 4
    for r in marg:
        assert float(r["lower"]) <= float(r["estimate"]) <= float(r["upper"])
        assert 0.2 < float(r["estimate"]) < 2.0
    strata = {r["stratum"] for r in rows}
    assert {"lt65|female", "ge65|male"} <= strata


def test_unavailable_stratum_warns(tmp_path, caplog):
    d = _dataset(tmp_path / "gap.csv", drop=(1, 1))
    args = ["analyze", "--seed", "2", "--data", str(d), *FACTORS, "--methods", "Linear,Traditional",
            "--bootstrap", "20", "-o", str(tmp_path / "g"), *FAST]
    assert main(args) == EXIT_OK
    assert "ge65|male has no reference-group subjects" in caplog.text
    man = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert any("ge65|male" in w for w in man["warnings"])
    rows = list(csv.DictReader((tmp_path / "g" / "results.csv").open()))
    gap = [r for r in rows if r["stratum"] == "ge65|male" and r["quantity"] == "rd"]
    assert gap and all(r["estimate"] == "" for r in gap)


def _lrt(tmp_path, data, name):
    args = ["lrt", "--seed", "1", "--data", str(data), *FACTORS, "--interactions", "race:age,race:sex,bmi:age",
            "-o", str(tmp_path / name)]
    assert main(args) == EXIT_OK
    return list(csv.DictReader((tmp_path / name / "lrt.csv").open()))


def test_lrt_table(tmp_path, data):
    rows = _lrt(tmp_path, data, "l1")
    assert [r["dropped_block"] for r in rows] == ["none", "race:age", "race:sex", "bmi:age"]
    assert float(rows[0]["p_value"]) == 1.0 and rows[0]["df"] == "0"
    assert rows[1]["df"] == "1"
    assert _lrt(tmp_path, data, "l2") == rows
    strong = _dataset(tmp_path / "strong.csv", n=3000, seed=8, age_effect=-1.0)
    rows = _lrt(tmp_path, strong, "l3")
    assert float(rows[1]["p_value"]) < 1e-4


def test_density_grid(tmp_path, data):
    args = ["density-grid", "--seed", "3", "--data", str(data), *FACTORS, "-o", str(tmp_path / "dg"), *FAST]
    assert main(args) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "dg" / "density_grid.csv").open()))
    assert len(rows) == 4 * 60
    by = {}
    for r in rows:
        by.setdefault(r["stratum"], []).append((float(r["m"]), float(r["f"])))
    for pts in by.values():
        m, f = np.array(pts).T
        assert 0.9 < np.trapezoid(f, m) <= 1.01
