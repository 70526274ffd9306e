import csv
import json

import numpy as np
import pytest

from caseaudit.cli import main
from caseaudit.estimation import FitResult, normal_quantile
from caseaudit.ingest import read_units_jsonl
from caseaudit.model import CourtConfig
from caseaudit.simulate import brute_force_loglik

OUTPUTS = ("events.csv", "calendar.csv", "seeds.csv", "truth.jsonl", "court.json")


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    assert run("simulate", "--days", 60, "--chairs", 4, "--classes", "a,b", "--intensity", 6,
               "--availability", "rotating", "--rotation-period", 9, "--seed-total", 40,
               "--seed", 3, "--out", d / "sim") == 0
    return d


def data_args(d):
    sim = d / "sim"
    return ["--events", sim / "events.csv", "--calendar", sim / "calendar.csv",
            "--seeds", sim / "seeds.csv", "--court", sim / "court.json"]


def test_simulate_is_reproducible(tmp_path):
    args = ["--days", 20, "--chairs", 5, "--classes", "x,y", "--poisson", "--seed", 9]
    assert run("simulate", *args, "--out", tmp_path / "a") == 0
    assert run("simulate", *args, "--out", tmp_path / "b") == 0
    for name in OUTPUTS:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 9 and "created" in man


def test_gamma_zero_stream_equals_uniform(tmp_path):
    base = ["--days", 15, "--chairs", 5, "--classes", "x,y", "--seed", 4]
    run("simulate", *base, "--out", tmp_path / "u")
    run("simulate", *base, "--rule", "proportion-penalized", "--gamma", 0, "--out", tmp_path / "g")
    assert (tmp_path / "u" / "events.csv").read_bytes() == (tmp_path / "g" / "events.csv").read_bytes()


def test_zero_days_writes_header_only(tmp_path):
    assert run("simulate", "--days", 0, "--out", tmp_path) == 0
    assert (tmp_path / "events.csv").read_text() == "date,class,chair,count\n"


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--events", "x.csv", "--spec", "m7", "--out", "f.json"],
        ["simulate", "--rule", "uniform", "--gamma", "1", "--out", "o"],
        ["simulate", "--rule", "fixed-bias", "--out", "o"],
        ["simulate", "--rule", "true-model", "--out", "o"],
        ["nonsense"],
    ],
)
def test_usage_errors_exit_2(tmp_path, monkeypatch, argv, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_data_errors_exit_1(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("date,class,chair,count\n2008-02-28,a,9,1\n")
    assert run("fit", "--events", tmp_path / "e.csv", "--chairs", 4, "--spec", "m6",
               "--out", tmp_path / "f.json") == 1
    assert "e.csv:2" in capsys.readouterr().err


def test_fit_writes_json_summary_and_manifest(small_run, tmp_path):
    out = tmp_path / "fit.json"
    assert run("fit", *data_args(small_run), "--spec", "m4", "--out", out,
               "--units-out", tmp_path / "units.jsonl") == 0
    fit = FitResult.from_dict(json.loads(out.read_text()))
    assert fit.converged and fit.spec.variant == "m4"
    assert "log-likelihood" in (tmp_path / "fit.txt").read_text().lower()
    man = json.loads((tmp_path / "fit.manifest.json").read_text())
    assert {i["name"] for i in man["inputs"]} >= {"events.csv", "court.json"}
    units = read_units_jsonl(tmp_path / "units.jsonl", fit.spec.config)
    oracle = brute_force_loglik(fit.estimates, units, fit.spec)
    assert abs(oracle - fit.log_likelihood_at_max) < 1e-6 * max(1.0, abs(oracle))


def test_fit_without_calendar_or_seeds(small_run, tmp_path):
    sim = small_run / "sim"
    # dropping the calendar is fine when no event falls on an unavailable chair
    assert run("fit", "--events", sim / "events.csv", "--chairs", 4, "--spec", "m6",
               "--out", tmp_path / "f.json") == 0


def test_lrt_table_full_vs_all(tmp_path):
    classes = "AC,ACO,ADI,AI,ARE,HC,Inq,MI,MS,Pet,RE,RHC,RMS,Rcl"
    run("simulate", "--days", 40, "--classes", classes, "--intensity", 12, "--seed-total", 200,
        "--seed", 1, "--out", tmp_path / "sim")
    sim = tmp_path / "sim"
    code = run("lrt", "--events", sim / "events.csv", "--seeds", sim / "seeds.csv",
               "--court", sim / "court.json", "--out", tmp_path / "lrt.csv")
    rows = read_csv(tmp_path / "lrt.csv")
    assert [r["model"] for r in rows] == ["m1", "m2", "m3", "m4", "m5", "m6"]
    ok = [r for r in rows[1:] if r["status"] == "ok"]
    assert code == (0 if len(ok) == 5 else 1)
    expected_df = {"m2": 126, "m3": 135, "m4": 130, "m5": 10, "m6": 148}
    for r in ok:
        assert int(r["df"]) == expected_df[r["model"]]
        assert 0.0 <= float(r["p_value"]) <= 1.0
    assert rows[0]["hypothesis"] == "-"


def test_lrt_full_equals_reduced(small_run, tmp_path):
    out = tmp_path / "lrt.csv"
    assert run("lrt", *data_args(small_run), "--full", "m6", "--reduced", "m6", "--out", out) == 0
    row = read_csv(out)[1]
    assert float(row["chi_squared"]) == 0.0 and float(row["p_value"]) == 1.0 and row["df"] == "0"


def test_lrt_rejects_non_nested(small_run, tmp_path):
    assert run("lrt", *data_args(small_run), "--full", "m4", "--reduced", "m5",
               "--out", tmp_path / "l.csv") == 2


@pytest.fixture(scope="module")
def fitted(small_run):
    out = small_run / "fit_m1.json"
    assert run("fit", *data_args(small_run), "--spec", "m1", "--out", out) == 0
    return out


def test_ci_default_scenario(fitted, tmp_path):
    out = tmp_path / "ci.csv"
    assert run("ci", "--fit", fitted, "--equal-proportions", "--out", out) == 0
    rows = read_csv(out)
    assert len(rows) == 2 * 4
    for label in ("a", "b"):
        pts = [float(r["point"]) for r in rows if r["class"] == label]
        assert sum(pts) == pytest.approx(1.0, abs=1e-12)
    for r in rows:
        assert 0 <= float(r["lower"]) <= float(r["point"]) <= float(r["upper"]) <= 1
        assert r["family_size"] == "4"


def test_ci_class_restriction_and_unavailable(fitted, tmp_path):
    out = tmp_path / "ci.csv"
    assert run("ci", "--fit", fitted, "--equal-proportions", "--unavailable", 3,
               "--classes", "b", "--out", out) == 0
    rows = read_csv(out)
    assert {r["class"] for r in rows} == {"b"}
    r3 = rows[2]
    assert (r3["available"], float(r3["point"]), float(r3["upper"])) == ("0", 0.0, 0.0)
    assert float(rows[0]["proportion"]) == pytest.approx(1 / 3)


def test_ci_family_sets_quantile(fitted, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("ci", "--fit", fitted, "--equal-proportions", "--family", 1, "--level", 0.99, "--out", a)
    run("ci", "--fit", fitted, "--equal-proportions", "--family", 10, "--level", 0.99, "--out", b)
    ra, rb = read_csv(a)[1], read_csv(b)[1]
    ratio = (float(rb["upper"]) - float(rb["point"])) / (float(ra["upper"]) - float(ra["point"]))
    assert ratio == pytest.approx(normal_quantile(1 - 0.001 / 2) / normal_quantile(0.995), rel=1e-9)


@pytest.mark.parametrize(
    "extra",
    [
        ["--proportions", "0.5,0.5,0.5,0.5"],
        ["--proportions", "0.5,0.5"],
        ["--equal-proportions", "--unavailable", "1,2,3,4"],
        ["--equal-proportions", "--level", "1.5"],
        ["--equal-proportions", "--family", "0"],
        ["--equal-proportions", "--classes", "zz"],
    ],
)
def test_ci_usage_errors(fitted, tmp_path, extra):
    assert run("ci", "--fit", fitted, *extra, "--out", tmp_path / "c.csv") == 2


def test_aggregate(small_run, tmp_path):
    out = tmp_path / "agg.csv"
    sim = small_run / "sim"
    assert run("aggregate", "--events", sim / "events.csv", "--court", sim / "court.json", "--out", out) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["class", "1", "2", "3", "4", "total"]
    cfg = CourtConfig.from_dict(json.loads((sim / "court.json").read_text()))
    truth = [json.loads(line) for line in open(sim / "truth.jsonl")]
    assert int(rows[-1][-1]) == sum(t["n_cases"] for t in truth)
    assert len(rows) == cfg.n_classes + 2
    assert np.array([[int(v) for v in r[1:-1]] for r in rows[1:-1]]).sum() == int(rows[-1][-1])
