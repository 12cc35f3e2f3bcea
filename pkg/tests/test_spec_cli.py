import json

import pytest

from stageplan import hpseq as H
from stageplan.cli import main
from stageplan.errors import ConfigError
from stageplan.spec import compile_filter, parse_spec

GRID_DOC = {
    "schema": 1,
    "seed": 7,
    "workers": 2,
    "cost": {"step_seconds": 0.1, "save_seconds": 5, "load_seconds": 3, "eval_seconds": 1},
    "studies": [
        {
            "name": "grid4",
            "model": "resnet56",
            "dataset": "cifar10",
            "max_steps": 200,
            "eval_interval": 20,
            "search_space": {
                "lr": ["Constant(0.1)", "Exponential(0.1, 0.95)"],
                "bs": ["Constant(128)", "MultiStep(128, [40], 2)"],
            },
            "tuner": {"kind": "grid"},
        }
    ],
}


def doc(**changes):
    d = json.loads(json.dumps(GRID_DOC))
    d["studies"][0].update(changes)
    return d


def write(tmp_path, d, name="spec.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


class TestSpec:
    def test_grid_of_four(self):
        r = parse_spec(GRID_DOC)
        (s,) = r.studies
        assert len(s.configs()) == 4 and s.hp_set == {"lr", "bs"}
        assert s.compat_key == parse_spec(GRID_DOC).studies[0].compat_key
        assert r.workers == 2 and r.cost.save_seconds == 5

    def test_round_trip(self, tmp_path):
        r = parse_spec(GRID_DOC)
        assert parse_spec(r.to_json()) == r
        assert parse_spec(write(tmp_path, r.to_json())) == r

    def test_missing_workers(self):
        d = doc()
        del d["workers"]
        with pytest.raises(ConfigError, match="workers"):
            parse_spec(d)

    def test_zero_workers(self):
        d = doc()
        d["workers"] = 0
        with pytest.raises(ConfigError, match="workers"):
            parse_spec(d)

    def test_sha_rungs(self):
        r = parse_spec(doc(max_steps=120, tuner={"kind": "sha", "reduction": 4, "min": 15}))
        assert r.studies[0].tuner.rungs(120) == [15, 60, 120]

    def test_epochs(self):
        r = parse_spec(doc(steps_per_iteration=10, max_steps={"epochs": 20}, eval_interval={"epochs": 2}))
        assert r.studies[0].max_steps == 200 and r.studies[0].eval_interval == 20
        with pytest.raises(ConfigError):
            parse_spec(doc(steps_per_iteration=3, max_steps={"epochs": 0.5}))

    def test_unknown_family_lists_supported(self):
        d = doc()
        d["studies"][0]["search_space"]["lr"].append("Bogus(1)")
        with pytest.raises(ConfigError, match="supported: CONSTANT"):
            parse_spec(d)

    def test_milestone_below_max(self):
        with pytest.raises(ConfigError):
            parse_spec(doc(max_steps=10, tuner={"kind": "milestone", "milestones": [[5, 2], [20, 1]]}))

    def test_segments_candidate(self):
        seg = {"segments": [{"function": "Constant(0.1)", "steps": 50}, {"function": "Constant(0.01)"}]}
        r = parse_spec(doc(search_space={"lr": [seg]}))
        (cfg,) = r.studies[0].configs()
        assert cfg.sequences["lr"].value(49) == H.to_value("0.1") and cfg.sequences["lr"].value(50) == H.to_value("0.01")

    def test_filter_in_spec(self):
        r = parse_spec(doc(filter="lr.family == 'constant' or bs == 'Constant(128)'"))
        assert len(r.studies[0].configs()) == 3


class TestFilter:
    CANDS = {"lr": H.exponential("0.1", "0.95"), "bs": H.constant(128)}

    @pytest.mark.parametrize(
        "expr,expected",
        [
            ("lr.family == 'exponential'", True),
            ("lr.family == 'EXPONENTIAL'", True),
            ("lr.gamma < 0.9", False),
            ("bs.value != 128", False),
            ("not bs.value != 128 and lr.initial == 0.1", True),
            ("bs == 'Constant(128)'", True),
            ("lr.milestones == 3", False),
        ],
    )
    def test_expressions(self, expr, expected):
        assert compile_filter(expr, {"lr", "bs"})(self.CANDS) is expected

    @pytest.mark.parametrize("expr", ["__import__('os')", "lr.family + 1 == 2", "wd == 1", "lr ==", "lr in [1]"])
    def test_rejected(self, expr):
        with pytest.raises(ConfigError):
            compile_filter(expr, {"lr", "bs"})


class TestCli:
    def test_run_twice_identical(self, tmp_path):
        spec = write(tmp_path, GRID_DOC)
        for i in (1, 2):
            assert main(["run", spec, "--trace", str(tmp_path / f"t{i}.csv")]) == 0
        assert (tmp_path / "t1.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()
        assert (tmp_path / "t1.summary.json").read_bytes() == (tmp_path / "t2.summary.json").read_bytes()

    def test_summary_to_stdout(self, tmp_path, capsys):
        assert main(["run", write(tmp_path, GRID_DOC), "--mode", "trial"]) == 0
        assert json.loads(capsys.readouterr().out)["mode"] == "trial"

    @pytest.mark.parametrize("n", [1, 3, 6])
    def test_merge_rate_identical(self, tmp_path, capsys, n):
        spec = write(tmp_path, doc(search_space={"lr": ["Constant(0.1)"] * n}))
        assert main(["merge-rate", spec]) == 0
        assert capsys.readouterr().out.strip() == str(n)

    def test_merge_rate_json(self, tmp_path, capsys):
        assert main(["merge-rate", write(tmp_path, GRID_DOC), "--json"]) == 0
        out = json.loads(capsys.readouterr().out)
        (rep,) = out.values()
        assert rep["total_steps"] == 800

    def test_report(self, tmp_path, capsys):
        spec = write(tmp_path, GRID_DOC)
        for mode in ("stage", "trial"):
            assert main(["run", spec, "--mode", mode, "--trace", str(tmp_path / f"{mode}.csv")]) == 0
        args = ["report", "--stage-trace", str(tmp_path / "stage.csv"), "--trial-trace", str(tmp_path / "trial.csv")]
        assert main(args + ["--bars", str(tmp_path / "bars.dat")]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["gpu_hour_ratio_float"] > 1
        assert main(args + ["--out", "csv"]) == 0
        assert capsys.readouterr().out.startswith("metric,value")

    def test_report_mismatched_seeds(self, tmp_path, capsys):
        spec = write(tmp_path, GRID_DOC)
        assert main(["run", spec, "--mode", "stage", "--trace", str(tmp_path / "s.csv")]) == 0
        assert main(["run", spec, "--mode", "trial", "--seed", "8", "--trace", str(tmp_path / "t.csv")]) == 0
        rc = main(["report", "--stage-trace", str(tmp_path / "s.csv"), "--trial-trace", str(tmp_path / "t.csv")])
        assert rc == 1 and "seed" in capsys.readouterr().err

    def test_invalid_spec_exit_code(self, tmp_path, capsys):
        d = doc()
        del d["workers"]
        assert main(["run", write(tmp_path, d)]) == 1
        assert "workers" in capsys.readouterr().err
        assert main(["run", str(tmp_path / "missing.json")]) == 1

    @pytest.mark.parametrize("what", ["plan", "tree"])
    @pytest.mark.parametrize("fmt", ["json", "dot"])
    def test_dump(self, tmp_path, capsys, what, fmt):
        assert main([f"dump-{what}", write(tmp_path, GRID_DOC), "--format", fmt]) == 0
        out = capsys.readouterr().out
        if fmt == "dot":
            assert out.lstrip().startswith("digraph")
        else:
            json.loads(out)
