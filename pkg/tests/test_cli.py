import csv
import json

import numpy as np
import pytest

from bilevel_reweight import load_dataset
from bilevel_reweight.cli import main


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture()
def mixture_spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({
        "type": "mixture",
        "spec": {"n": 40, "m": 10, "seed": 3},
    }))
    return path


class TestGenerate:
    def test_writes_datasets_and_meta(self, tmp_path, mixture_spec_file):
        out = tmp_path / "data"
        rc = main(["generate", "--spec", str(mixture_spec_file),
                   "--out", str(out)])
        assert rc == 0
        train = load_dataset(out / "train.csv")
        test = load_dataset(out / "test.csv")
        assert train.n == 40 and test.n == 10
        meta = json.loads((out / "meta.json").read_text())
        assert len(meta["clusters"]) == 40
        assert len(meta["theta_hat"]) == 2
        resolved = json.loads((out / "resolved-config.json").read_text())
        assert resolved["spec"]["seed"] == 3

    def test_seed_flag_overrides_spec(self, tmp_path, mixture_spec_file):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        main(["generate", "--spec", str(mixture_spec_file),
              "--out", str(out_a), "--seed", "7"])
        main(["generate", "--spec", str(mixture_spec_file),
              "--out", str(out_b), "--seed", "7"])
        assert ((out_a / "train.csv").read_text()
                == (out_b / "train.csv").read_text())
        main(["generate", "--spec", str(mixture_spec_file),
              "--out", str(out_a), "--seed", "8"])
        assert ((out_a / "train.csv").read_text()
                != (out_b / "train.csv").read_text())

    def test_corruption_spec_writes_val_split(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "type": "corruption",
            "spec": {"n": 30, "classes": 3, "d": 4, "n_test": 10,
                     "n_val": 10, "seed": 0},
        }))
        out = tmp_path / "data"
        assert main(["generate", "--spec", str(spec), "--out", str(out)]) == 0
        val = load_dataset(out / "val.csv")
        assert val.n == 10 and val.kind == "classification"
        meta = json.loads((out / "meta.json").read_text())
        assert len(meta["clean_mask"]) == 30

    def test_unknown_type_exits_nonzero(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"type": "images"}))
        rc = main(["generate", "--spec", str(spec),
                   "--out", str(tmp_path / "o")])
        assert rc == 2


class TestSolve:
    def solve_config(self, tmp_path, **solver):
        cfg = {
            "dataset": {"type": "mixture",
                        "spec": {"n": 30, "m": 10, "seed": 1}},
            "mu": 1e-4,
            "solver": {"kind": "exact", "eta": 0.1, "iterations": 20,
                       "record_every": 5, **solver},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_exact_solver_outputs(self, tmp_path):
        cfg = self.solve_config(tmp_path)
        out = tmp_path / "run"
        assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
        rows = read_jsonl(out / "trace.jsonl")
        assert [r["k"] for r in rows] == [0, 5, 10, 15, 20]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["support_size"] >= 1
        assert summary["halted"] is None
        assert (out / "resolved-config.json").exists()

    def test_reproducible(self, tmp_path):
        cfg = self.solve_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["solve", "--config", str(cfg), "--out", str(out_a)])
        main(["solve", "--config", str(cfg), "--out", str(out_b)])
        assert ((out_a / "trace.jsonl").read_text()
                == (out_b / "trace.jsonl").read_text())

    def test_set_override_changes_run(self, tmp_path):
        cfg = self.solve_config(tmp_path)
        out = tmp_path / "run"
        main(["solve", "--config", str(cfg), "--out", str(out),
              "--set", "solver.iterations=8"])
        rows = read_jsonl(out / "trace.jsonl")
        assert rows[-1]["k"] == 8
        resolved = json.loads((out / "resolved-config.json").read_text())
        assert resolved["solver"]["iterations"] == 8

    def test_warm_solver_kind(self, tmp_path):
        cfg = self.solve_config(tmp_path, kind="warm", rho=1e-4)
        out = tmp_path / "run"
        assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
        rows = read_jsonl(out / "trace.jsonl")
        assert len(rows) == 5

    def test_malformed_override_exits(self, tmp_path):
        cfg = self.solve_config(tmp_path)
        with pytest.raises(SystemExit):
            main(["solve", "--config", str(cfg),
                  "--out", str(tmp_path / "x"), "--set", "novalue"])


class TestFlow:
    def test_constant_preset_reports_closed_form_error(self, tmp_path, capsys):
        out = tmp_path / "flow"
        rc = main(["flow", "--out", str(out),
                   "--set", "preset=constant", "--set", "phi=[0.0,1.0,2.0]",
                   "--set", "flow.dt=0.001", "--set", "flow.t_max=10.0"])
        assert rc == 0
        captured = capsys.readouterr()
        err = float(captured.out.split(":")[-1])
        assert err <= 1e-4
        report = json.loads((out / "stationary_report.json").read_text())
        assert report["closed_form_error"] <= 1e-4
        # the limit concentrates on the argmin of phi
        w = np.array(report["w"])
        assert w.argmax() == 0

    def test_fig3_preset_certifies_sparse_limit(self, tmp_path):
        out = tmp_path / "flow"
        rc = main(["flow", "--out", str(out), "--seed", "0",
                   "--set", "flow.dt=0.01", "--set", "flow.t_max=300.0",
                   "--set", "flow.stationarity_tol=1e-9"])
        assert rc == 0
        report = json.loads((out / "stationary_report.json").read_text())
        assert report["converged"] is True
        assert report["is_stationary"] is True
        assert len(report["support"]) <= 3
        assert report["in_I_lp"] is True
        rows = read_jsonl(out / "trace.jsonl")
        assert len(rows) > 1

    def test_unknown_preset_exits_nonzero(self, tmp_path):
        rc = main(["flow", "--out", str(tmp_path / "f"),
                   "--set", "preset=spiral"])
        assert rc == 2


class TestExperiment:
    def test_unknown_name_exits_nonzero(self, tmp_path):
        rc = main(["experiment", "nope", "--out", str(tmp_path / "e")])
        assert rc == 2

    def test_toy_mixture_small(self, tmp_path):
        out = tmp_path / "exp"
        rc = main([
            "experiment", "toy-mixture", "--out", str(out),
            "--set", "spec.n=40", "--set", "spec.m=20", "--set", "spec.seed=2",
            "--set", 'exact={"eta":0.1,"iterations":50,"record_every":10}',
            "--set", 'warm={"eta":0.05,"rho":5e-5,"iterations":50,'
                     '"record_every":10}',
        ])
        assert rc == 0
        with open(out / "table.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["run"] for r in rows] == ["uniform", "optimal", "exact",
                                            "warm"]
        optimal = next(r for r in rows if r["run"] == "optimal")
        assert float(optimal["wrong_cluster_mass"]) == 0.0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["experiment"] == "toy-mixture"
        assert (out / "trace-exact.jsonl").exists()
        assert (out / "trace-warm.jsonl").exists()

    def test_frozen_flow_small(self, tmp_path):
        out = tmp_path / "exp"
        rc = main([
            "experiment", "frozen-flow", "--out", str(out),
            "--set", "n=5", "--set", "p=3", "--set", "seed=1",
            "--set", 'flow={"dt":0.01,"t_max":300.0,'
                     '"stationarity_tol":1e-9}',
        ])
        assert rc == 0
        with open(out / "table.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["converged"] == "True"
        assert rows[0]["support_leq_p"] == "True"

    def test_resolved_config_reruns_identically(self, tmp_path):
        out_a = tmp_path / "a"
        args = ["experiment", "softmax-toy",
                "--set", "spec.n=30", "--set", "spec.m=10",
                "--set", 'solver={"eta":50.0,"rho":0.001,"iterations":40,'
                         '"record_every":10}']
        assert main(args + ["--out", str(out_a)]) == 0
        resolved = json.loads((out_a / "resolved-config.json").read_text())
        resolved.pop("experiment")
        cfg_path = tmp_path / "resolved.json"
        cfg_path.write_text(json.dumps(resolved))
        out_b = tmp_path / "b"
        assert main(["experiment", "softmax-toy", "--config", str(cfg_path),
                     "--out", str(out_b)]) == 0
        assert ((out_a / "table.csv").read_text()
                == (out_b / "table.csv").read_text())
