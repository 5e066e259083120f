"""Tests for the command-line interface: subcommands and exit codes."""

import json

import pytest

from cib import cli

MINI_TOML = """
[task]
n_train = 48
n_eval = 16

[cib]
epochs = 1
batch_size = 16
"""


@pytest.fixture()
def mini_config_path(tmp_path):
    path = tmp_path / "mini.toml"
    path.write_text(MINI_TOML)
    return str(path)


def run_cli(args):
    return cli.main(args)


class TestGenData:
    def test_writes_dataset(self, tmp_path, mini_config_path, capsys):
        out = tmp_path / "data"
        assert run_cli(["gen-data", "--config", mini_config_path,
                        "--seed", "5", "--out", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["splits"]["train"] == 48
        assert (out / "manifest.json").exists()
        assert (out / "counterexample.jsonl").exists()

    def test_same_seed_is_byte_identical(self, tmp_path, mini_config_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli(["gen-data", "--config", mini_config_path, "--seed", "3", "--out", str(a)])
        run_cli(["gen-data", "--config", mini_config_path, "--seed", "3", "--out", str(b)])
        capsys.readouterr()
        for name in ("train.jsonl", "clean.jsonl", "rephrase.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrainAndEval:
    def test_train_writes_artifacts(self, tmp_path, mini_config_path, capsys):
        out = tmp_path / "run"
        assert run_cli(["train", "--config", mini_config_path,
                        "--seed", "0", "--out", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert "final_loss" in info
        for name in ("checkpoint.json", "history.jsonl", "robustness.json"):
            assert (out / name).exists()

    def test_eval_robustness_on_checkpoint(self, tmp_path, mini_config_path, capsys):
        data = tmp_path / "data"
        run = tmp_path / "run"
        run_cli(["gen-data", "--config", mini_config_path, "--seed", "0", "--out", str(data)])
        run_cli(["train", "--config", mini_config_path, "--seed", "0", "--out", str(run)])
        capsys.readouterr()
        assert run_cli(["eval-robustness", "--model", str(run / "checkpoint.json"),
                        "--data", str(data)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert {"acc_clean", "acc_perturbed", "cs", "flips_iv", "flips_cv"} <= set(report)


class TestEstimate:
    def test_emits_single_json_record(self, capsys):
        assert run_cli(["estimate", "--estimator", "CLUB", "--rho", "0.5",
                        "--dim", "1", "--n-samples", "500", "--seed", "1"]) == 0
        record = json.loads(capsys.readouterr().out)
        assert set(record) == {"estimator", "value", "oracle", "n", "seed"}
        assert record["oracle"] == pytest.approx(0.14384103, abs=1e-6)

    def test_rejects_unknown_estimator(self, capsys):
        assert run_cli(["estimate", "--estimator", "BOGUS"]) == 1


class TestVerifyBounds:
    def test_success_exit_zero(self, capsys):
        assert run_cli(["verify-bounds", "--seeds", "3"]) == 0
        reports = json.loads(capsys.readouterr().out)
        assert len(reports) == 3
        assert all(r["all_hold"] for r in reports)

    def test_violation_exit_three(self, monkeypatch, capsys):
        from cib.objective import verify_bound_ordering as real

        def broken(seed, dims=(3, 3, 2, 2), noise=0.1):
            report = real(seed, dims, noise)
            report.holds = {k: False for k in report.holds}
            return report

        monkeypatch.setattr(cli, "verify_bound_ordering", broken)
        assert run_cli(["verify-bounds", "--seeds", "1"]) == 3
        capsys.readouterr()

    def test_bad_dims_exit_one(self, capsys):
        assert run_cli(["verify-bounds", "--seeds", "1", "--dims", "3,3"]) == 1
        capsys.readouterr()


class TestSweepAndReport:
    def test_sweep_then_report(self, tmp_path, capsys):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(MINI_TOML + f"""
[experiment]
seeds = [0]
output_dir = "{tmp_path / 'out'}"

[experiment.sweep]
parameter = "beta"
grid = [1e-4, 1e-3]
""")
        assert run_cli(["sweep", "--config", str(cfg)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["records"] == 2
        assert run_cli(["report", "--results", str(tmp_path / "out")]) == 0
        capsys.readouterr()
        assert (tmp_path / "out" / "sweep_summary.csv").exists()
        assert (tmp_path / "out" / "ablation.md").exists()


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert run_cli(["frobnicate"]) == 1
        capsys.readouterr()

    def test_config_error_is_exit_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[task]\nbogus = 1\n")
        assert run_cli(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
        capsys.readouterr()

    def test_runtime_failure_is_exit_two(self, tmp_path, capsys):
        assert run_cli(["eval-robustness", "--model", str(tmp_path / "missing.json"),
                        "--data", str(tmp_path / "missing")]) == 2
        capsys.readouterr()
