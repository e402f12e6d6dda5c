import json
import warnings
from pathlib import Path

import numpy as np
import pytest
import yaml

from fewmax import cli, fixtures, train
from fewmax.config import apply_overrides, from_dict, load_config
from fewmax.data import write_manifest
from fewmax.errors import ConfigError

TINY = {
    "seed": 0,
    "model": {"widths": [4, 8], "head_hidden": 16, "dim": 8},
    "optim": {"lr": 0.01, "batch_size": 8, "epochs": 2},
    "augment": {"M": 2},
}


def write_config(path, shapes, **extra):
    values = json.loads(json.dumps(TINY))
    values["data"] = {
        "source_manifest": str(shapes["source"]),
        "target_manifest": str(shapes["target"]),
        "probe_train_manifest": str(shapes["probe_train"]),
        "test_manifest": str(shapes["test"]),
    }
    for key, value in extra.items():
        node = values
        *parents, last = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[last] = value
    path.write_text(yaml.safe_dump(values))
    return path


@pytest.fixture(scope="module")
def anchor_ckpt(shapes_fixture, tmp_path_factory):
    root = tmp_path_factory.mktemp("anchor")
    cfg = write_config(root / "pre.yaml", shapes_fixture, **{"optim.epochs": 1})
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root / "run" / "checkpoints" / "final.npz"


def adapt(tmp_path, shapes, anchor, method, name, *extra):
    cfg = write_config(tmp_path / f"{name}.yaml", shapes)
    args = ["adapt", "--config", str(cfg), "--method", method, "--out", str(tmp_path / name)]
    if anchor is not None:
        args += ["--anchor", str(anchor)]
    return cli.main(args + list(extra)), tmp_path / name


def metric_lines(run_dir):
    recs = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    return train.comparable_log(recs)


class TestConfig:
    def test_defaults_follow_published_settings(self):
        c = from_dict({})
        assert (c.optim.lr, c.optim.momentum, c.optim.weight_decay) == (0.125, 0.9, 0.9e-4)
        assert (c.optim.batch_size, c.optim.epochs, c.tau) == (64, 100, 0.07)

    @pytest.mark.parametrize("values", [{"lr": 1}, {"optim": {"learning_rate": 1}}, {"data": {"manifest": "x"}}])
    def test_unknown_keys(self, values):
        with pytest.raises(ConfigError, match="unknown keys"):
            from_dict(values)

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            from_dict({"method": "mixup"})
        with pytest.raises(ConfigError):
            from_dict({"augment": {"M": 0}})

    def test_overrides(self):
        values = apply_overrides({"optim": {"lr": 0.1}}, ["optim.lr=0.5", "augment.M=3", "model.widths=[2, 4]"])
        c = from_dict(values)
        assert c.optim.lr == 0.5 and c.augment.M == 3 and c.model.widths == [2, 4]
        with pytest.raises(ConfigError):
            apply_overrides({}, ["optim.lr"])

    def test_relative_paths_follow_config_file(self, tmp_path):
        (tmp_path / "sub").mkdir()
        cfg = tmp_path / "sub" / "c.yaml"
        cfg.write_text(yaml.safe_dump({"anchor": "a.npz", "data": {"target_manifest": "../t/manifest.txt"}}))
        c = load_config(cfg)
        assert Path(c.anchor) == (tmp_path / "sub" / "a.npz").resolve()
        assert Path(c.data.target_manifest) == (tmp_path / "t" / "manifest.txt").resolve()

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")
        (tmp_path / "bad.yaml").write_text("optim: [unclosed")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.yaml")


class TestPretrainAdapt:
    def test_pretrain_writes_loadable_anchor(self, anchor_ckpt):
        net = train.load_network(anchor_ckpt)
        assert net.arch.widths == (4, 8)

    def test_pretrain_deterministic(self, shapes_fixture, tmp_path, anchor_ckpt):
        cfg = write_config(tmp_path / "pre.yaml", shapes_fixture, **{"optim.epochs": 1})
        assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
        again = train.load_network(tmp_path / "again" / "checkpoints" / "final.npz")
        assert again.param_hash() == train.load_network(anchor_ckpt).param_hash()

    def test_pretrain_missing_source(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({**TINY, "data": {"source_manifest": "nowhere.txt"}}))
        assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "run")]) == ConfigError.exit_code
        assert not (tmp_path / "run").exists()
        assert "ConfigError" in capsys.readouterr().err

    def test_adapt_run_directory(self, shapes_fixture, anchor_ckpt, tmp_path):
        code, run = adapt(tmp_path, shapes_fixture, anchor_ckpt, "few_max", "fm")
        assert code == 0
        assert len(metric_lines(run)) == 2
        assert (run / "config.yaml").is_file() and (run / "checkpoints" / "final.npz").is_file()
        snap = yaml.safe_load((run / "config.yaml").read_text())
        assert snap["method"] == "few_max" and snap["anchor"] == str(anchor_ckpt.resolve())

    def test_few_mix_equals_single_blend_few_max(self, shapes_fixture, anchor_ckpt, tmp_path):
        _, a = adapt(tmp_path, shapes_fixture, anchor_ckpt, "few_mix", "mix")
        _, b = adapt(tmp_path, shapes_fixture, anchor_ckpt, "few_max", "max1", "--set", "augment.M=1")
        la, lb = metric_lines(a), metric_lines(b)
        for ra, rb in zip(la, lb):
            np.testing.assert_allclose(ra["batch_losses"], rb["batch_losses"], rtol=0, atol=1e-6)

    def test_finetune_without_anchor(self, shapes_fixture, tmp_path):
        code, run = adapt(tmp_path, shapes_fixture, None, "finetune", "ft")
        assert code == ConfigError.exit_code and not (run / "checkpoints").exists()

    def test_snapshot_reproduces_run(self, shapes_fixture, anchor_ckpt, tmp_path):
        _, first = adapt(tmp_path, shapes_fixture, anchor_ckpt, "few_max", "orig")
        second = tmp_path / "replay"
        assert cli.main(["adapt", "--config", str(first / "config.yaml"), "--out", str(second)]) == 0
        assert metric_lines(first) == metric_lines(second)

    def test_resume(self, shapes_fixture, anchor_ckpt, tmp_path):
        _, full = adapt(tmp_path, shapes_fixture, anchor_ckpt, "few_max", "full", "--set", "checkpoint_every=1")
        _, resumed = adapt(
            tmp_path, shapes_fixture, anchor_ckpt, "few_max", "resumed",
            "--resume", str(full / "checkpoints" / "epoch_0001.npz"),
        )
        assert metric_lines(resumed) == metric_lines(full)

    def test_output_root_env(self, shapes_fixture, tmp_path, monkeypatch):
        monkeypatch.setenv("FEWMAX_OUTPUT_ROOT", str(tmp_path / "root"))
        cfg = write_config(tmp_path / "b.yaml", shapes_fixture, **{"optim.epochs": 1})
        assert cli.main(["adapt", "--config", str(cfg), "--method", "baseline"]) == 0
        assert (tmp_path / "root" / "baseline_seed0" / "checkpoints" / "final.npz").is_file()

    def test_usage_error_code(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["adapt", "--method", "nope"])
        assert info.value.code == ConfigError.exit_code


@pytest.fixture(scope="module")
def evaluated_run(shapes_fixture, anchor_ckpt, tmp_path_factory):
    root = tmp_path_factory.mktemp("evalrun")
    bank = fixtures.shapes("B", 5, classes=range(4), seed=77, prefix="bank")
    bank_manifest = write_manifest(root / "bank" / "manifest.txt", bank)
    code, run = adapt(root, shapes_fixture, anchor_ckpt, "few_max", "run", "--set", f"data.bank_manifest={bank_manifest}")
    assert code == 0
    return run


class TestEval:
    def test_nothing_enabled(self, evaluated_run, capsys):
        assert cli.main(["eval", "--run", str(evaluated_run)]) == 0
        assert json.loads(capsys.readouterr().out) == {}

    def test_landscape_grid(self, evaluated_run):
        assert cli.main(["eval", "--run", str(evaluated_run), "--landscape", "5"]) == 0
        lines = (evaluated_run / "eval" / "landscape.csv").read_text().splitlines()
        assert len(lines) == 1 + 25
        assert (evaluated_run / "eval" / "landscape.png").stat().st_size > 0

    def test_retrieval_top5(self, evaluated_run):
        assert cli.main(["eval", "--run", str(evaluated_run), "--retrieval", "5"]) == 0
        results = json.loads((evaluated_run / "eval" / "retrieval.json").read_text())
        assert results and all(len(r["neighbors"]) == 5 == len(r["distances"]) for r in results)
        assert all(r["distances"] == sorted(r["distances"]) for r in results)
        assert (evaluated_run / "eval" / "retrieval.png").is_file()

    def test_full_report(self, evaluated_run):
        assert cli.main(["eval", "--run", str(evaluated_run), "--energy", "--probe", "--gradnorm"]) == 0
        report = json.loads((evaluated_run / "eval" / "report.json").read_text())
        assert report["method"] == "few_max"
        assert report["energy"]["convention"] == "ordered-pairs-mean"
        assert 0 <= report["probe"]["top1"] <= 100 and report["gradnorm"]["mean_input_grad_norm"] > 0

    def test_artifacts_stay_in_run_dir(self, evaluated_run):
        outside = {p for p in evaluated_run.parent.iterdir()}
        cli.main(["eval", "--run", str(evaluated_run), "--energy", "--landscape", "3"])
        assert {p for p in evaluated_run.parent.iterdir()} == outside

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["eval", "--run", str(tmp_path), "--energy"]) == 14

    def test_nrmse_on_patches(self, phantom_fixture, tmp_path):
        cfg = tmp_path / "mri.yaml"
        cfg.write_text(yaml.safe_dump({
            **TINY,
            "model": {"in_channels": 2, "widths": [4, 8], "head_hidden": 16, "dim": 8},
            "augment": {"M": 2, "complex_aug": True},
            "eval": {"nrmse_steps": 20},
            "data": {"target_manifest": str(phantom_fixture["target"]), "test_manifest": str(phantom_fixture["test"])},
        }))
        run = tmp_path / "run"
        assert cli.main(["adapt", "--config", str(cfg), "--method", "baseline", "--out", str(run)]) == 0
        assert cli.main(["eval", "--run", str(run), "--nrmse"]) == 0
        value = json.loads((run / "eval" / "report.json").read_text())["nrmse"]["nrmse"]
        assert np.isfinite(value) and value > 0


def fake_run(root, name, method, seed, **sections):
    run = root / name
    (run / "eval").mkdir(parents=True)
    (run / "eval" / "report.json").write_text(json.dumps({"method": method, "seed": seed, **sections}))
    return run


ENERGY = {"energy": {"E0": 0.3, "E1": 1.2, "E2": 1.5}}


class TestReport:
    def test_single_run(self, tmp_path):
        header, rows = cli.build_report([fake_run(tmp_path, "a", "few_max", 0, **ENERGY)])
        assert len(rows) == 1 and rows[0][:2] == ["few_max", 1]
        assert header[:4] == ["method", "n_seeds", "E0_mean", "E0_std"]

    def test_five_seeds(self, tmp_path):
        runs = [fake_run(tmp_path, f"s{k}", "finetune", k, probe={"top1": 50.0 + k, "top5": 90.0}) for k in range(5)]
        header, rows = cli.build_report(runs)
        cols = dict(zip(header, rows[0]))
        assert cols["n_seeds"] == 5 and cols["top1_mean"] == 52.0
        assert cols["top1_std"] == pytest.approx(np.std([50, 51, 52, 53, 54], ddof=1))

    def test_mixed_evaluations_warn(self, tmp_path):
        runs = [
            fake_run(tmp_path, "cls", "few_max", 0, **ENERGY, probe={"top1": 60.0, "top5": 90.0}),
            fake_run(tmp_path, "mri", "baseline", 0, nrmse={"nrmse": 0.3}),
        ]
        with pytest.warns(UserWarning, match="different evaluations"):
            text, csv_text = cli.cmd_report(runs, tmp_path / "table.csv")
        header = csv_text.splitlines()[0].split(",")
        assert "nrmse_mean" in header and "top1_mean" in header
        baseline = next(line for line in csv_text.splitlines() if line.startswith("baseline"))
        assert ",," in baseline
        assert "±" in text and (tmp_path / "table.csv").is_file()

    def test_consistent_runs_do_not_warn(self, tmp_path):
        runs = [fake_run(tmp_path, f"r{k}", "few_mix", k, **ENERGY) for k in range(2)]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            cli.build_report(runs)

    def test_missing_report(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli.main(["report", str(tmp_path / "empty")]) == 14
