import json

import pytest
import yaml
from click.testing import CliRunner

from prcl import __version__
from prcl.cli import main
from prcl.data import load_csv, load_idx
from prcl.harness import ConfigError, ExperimentConfig, compare_plans, recompute_table, run_experiment

SMALL_NET = {
    "network": {"layers": [{"kind": "dense", "dims": {"in": 2, "out": 6, "bias": True}},
                           {"kind": "relu", "dims": {}},
                           {"kind": "dense", "dims": {"in": 6, "out": 2, "bias": True}}],
                "init_seed": 1},
    "dataset": {"kind": "two_moons", "n": 400, "seed": 2},
    "calibration": 64,
    "train": {"opt": "momentum", "lr": 0.1, "epochs": 200},
}


def small(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**SMALL_NET, **kw})


@pytest.fixture(scope="module")
def mlp_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("mlp")
    cfg = ExperimentConfig(fixture="mlp", algorithms=["gradient", "hessian_baseline"], trials=3, probes=4)
    return out, run_experiment(cfg, out)


# -- config -----------------------------------------------------------------

def test_config_rejects_unknown_fields_and_versions():
    with pytest.raises(ConfigError, match="colour"):
        ExperimentConfig.from_dict({"fixture": "mlp", "colour": 1})
    with pytest.raises(ConfigError, match="schema_version"):
        ExperimentConfig.from_dict({"fixture": "mlp", "schema_version": 99})


@pytest.mark.parametrize("kw, msg", [
    ({}, "exactly one"),
    ({"fixture": "vgg"}, "unknown fixture"),
    ({"fixture": "mlp", "trials": 0}, "trials"),
    ({"fixture": "mlp", "algorithms": ["magic"]}, "unknown algorithms"),
    ({"fixture": "mlp", "storage_mode": "both"}, "storage_mode"),
    ({"network": SMALL_NET["network"]}, "dataset"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig(**kw).validate()


def test_config_hash_is_stable():
    assert small().hash() == small().hash()
    assert small().hash() != small(seed=1).hash()


# -- experiment -------------------------------------------------------------

def test_two_algorithms_give_two_rows(mlp_bundle):
    out, bundle = mlp_bundle
    assert [r["algorithm"] for r in bundle["table"]] == ["gradient", "hessian_baseline"]
    assert bundle["baseline_loss"] > 0
    assert all(r["trials"] == 3 for r in bundle["table"])
    assert "baseline loss" in (out / "summary.txt").read_text()
    lines = (out / "trials.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 3


def test_manifest_contents(mlp_bundle):
    out, _ = mlp_bundle
    man = json.loads((out / "MANIFEST.json").read_text())
    assert man["tool_version"] == __version__
    assert man["status"] == "ok" and man["stage"] == "complete"
    assert man["config_hash"] == ExperimentConfig(fixture="mlp", algorithms=["gradient", "hessian_baseline"],
                                                  trials=3, probes=4).hash()
    assert man["seeds"] == {"noise": 0, "probe": 0}
    assert set(man["timings"]) == {"validate", "load", "profile", "plan", "simulate", "write"}


def test_manifest_records_failed_stage(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig(fixture="nope"), tmp_path)
    man = json.loads((tmp_path / "MANIFEST.json").read_text())
    assert man["status"] == "failed" and man["stage"] == "validate"
    assert "nope" in man["error"]


def test_recompute_table_matches_bundle(mlp_bundle):
    out, bundle = mlp_bundle
    on_disk = json.loads((out / "bundle.json").read_text())
    assert recompute_table(on_disk) == on_disk["table"]
    assert on_disk["table"] == bundle["table"]


def test_no_noise_gives_zero_deltas(tmp_path):
    bundle = run_experiment(small(trials=1, noise={"kind": "none"}, algorithms=["gradient", "trivial"]), tmp_path)
    assert all(r["mean_delta"] == 0.0 for r in bundle["table"])


def test_random_k_and_worst(tmp_path):
    bundle = run_experiment(small(trials=2, algorithms=["gradient", "random_k"], random_k=3), tmp_path)
    randoms = [r for r in bundle["table"] if r["algorithm"].startswith("random_")]
    assert len(randoms) == 3
    assert bundle["random_worst"] == max(r["mean_delta"] for r in randoms)
    assert bundle["rank_correlation"] is None or -1 <= bundle["rank_correlation"] <= 1


def test_bundle_is_byte_identical_across_workers(tmp_path):
    cfg = small(trials=3, algorithms=["gradient", "trivial"])
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b", workers=3)
    assert (tmp_path / "a" / "bundle.json").read_bytes() == (tmp_path / "b" / "bundle.json").read_bytes()


# -- compare ----------------------------------------------------------------

def test_compare_single_bundle_is_its_own_table(mlp_bundle):
    out, bundle = mlp_bundle
    doc = compare_plans([out / "bundle.json"])
    assert doc["table"] == bundle["table"]
    assert doc["wins"]["gradient"] + doc["wins"]["hessian_baseline"] <= 1


def test_compare_disjoint_algorithms_union(tmp_path):
    run_experiment(small(trials=2, algorithms=["gradient"]), tmp_path / "a")
    run_experiment(small(trials=2, algorithms=["trivial"]), tmp_path / "b")
    doc = compare_plans([tmp_path / "a" / "bundle.json", tmp_path / "b" / "bundle.json"])
    assert sorted(r["algorithm"] for r in doc["table"]) == ["gradient", "trivial"]
    assert len(doc["scatter"]) == 2


def test_compare_rejects_mixed_experiments(tmp_path, mlp_bundle):
    out, _ = mlp_bundle
    run_experiment(small(trials=1, algorithms=["gradient"]), tmp_path)
    with pytest.raises(ValueError, match="different experiments"):
        compare_plans([out / "bundle.json", tmp_path / "bundle.json"])
    with pytest.raises(ValueError):
        compare_plans([])


# -- CLI --------------------------------------------------------------------

def run(args, code=0):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == code, res.output
    return res


def test_cli_gen_data(tmp_path):
    res = run(["--seed", 3, "--out", tmp_path, "gen-data", "--kind", "two_moons", "--n", 40])
    ds = load_csv(res.output.strip())
    assert ds.m == 40
    run(["--out", tmp_path / "idx", "gen-data", "--kind", "digits8x8", "--n", 20, "--format", "idx"])
    imgs = sorted((tmp_path / "idx").glob("*-inputs.idx"))[0]
    labels = sorted((tmp_path / "idx").glob("*-labels.idx"))[0]
    assert load_idx(imgs, labels).m == 20
    assert json.loads((tmp_path / "idx" / "MANIFEST.json").read_text())["command"] == "gen-data"


def test_cli_analyze_plan_simulate(tmp_path):
    run(["--out", tmp_path, "analyze", "--fixture", "mlp", "--probes", 2])
    prof = tmp_path / "profile.json"
    assert prof.exists()
    res = run(["--out", tmp_path, "plan", "--profile", prof, "--algorithm", "gradient"])
    assert "sigma1" in res.output
    run(["--out", tmp_path, "plan", "--profile", prof, "--algorithm", "hessian_baseline"])
    res = run(["--out", tmp_path, "--seed", 1, "simulate", "--fixture", "mlp",
               "--plan", tmp_path / "plan_gradient.json", "--trials", 2])
    assert "mean_dloss" in res.output
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["trial_losses"]) == 2 and rep["seed"] == 1


def test_cli_plan_custom_levels(tmp_path):
    run(["--out", tmp_path, "analyze", "--fixture", "mlp", "--probes", 0])
    res = run(["--out", tmp_path, "plan", "--profile", tmp_path / "profile.json", "--levels", "1e-6,1e-2",
               "--algorithm", "bruteforce"])
    assert set(res.output.split(": ")[1].split()) == {"q1e-06", "q0.01"}


def test_cli_experiment_and_compare(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({**SMALL_NET, "algorithms": ["gradient", "trivial"], "trials": 2}))
    out = tmp_path / "run"
    res = run(["--config", cfg, "--out", out, "experiment"])
    assert "spearman" in res.output
    first = (out / "bundle.json").read_bytes()
    run(["--config", cfg, "--out", out, "--workers", 2, "experiment"])
    assert (out / "bundle.json").read_bytes() == first
    res = run(["--out", tmp_path / "cmp", "compare", out / "bundle.json"])
    assert "gradient" in res.output
    assert (tmp_path / "cmp" / "comparison.json").exists()


def test_cli_train_from_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL_NET))
    res = run(["--config", cfg, "--out", tmp_path, "train"])
    assert (tmp_path / "model.prcl").exists() and "grad_norm" in res.output


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("fixture: mlp\nwidgets: 3\n")
    res = run(["--config", bad, "--out", tmp_path, "experiment"], code=2)
    assert "widgets" in res.output
    run(["--out", tmp_path, "analyze"], code=2)  # usage error: no network
    broken = tmp_path / "broken.prcl"
    broken.write_bytes(b"PRCL" + b"\0" * 40)
    run(["--out", tmp_path, "analyze", "--checkpoint", broken, "--data", tmp_path / "bad.yaml"], code=1)
