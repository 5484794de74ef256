"""End-to-end experiment: load or train, profile, plan, simulate, report.

A run writes into its output directory:

* ``bundle.json``: everything needed to recompute the comparison table.  It
  holds no wall times or paths, so equal configs and seeds give byte-equal
  files whatever the worker count.
* ``trials.csv``: one row per (algorithm, trial).
* ``summary.txt``: the comparison table as plain text.
* ``MANIFEST.json``: tool version, config hash, seeds, completed stage and
  per-stage wall times.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import spearmanr

from . import __version__
from .data import Dataset, generate_dataset, load_csv, load_idx
from .fixtures import FIXTURES, fixture_data, load_fixture, split_train
from .layout import (MAX_ASSIGNMENTS, PAPER_LEVELS, LayoutError, LayoutPlan, QuantLevel, QuantLevelSet,
                     bound_value, count_assignments, plan_bruteforce, plan_gradient, plan_hessian_baseline,
                     plan_storage_aware, plan_trivial, random_plans)
from .network import LayerSpec, Network, build_network, load_checkpoint, train
from .noise import NoiseModel, NoiseReport, simulate
from .sensitivity import SensitivityProfile, full_profile

SCHEMA_VERSION = 1
ALGORITHMS = ("gradient", "trivial", "storage_aware", "hessian_baseline", "bruteforce", "random_k")
STAGES = ("validate", "load", "profile", "plan", "simulate", "write", "complete")


class ConfigError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    """One experiment.  The network comes from ``fixture``, ``checkpoint`` or an
    inline ``network`` spec (which is then trained); data from the fixture or
    from ``dataset``."""

    fixture: str | None = None
    checkpoint: str | None = None
    network: dict | None = None
    dataset: dict | None = None
    test_size: int | None = None
    calibration: int = 256
    eval_on_calibration: bool = False
    levels: object = "paper"
    level_sizes: list[int] | None = None
    algorithms: list[str] = field(default_factory=lambda: list(ALGORITHMS))
    random_k: int = 10
    storage_mode: str = "shared"
    bruteforce_objective: str = "bound"
    trials: int = 20
    seed: int = 0
    probe_seed: int = 0
    probes: int = 200
    noise: dict = field(default_factory=lambda: {"kind": "uniform"})
    train: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        ver = d.pop("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {ver} is not supported (expected {SCHEMA_VERSION})")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        d = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        return cls.from_dict(d or {})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return sha256(canonical_json(self.to_dict()))

    def seeds(self) -> dict:
        out = {"noise": self.seed, "probe": self.probe_seed}
        if self.dataset and "seed" in self.dataset:
            out["data"] = self.dataset["seed"]
        if self.network and "init_seed" in self.network:
            out["init"] = self.network["init_seed"]
        return out

    def validate(self) -> None:
        sources = [x for x in (self.fixture, self.checkpoint, self.network) if x]
        if len(sources) != 1:
            raise ConfigError("give exactly one of fixture, checkpoint or network")
        if self.fixture and self.fixture not in FIXTURES:
            raise ConfigError(f"unknown fixture {self.fixture!r}; choose one of {', '.join(FIXTURES)}")
        if self.checkpoint and not Path(self.checkpoint).exists():
            raise ConfigError(f"checkpoint {self.checkpoint} does not exist")
        if not self.fixture and not self.dataset:
            raise ConfigError("a dataset is required unless a fixture is used")
        for key in ("csv", "idx_images", "idx_labels"):
            if self.dataset and key in self.dataset and not Path(self.dataset[key]).exists():
                raise ConfigError(f"dataset file {self.dataset[key]} does not exist")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.calibration < 1:
            raise ConfigError("calibration must be at least 1")
        bad = sorted(set(self.algorithms) - set(ALGORITHMS))
        if bad:
            raise ConfigError(f"unknown algorithms {bad}; choose from {', '.join(ALGORITHMS)}")
        if self.storage_mode not in ("shared", "split"):
            raise ConfigError("storage_mode must be shared or split")
        NoiseModel(**self.noise)


# ---------------------------------------------------------------------------
# stage helpers


def _dataset_from(spec: dict) -> Dataset:
    if "kind" in spec:
        return generate_dataset(spec["kind"], int(spec["n"]), int(spec.get("seed", 0)), **spec.get("params", {}))
    if "csv" in spec:
        shape = spec.get("shape")
        return load_csv(spec["csv"], tuple(shape) if shape else None)
    if "idx_images" in spec:
        return load_idx(spec["idx_images"], spec["idx_labels"])
    raise ConfigError("dataset needs kind, csv or idx_images")


def split_data(cfg: ExperimentConfig) -> dict[str, Dataset]:
    """train / calib / eval / test splits.  Calibration is the head of the
    training part and evaluation its remainder; ``test`` is held out."""
    if cfg.fixture and not cfg.dataset:
        parts = fixture_data(cfg.fixture, cfg.calibration)
    else:
        full = _dataset_from(cfg.dataset)
        n_test = cfg.test_size if cfg.test_size is not None else full.m // 4
        if not 0 <= n_test < full.m:
            raise ConfigError(f"test_size {n_test} leaves no training samples out of {full.m}")
        idx = np.arange(full.m)
        tr = full.subset(idx[: full.m - n_test], "train")
        if cfg.calibration >= tr.m:
            raise ConfigError(f"calibration size {cfg.calibration} must be below the {tr.m} training samples")
        parts = {"train": tr, "test": full.subset(idx[full.m - n_test:], "test"), **split_train(tr, cfg.calibration)}
    if cfg.eval_on_calibration:
        parts["eval"] = parts["calib"]
    return parts


def load_network(cfg: ExperimentConfig, parts: dict[str, Dataset]) -> Network:
    if cfg.fixture:
        return load_fixture(cfg.fixture)
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    spec = cfg.network
    layers = [LayerSpec.from_dict(d) for d in spec["layers"]]
    shape = tuple(spec["input_shape"]) if spec.get("input_shape") else None
    net = build_network(layers, spec.get("loss_kind", "softmax_cross_entropy"), int(spec.get("init_seed", 0)), shape)
    t = dict(cfg.train)
    train(net, parts["train"], opt=t.get("opt", "momentum"), lr=float(t.get("lr", 0.05)),
          epochs=int(t.get("epochs", 500)), grad_norm_target=float(t.get("grad_norm_target", 1e-3)),
          batch_size=t.get("batch_size"), seed=int(t.get("seed", 0)))
    return net


def level_list(levels) -> list[QuantLevel]:
    """Distinct levels from ``"paper"``, a list of errors or a list of level dicts."""
    if levels == "paper":
        return list(PAPER_LEVELS)
    if isinstance(levels, list) and levels and isinstance(levels[0], dict):
        return [QuantLevel(str(d["id"]), float(d["max_error"]), bool(d.get("lossless_upconvert", True)))
                for d in levels]
    if isinstance(levels, list) and levels:
        return QuantLevelSet.from_errors(levels).distinct()
    raise ConfigError("levels must be 'paper', a list of max errors or a list of level objects")


def make_level_set(cfg: ExperimentConfig, n: int) -> QuantLevelSet:
    return QuantLevelSet.partition(level_list(cfg.levels), n, cfg.level_sizes)


def make_plans(cfg: ExperimentConfig, net: Network, profile: SensitivityProfile) -> dict[str, LayoutPlan]:
    n = net.n_units
    levels = make_level_set(cfg, n)
    plans: dict[str, LayoutPlan] = {}
    for alg in cfg.algorithms:
        if alg == "gradient":
            plans["gradient"] = plan_gradient(profile, levels)
        elif alg == "trivial":
            plans["trivial"] = plan_trivial(levels, n)
        elif alg == "storage_aware":
            plans["storage_aware"] = plan_storage_aware(profile, profile, levels, cfg.storage_mode)
        elif alg == "hessian_baseline":
            owners = len(net.param_layers)
            # the baseline only ranks parameter-bearing units
            base = levels if levels.size == owners else QuantLevelSet.partition(level_list(cfg.levels), owners)
            plans["hessian_baseline"] = plan_hessian_baseline(profile, base)
        elif alg == "bruteforce":
            if count_assignments(levels) > MAX_ASSIGNMENTS:
                continue
            if cfg.bruteforce_objective != "bound":
                raise ConfigError("the harness runs bruteforce with objective=bound only")
            plans["bruteforce"] = plan_bruteforce(profile, levels, "bound")[0]
        elif alg == "random_k":
            for p in random_plans(levels, n, cfg.random_k, cfg.seed):
                plans[p.provenance] = p
    return plans


def _table(reports: dict[str, NoiseReport], plans: dict[str, LayoutPlan], profile: SensitivityProfile) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        rows.append({
            "algorithm": name,
            "mean_delta": rep.mean_delta,
            "std_delta": rep.std_delta,
            "bound_value": bound_value(profile, plans[name]),
            "trials": rep.trials,
        })
    return rows


def _rank_correlation(rows: list[dict]) -> float | None:
    if len(rows) < 3:
        return None
    b = [r["bound_value"] for r in rows]
    m = [r["mean_delta"] for r in rows]
    if len(set(b)) < 2 or len(set(m)) < 2:
        return None
    rho = spearmanr(b, m).statistic
    return None if math.isnan(rho) else float(rho)


def format_table(bundle: dict) -> str:
    lines = [f"baseline loss f(w) = {bundle['baseline_loss']:.8g}  "
             f"(eval samples {bundle['data']['eval_size']}, trials {bundle['config']['trials']})",
             f"{'algorithm':<18} {'mean dloss':>13} {'std':>11} {'bound':>11}"]
    for r in bundle["table"]:
        lines.append(f"{r['algorithm']:<18} {r['mean_delta']:>13.5e} {r['std_delta']:>11.3e} {r['bound_value']:>11.3e}")
    rho = bundle.get("rank_correlation")
    lines.append(f"spearman(bound, mean dloss) = {'n/a' if rho is None else f'{rho:.3f}'}")
    return "\n".join(lines) + "\n"


class Manifest:
    def __init__(self, out: Path, cfg: ExperimentConfig, command: str = "experiment"):
        self.path = out / "MANIFEST.json"
        self.data = {"tool": "prcl", "tool_version": __version__, "command": command,
                     "config_hash": cfg.hash(), "seeds": cfg.seeds(), "stage": "validate",
                     "status": "running", "timings": {}}
        self._t = time.perf_counter()
        self.write()

    def advance(self, done: str, nxt: str) -> None:
        now = time.perf_counter()
        self.data["timings"][done] = round(now - self._t, 6)
        self._t = now
        self.data["stage"] = nxt
        self.write()

    def fail(self, err: BaseException) -> None:
        self.data["status"] = "failed"
        self.data["error"] = f"{type(err).__name__}: {err}"
        self.write()

    def finish(self) -> None:
        self.data["status"] = "ok"
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out: str | Path, workers: int = 1) -> dict:
    """Run every stage and write the bundle; raises on failure after recording
    the failed stage in the MANIFEST."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, cfg)
    try:
        cfg.validate()
        man.advance("validate", "load")
        parts = split_data(cfg)
        net = load_network(cfg, parts)
        man.advance("load", "profile")
        probes = cfg.probes if "hessian_baseline" in cfg.algorithms else None
        profile = full_profile(net, parts["calib"], probes, cfg.probe_seed, workers=workers)
        (out / "profile.json").write_text(profile.to_json() + "\n")
        man.advance("profile", "plan")
        plans = make_plans(cfg, net, profile)
        man.advance("plan", "simulate")
        model = NoiseModel(**cfg.noise)
        reports = {name: simulate(net, parts["eval"], plan, model, cfg.trials, cfg.seed, workers=workers)
                   for name, plan in plans.items()}
        man.advance("simulate", "write")
        bundle = make_bundle(cfg, net, parts, profile, plans, reports)
        write_bundle(bundle, reports, out)
        man.advance("write", "complete")
        man.finish()
        return bundle
    except BaseException as err:
        man.fail(err)
        raise


def make_bundle(cfg, net, parts, profile, plans, reports) -> dict:
    rows = _table(reports, plans, profile)
    hp = [r.has_params for r in profile.records]
    net_id = sha256(canonical_json(net.spec_dict()) + net.flat_params().tobytes().hex())[:16]
    data_id = parts["eval"].fingerprint()
    randoms = [r for r in rows if r["algorithm"].startswith("random_")]
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "experiment_id": f"{net_id}-{data_id}",
        "config": cfg.to_dict(),
        "network": {"id": net_id, "spec": net.spec_dict(), "param_count": net.param_count,
                    "grad_norm": net.meta.get("grad_norm")},
        "data": {"train_id": parts["train"].id, "calib_id": parts["calib"].id, "eval_id": parts["eval"].id,
                 "eval_fingerprint": data_id, "calib_size": parts["calib"].m, "eval_size": parts["eval"].m,
                 "eval_split": "calibration" if cfg.eval_on_calibration else "train-remainder"},
        "baseline_loss": next(iter(reports.values())).baseline_loss if reports else None,
        "profile": profile.to_dict(),
        "plans": {k: p.to_dict(hp) for k, p in plans.items()},
        "reports": {k: r.to_dict() for k, r in reports.items()},
        "table": rows,
        "random_worst": max((r["mean_delta"] for r in randoms), default=None),
        "rank_correlation": _rank_correlation(rows),
    }


def write_bundle(bundle: dict, reports: dict[str, NoiseReport], out: Path) -> None:
    (out / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    csv_text = "".join(r.to_csv().split("\n", 1)[1] if i else r.to_csv()
                       for i, r in enumerate(reports.values()))
    (out / "trials.csv").write_text(csv_text)
    (out / "summary.txt").write_text(format_table(bundle))


def recompute_table(bundle: dict) -> list[dict]:
    """Rebuild the table from the raw per-trial losses in a bundle."""
    prof = SensitivityProfile.from_dict(bundle["profile"])
    rows = []
    for name, rd in bundle["reports"].items():
        rep = NoiseReport.from_dict(rd)
        plan = LayoutPlan.from_dict(bundle["plans"][name])
        rows.append({"algorithm": name, "mean_delta": rep.mean_delta, "std_delta": rep.std_delta,
                     "bound_value": bound_value(prof, plan), "trials": rep.trials})
    return rows


def compare_plans(paths) -> dict:
    """Merge bundles of one experiment (same network and data)."""
    bundles = [json.loads(Path(p).read_text()) for p in paths]
    if not bundles:
        raise ValueError("no bundles to compare")
    ids = {b["experiment_id"] for b in bundles}
    if len(ids) > 1:
        raise ValueError(f"bundles come from different experiments: {sorted(ids)}")
    merged: dict[str, dict] = {}
    for b in bundles:
        for row in b["table"]:
            merged.setdefault(row["algorithm"], row)
    rows = list(merged.values())
    wins = {r["algorithm"]: sum(r["mean_delta"] < o["mean_delta"] for o in rows if o is not r) for r in rows}
    losses = {r["algorithm"]: sum(r["mean_delta"] > o["mean_delta"] for o in rows if o is not r) for r in rows}
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment_id": ids.pop(),
        "table": rows,
        "wins": wins,
        "losses": losses,
        "scatter": [[r["bound_value"], r["mean_delta"]] for r in rows],
        "rank_correlation": _rank_correlation(rows),
    }
