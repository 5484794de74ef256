"""Command-line interface: ``prcl [--seed N] [--out DIR] [--config FILE] [--workers N] COMMAND``.

A config file (YAML or JSON) supplies the experiment config for ``experiment``;
a top-level key named after any other command supplies that command's option
defaults.  Flags given on the command line win.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from . import __version__
from .data import DATASET_KINDS, generate_dataset, load_csv, save_csv, write_idx
from .fixtures import FIXTURES, fixture_data, load_fixture, train_fixture
from .harness import (ALGORITHMS, ConfigError, ExperimentConfig, canonical_json, compare_plans, format_table,
                      level_list, load_network, run_experiment, sha256, split_data)
from .layout import (LayoutPlan, QuantLevelSet, plan_bruteforce, plan_gradient, plan_hessian_baseline,
                     plan_storage_aware, plan_trivial)
from .network import load_checkpoint, save_checkpoint
from .noise import NOISE_KINDS, NoiseModel, simulate
from .sensitivity import AGGREGATES, SensitivityProfile, full_profile


def _read_config(path) -> dict:
    text = Path(path).read_text()
    return (yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)) or {}


def _out(ctx) -> Path:
    out = Path(ctx.obj["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, params: dict, seeds: dict, stage: str = "complete") -> None:
    doc = {"tool": "prcl", "tool_version": __version__, "command": command,
           "config_hash": sha256(canonical_json(params)), "seeds": seeds, "stage": stage,
           "status": "ok" if stage == "complete" else "failed"}
    (out / "MANIFEST.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _network_and_data(fixture, checkpoint, data, shape, split):
    if fixture:
        net = load_fixture(fixture)
        ds = fixture_data(fixture)[split] if not data else None
    elif checkpoint:
        net = load_checkpoint(checkpoint)
        ds = None
    else:
        raise click.UsageError("give --fixture or --checkpoint")
    if data:
        ds = load_csv(data, tuple(int(s) for s in shape.split(",")) if shape else None)
    if ds is None:
        raise click.UsageError("give --data for a checkpoint")
    return net, ds


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except (ConfigError, ValueError, KeyError) as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(2)
        except Exception as err:
            click.echo(f"error: {type(err).__name__}: {err}", err=True)
            sys.exit(1)


@click.group(cls=_Group)
@click.option("--seed", type=int, default=None, help="Seed for noise, probes and data (overrides the config).")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True, help="Output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML or JSON config file.")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker threads; never changes results.")
@click.version_option(__version__, prog_name="prcl")
@click.pass_context
def main(ctx, seed, out, config_path, workers):
    """Gradient-ranked mixed-precision layout experiments."""
    cfg = _read_config(config_path) if config_path else {}
    ctx.obj = {"seed": seed, "out": out, "config": cfg, "workers": workers}
    ctx.default_map = {k: v for k, v in cfg.items() if isinstance(v, dict) and k in main.commands}


@main.command("gen-data")
@click.option("--kind", type=click.Choice(DATASET_KINDS), required=True)
@click.option("--n", type=int, required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "idx"]), default="csv", show_default=True)
@click.pass_context
def gen_data(ctx, kind, n, fmt):
    """Write a synthetic labeled dataset."""
    seed = ctx.obj["seed"] or 0
    ds = generate_dataset(kind, n, seed)
    out = _out(ctx)
    if fmt == "csv":
        path = out / f"{ds.id}.csv"
        save_csv(ds, path)
    else:
        path = out / f"{ds.id}-inputs.idx"
        write_idx(ds.inputs, path)
        write_idx(ds.labels.astype("uint8"), out / f"{ds.id}-labels.idx")
    _manifest(out, "gen-data", {"kind": kind, "n": n, "format": fmt}, {"data": seed})
    click.echo(str(path))


@main.command()
@click.option("--fixture", type=click.Choice(list(FIXTURES)), default=None, help="Retrain a shipped fixture.")
@click.pass_context
def train(ctx, fixture):
    """Train a network and write a checkpoint.

    With --fixture, retrain that fixture's recipe; otherwise the config's
    network, dataset and train sections are used.
    """
    out = _out(ctx)
    if fixture:
        net = train_fixture(fixture, log=click.echo)
        params, seeds = {"fixture": fixture}, {"init": FIXTURES[fixture].init_seed, "data": FIXTURES[fixture].data_seed}
        name = fixture
    else:
        cfg = ExperimentConfig.from_dict(ctx.obj["config"])
        if not cfg.network:
            raise click.UsageError("train needs --fixture or a config with a network section")
        net = load_network(cfg, split_data(cfg))
        params, seeds, name = cfg.to_dict(), cfg.seeds(), "model"
    path = save_checkpoint(net, out / f"{name}.prcl", net.meta)
    _manifest(out, "train", params, seeds)
    click.echo(f"{path}  loss={net.meta.get('final_loss'):.6g}  grad_norm={net.meta.get('grad_norm'):.3e}")


_net_options = [
    click.option("--fixture", type=click.Choice(list(FIXTURES)), default=None),
    click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None, help="CSV dataset."),
    click.option("--shape", default=None, help="Per-sample shape for CSV data, e.g. 1,8,8."),
]


def _with_net_options(f):
    for opt in reversed(_net_options):
        f = opt(f)
    return f


@main.command()
@_with_net_options
@click.option("--probes", type=int, default=200, show_default=True, help="Hutchinson probes (0 skips traces).")
@click.option("--aggregate", type=click.Choice(AGGREGATES), default="norm-of-sum", show_default=True)
@click.pass_context
def analyze(ctx, fixture, checkpoint, data, shape, probes, aggregate):
    """Profile per-unit sensitivities on the calibration set."""
    net, calib = _network_and_data(fixture, checkpoint, data, shape, "calib")
    seed = ctx.obj["seed"] or 0
    prof = full_profile(net, calib, probes or None, seed, aggregate, ctx.obj["workers"])
    out = _out(ctx)
    (out / "profile.json").write_text(prof.to_json() + "\n")
    _manifest(out, "analyze", {"fixture": fixture, "checkpoint": checkpoint, "data": data,
                               "probes": probes, "aggregate": aggregate}, {"probe": seed})
    for r in prof.records:
        click.echo(f"unit {r.layer_index:>2} {r.kind:<16} input={r.input_grad_norm:.4e} "
                   f"param={r.param_grad_norm if r.param_grad_norm is not None else '-'} "
                   f"trace={r.hessian_trace if r.hessian_trace is not None else '-'}")


@main.command()
@click.option("--profile", "profile_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--algorithm", type=click.Choice([a for a in ALGORITHMS if a != "random_k"]), default="gradient",
              show_default=True)
@click.option("--levels", default="paper", show_default=True,
              help="'paper' or comma-separated max errors, one distinct level each.")
@click.option("--mode", type=click.Choice(["shared", "split"]), default="shared", show_default=True)
@click.pass_context
def plan(ctx, profile_path, algorithm, levels, mode):
    """Assign levels to units from a saved profile."""
    prof = SensitivityProfile.from_dict(json.loads(Path(profile_path).read_text()))
    lv = level_list(levels if levels == "paper" else [float(x) for x in levels.split(",")])
    n = len(prof)
    full = QuantLevelSet.partition(lv, n)
    if algorithm == "gradient":
        p = plan_gradient(prof, full)
    elif algorithm == "trivial":
        p = plan_trivial(full, n)
    elif algorithm == "storage_aware":
        p = plan_storage_aware(prof, prof, full, mode)
    elif algorithm == "hessian_baseline":
        owners = sum(r.has_params for r in prof.records)
        p = plan_hessian_baseline(prof, QuantLevelSet.partition(lv, owners))
    else:
        p = plan_bruteforce(prof, full, "bound")[0]
    out = _out(ctx)
    path = out / f"plan_{algorithm}.json"
    path.write_text(p.to_json([r.has_params for r in prof.records]) + "\n")
    _manifest(out, "plan", {"profile": profile_path, "algorithm": algorithm, "levels": levels, "mode": mode}, {})
    click.echo(f"{path}: " + " ".join(p.ids()))


@main.command("simulate")
@_with_net_options
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--trials", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--noise", type=click.Choice(NOISE_KINDS), default="uniform", show_default=True)
@click.option("--split", type=click.Choice(["eval", "calib", "train", "test"]), default="eval", show_default=True,
              help="Fixture split to evaluate on.")
@click.pass_context
def simulate_cmd(ctx, fixture, checkpoint, data, shape, plan_path, trials, noise, split):
    """Inject the plan's noise and report the loss change."""
    net, ds = _network_and_data(fixture, checkpoint, data, shape, split)
    p = LayoutPlan.from_dict(json.loads(Path(plan_path).read_text()))
    seed = ctx.obj["seed"] or 0
    rep = simulate(net, ds, p, NoiseModel(noise), trials, seed, workers=ctx.obj["workers"])
    out = _out(ctx)
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "trials.csv").write_text(rep.to_csv())
    _manifest(out, "simulate", {"fixture": fixture, "checkpoint": checkpoint, "data": data, "plan": plan_path,
                                "trials": trials, "noise": noise, "split": split}, {"noise": seed})
    click.echo(f"baseline={rep.baseline_loss:.8g} mean_dloss={rep.mean_delta:.5e} std={rep.std_delta:.3e}")


@main.command()
@click.option("--trials", type=click.IntRange(min=1), default=None, help="Override the config's trial count.")
@click.option("--fixture", type=click.Choice(list(FIXTURES)), default=None, help="Override the config's network.")
@click.pass_context
def experiment(ctx, trials, fixture):
    """Run the full pipeline and write bundle.json, trials.csv, summary.txt, MANIFEST.json."""
    raw = {k: v for k, v in ctx.obj["config"].items() if k not in main.commands}
    if fixture:
        raw.update({"fixture": fixture, "checkpoint": None, "network": None})
    cfg = ExperimentConfig.from_dict(raw)
    if ctx.obj["seed"] is not None:
        cfg.seed = ctx.obj["seed"]
    if trials is not None:
        cfg.trials = trials
    bundle = run_experiment(cfg, ctx.obj["out"], ctx.obj["workers"])
    click.echo(format_table(bundle), nl=False)


@main.command()
@click.argument("bundles", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def compare(ctx, bundles):
    """Merge bundles of one experiment into a comparison document."""
    doc = compare_plans(bundles)
    out = _out(ctx)
    (out / "comparison.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _manifest(out, "compare", {"bundles": list(bundles)}, {})
    for r in doc["table"]:
        click.echo(f"{r['algorithm']:<18} mean={r['mean_delta']:.5e} bound={r['bound_value']:.3e} "
                   f"wins={doc['wins'][r['algorithm']]}")
    rho = doc["rank_correlation"]
    click.echo(f"spearman(bound, mean dloss) = {'n/a' if rho is None else f'{rho:.3f}'}")


if __name__ == "__main__":
    main()
