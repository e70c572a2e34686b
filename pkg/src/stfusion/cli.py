"""Command-line entry point.

    stfusion <generate|train|sample-eval|report|oracle> --config PATH
             [--workdir PATH] [--seed INT] [--jobs INT]

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 missing artifact,
5 enumeration size guard.
"""
from __future__ import annotations

import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import data as D
from . import lab
from .config import RunConfig, load_run_config, override_seed
from .errors import ConfigurationError, SizeGuardError, TrainingDiverged
from .gates import GateParams, ObjectiveConfig
from .model import FusionStrategy, build_template, enumerate_all_strategies

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4
EXIT_GUARD = 5

DATASET_FILE = "dataset.stfd"
WEIGHTS_FILE = "weights.npz"
GATES_FILE = "gates.json"
HISTORY_FILE = "history.json"
EVALS_FILE = "evaluations.csv"
BEST_FILE = "best_strategy.json"
PREFERENCE_FILE = "preference.csv"
ORACLE_FILE = "oracle.csv"
RHO_FILE = "rho.json"


def _load_config(config_path, workdir, seed) -> tuple:
    try:
        cfg = load_run_config(config_path)
    except ConfigurationError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if seed is not None:
        cfg = override_seed(cfg, seed)
    wd = Path(workdir)
    wd.mkdir(parents=True, exist_ok=True)
    return cfg, wd


def _require(path: Path):
    if not path.exists():
        click.echo(f"missing artifact: {path} (run the earlier pipeline stages first)", err=True)
        sys.exit(EXIT_MISSING)
    return path


def _load_dataset_splits(cfg: RunConfig, wd: Path):
    dataset = D.load(_require(wd / DATASET_FILE))
    return D.split(dataset, cfg.data.train_frac, cfg.data.seed)


def _save_weights(net, path):
    arrays = {p.identifier: p.data for p in net.parameters()}
    for bn in net.batch_norms():
        prefix = bn.gamma.identifier.rsplit("/", 1)[0]
        arrays[f"{prefix}/running_mean"] = bn.running_mean
        arrays[f"{prefix}/running_var"] = bn.running_var
        arrays[f"{prefix}/initialized"] = np.array(1.0 if bn.initialized else 0.0)
    np.savez(path, **arrays)


def _load_weights(net, path):
    with np.load(path) as archive:
        for p in net.parameters():
            p.data = archive[p.identifier].copy()
        for bn in net.batch_norms():
            prefix = bn.gamma.identifier.rsplit("/", 1)[0]
            bn.running_mean = archive[f"{prefix}/running_mean"].copy()
            bn.running_var = archive[f"{prefix}/running_var"].copy()
            bn.initialized = bool(archive[f"{prefix}/initialized"])


config_option = click.option("--config", "config_path", required=True, type=click.Path())
workdir_option = click.option("--workdir", default="run", show_default=True, type=click.Path())
seed_option = click.option("--seed", default=None, type=int, help="Override schedule/data/sampling seeds.")


@click.group()
def main():
    """Spatiotemporal fusion strategy lab."""


@main.command()
@config_option
@workdir_option
@seed_option
def generate(config_path, workdir, seed):
    """Generate the synthetic clip dataset for this run."""
    cfg, wd = _load_config(config_path, workdir, seed)
    dataset = D.generate_synthetic(cfg.data.spec, cfg.data.seed)
    D.save(dataset, wd / DATASET_FILE)
    click.echo(json.dumps(dataset.manifest, sort_keys=True))
    click.echo(f"wrote {wd / DATASET_FILE} ({len(dataset)} clips)")


@main.command()
@config_option
@workdir_option
@seed_option
def train(config_path, workdir, seed):
    """Run warmup and variational DropPath training on the template network."""
    cfg, wd = _load_config(config_path, workdir, seed)
    train_set, val_set = _load_dataset_splits(cfg, wd)
    net = build_template(cfg.template, seed=cfg.schedule.seed)
    params = GateParams.for_config(cfg.template, init_drop=0.1, tau=1.0)
    objective_cfg = ObjectiveConfig(k=cfg.objective_k, n_train=len(train_set))
    try:
        history = lab.train_template(net, params, train_set, val_set, cfg.schedule, objective_cfg)
    except TrainingDiverged as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(EXIT_DIVERGED)
    _save_weights(net, wd / WEIGHTS_FILE)
    params.save(wd / GATES_FILE)
    with open(wd / HISTORY_FILE, "w") as f:
        json.dump(history, f, indent=2, sort_keys=True)
    click.echo(f"trained {len(history)} epochs; wrote {wd / WEIGHTS_FILE}, {wd / GATES_FILE}, {wd / HISTORY_FILE}")


@main.command(name="sample-eval")
@config_option
@workdir_option
@seed_option
def sample_eval(config_path, workdir, seed):
    """Sample strategies from the posterior and evaluate them training-free."""
    cfg, wd = _load_config(config_path, workdir, seed)
    train_set, val_set = _load_dataset_splits(cfg, wd)
    net = build_template(cfg.template, seed=cfg.schedule.seed)
    _load_weights(net, _require(wd / WEIGHTS_FILE))
    params = GateParams.load(_require(wd / GATES_FILE))
    rng = np.random.default_rng(cfg.sampling.seed)
    strategies = lab.sample_strategies(net, params, cfg.sampling.count, rng)
    recal = train_set if cfg.sampling.recalibrate_bn else None
    evals = [lab.evaluate_strategy(net, s, val_set, recalibrate=recal) for s in strategies]
    lab.write_evaluations_csv(evals, wd / EVALS_FILE)
    best = lab.select_best(evals) if evals else None
    if best is not None:
        with open(wd / BEST_FILE, "w") as f:
            json.dump(
                {
                    "strategy": best.strategy.to_json(),
                    "val_accuracy": best.val_accuracy,
                    "active_params": best.active_param_count,
                    "mult_adds": best.mult_add_proxy,
                },
                f,
                indent=2,
                sort_keys=True,
            )
    click.echo(f"evaluated {len(evals)} strategies; wrote {wd / EVALS_FILE}, {wd / BEST_FILE}")


@main.command()
@config_option
@workdir_option
@seed_option
def report(config_path, workdir, seed):
    """Write the per-layer fusion preference report."""
    cfg, wd = _load_config(config_path, workdir, seed)
    params = GateParams.load(_require(wd / GATES_FILE))
    with open(_require(wd / BEST_FILE)) as f:
        best = FusionStrategy.from_json(json.load(f)["strategy"])
    rep = lab.layer_preference_report(params, best)
    rep.write_csv(wd / PREFERENCE_FILE)
    click.echo(f"wrote {wd / PREFERENCE_FILE} ({len(rep.rows)} layers)")


def _oracle_worker(args):
    index, strategy_json, cfg_blob = args
    import pickle

    cfg, train_set, val_set = pickle.loads(cfg_blob)
    strategy = FusionStrategy.from_json(json.loads(strategy_json))
    acc = lab.train_standalone(strategy, cfg.template, train_set, val_set, cfg.schedule)
    return index, acc


@main.command()
@config_option
@workdir_option
@seed_option
@click.option("--jobs", default=1, show_default=True, type=int, help="Parallel standalone trainings.")
def oracle(config_path, workdir, seed, jobs):
    """Train every enumerated strategy standalone and compare to the posterior."""
    import pickle

    cfg, wd = _load_config(config_path, workdir, seed)
    try:
        strategies = enumerate_all_strategies(cfg.template.total_layers)
    except SizeGuardError as exc:
        click.echo(f"size guard: {exc}", err=True)
        sys.exit(EXIT_GUARD)
    train_set, val_set = _load_dataset_splits(cfg, wd)
    net = build_template(cfg.template, seed=cfg.schedule.seed)
    _load_weights(net, _require(wd / WEIGHTS_FILE))

    recal = train_set if cfg.sampling.recalibrate_bn else None
    posterior = [
        lab.evaluate_strategy(net, s, val_set, recalibrate=recal).val_accuracy for s in strategies
    ]

    if jobs > 1:
        blob = pickle.dumps((cfg, train_set, val_set))
        tasks = [(i, json.dumps(s.to_json(), sort_keys=True), blob) for i, s in enumerate(strategies)]
        results = {}
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for index, acc in pool.map(_oracle_worker, tasks):
                results[index] = acc
        oracle_accs = [results[i] for i in range(len(strategies))]
    else:
        try:
            oracle_accs = [
                lab.train_standalone(s, cfg.template, train_set, val_set, cfg.schedule)
                for s in strategies
            ]
        except TrainingDiverged as exc:
            click.echo(f"oracle training diverged: {exc}", err=True)
            sys.exit(EXIT_DIVERGED)

    import csv as _csv

    with open(wd / ORACLE_FILE, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["strategy_json", "oracle_accuracy", "posterior_accuracy"])
        for s, oa, pa in zip(strategies, oracle_accs, posterior):
            writer.writerow([json.dumps(s.to_json(), sort_keys=True), repr(oa), repr(pa)])
    rho = lab.rank_correlation(posterior, oracle_accs)
    with open(wd / RHO_FILE, "w") as f:
        json.dump(
            {
                "seed": cfg.schedule.seed,
                "spearman_rho": rho,
                "oracle_accuracies": oracle_accs,
                "posterior_accuracies": posterior,
            },
            f,
            indent=2,
            sort_keys=True,
        )
    click.echo(f"oracle over {len(strategies)} strategies: spearman rho = {rho:.4f}")


if __name__ == "__main__":
    main()
