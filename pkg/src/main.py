"""
Main Entry Point for XAIGuard
Command-line orchestration of training, attacks, defense and forensics
"""
import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Tuple

import pandas as pd

# Add src to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.attack import AttackConfig, attack_grid, impute_trigger, run_attack
from src.config import EXIT_OK, LOG_LEVEL, WORKERS
from src.data import DatasetSpec, load_dataset, take
from src.defense import (
    compare_internal_representation,
    evaluate_with_defense,
    harden_model,
    order_dataset,
    softplus_baseline,
)
from src.errors import ConfigError, exit_code_for
from src.explain import explain_maps
from src.forensics import (
    aggregate_similarity,
    batch_size_ablation,
    layerwise_similarity_report,
    measure_model,
    scenario_matrix_run,
)
from src.nn import build_model, evaluate_accuracy, train_clean
from src.reports import RunMeta, write_csv, write_json, write_map_csv
from src.runconfig import RunConfig, load_run_config
from src.snapshot import load_weights, read_snapshot, save_weights
from src.utils.io import sha256_file

# Setup logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)
logger = logging.getLogger(__name__)

COMMANDS = ['train', 'attack', 'defend', 'analyze', 'ablate', 'scenario', 'softplus', 'inspect']


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.run.out_dir, name)


def _meta(command: str, config: RunConfig) -> RunMeta:
    meta = RunMeta(command, config.echo(), config.seed)
    meta.seeds = config.seed_table()
    return meta


def _data(config: RunConfig):
    return load_dataset(config.dataset, config.seed)


def _snapshot_tags(config: AttackConfig, norm_mode: str) -> dict:
    return {
        'attack_kind': config.kind.value,
        'exp_loss': config.exp_loss.value,
        'explainer': config.explainer.value,
        'attack_seed': config.seed,
        'norm_mode': norm_mode,
        'param_scope': config.param_scope,
        'train_norm_mode': config.train_norm_mode.value,
    }


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"{what} snapshot path is required")
    if not os.path.exists(path):
        raise ConfigError(f"{what} snapshot not found: {path}")
    return path


def _check_same_arch(a, b, what: str):
    if a.arch_spec != b.arch_spec:
        raise ConfigError(f"Architecture mismatch between {what}: {a.arch_spec.canonical()} vs {b.arch_spec.canonical()}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(config: RunConfig) -> Dict[str, str]:
    """Clean training: snapshot plus per-epoch log"""
    meta = _meta('train', config)
    train_set, test_set = _data(config)
    model = build_model(config.arch, config.seed)
    logger.info(f"Training {config.arch.name} on {len(train_set)} samples ({config.train.epochs} epochs, {config.train.norm_mode})")
    model, log = train_clean(model, train_set, config.train, config.seed)

    path = _out(config, 'clean.xgw')
    meta.add_snapshot(path, save_weights(model, path, {'norm_mode': model.norm_mode.value}))
    log_path = write_csv(log, _out(config, 'train_log.csv'))
    meta.add_output(log_path)
    meta.extra['test_accuracy'] = evaluate_accuracy(model, test_set)
    logger.info(f"Clean test accuracy {meta.extra['test_accuracy']:.3f}")
    meta.write(config.run.out_dir)
    return {'snapshot': path, 'log': log_path}


def _attack_cell(task: Tuple[str, dict, int, dict, str]) -> Tuple[str, str, str, str]:
    """One attack grid cell; top-level so process pools can pickle it"""
    clean_path, dataset_values, seed, attack_values, out_dir = task
    config = AttackConfig(**attack_values)
    train_set, test_set = load_dataset(DatasetSpec(**dataset_values), seed)
    clean = load_weights(clean_path)
    attacked, log = run_attack(clean, train_set, config, eval_set=test_set)
    snapshot_path = os.path.join(out_dir, f"attacked_{config.label}.xgw")
    digest = save_weights(attacked, snapshot_path, _snapshot_tags(config, attacked.norm_mode.value))
    log_path = write_csv(log, os.path.join(out_dir, f"attack_log_{config.label}.csv"))
    return config.label, snapshot_path, digest, log_path


def cmd_attack(config: RunConfig, clean_path: str, grid: bool = False, workers: int = 1) -> List[str]:
    """Fine-tune the clean snapshot into one attacked snapshot, or one per grid cell"""
    meta = _meta('attack', config)
    clean_path = _require(clean_path, 'Clean')
    if grid:
        base = config.attack.model_dump(by_alias=True, exclude={'kind', 'exp_loss', 'explainer', 'seed',
                                                                 'target_class', 'target_expl'})
        cells = attack_grid(config.grid.kinds, config.grid.losses, config.grid.explainers,
                            config.grid.seeds, base, config.grid.target_class)
    else:
        cells = [config.attack]
    tasks = [(clean_path, config.dataset.model_dump(), config.seed, cell.model_dump(by_alias=True),
              config.run.out_dir) for cell in cells]
    logger.info(f"Running {len(tasks)} attack cell(s) with {workers} worker(s)")

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_attack_cell, tasks))
    else:
        results = [_attack_cell(task) for task in tasks]

    paths = []
    for label, snapshot_path, digest, log_path in results:
        meta.add_snapshot(snapshot_path, digest)
        meta.add_output(log_path)
        paths.append(snapshot_path)
    meta.snapshots[os.path.basename(clean_path)] = sha256_file(clean_path)
    meta.extra['grid'] = [label for label, *_ in results]
    meta.write(config.run.out_dir)
    return paths


def cmd_defend(config: RunConfig, attacked_path: str, reference_path: str) -> str:
    """Attack-mode and defense-mode rows for one attacked snapshot"""
    meta = _meta('defend', config)
    attacked = load_weights(_require(attacked_path, 'Attacked'))
    reference = load_weights(_require(reference_path, 'Reference'))
    _check_same_arch(attacked, reference, 'attacked and reference snapshots')
    _, test_set = _data(config)
    spec = config.metrics_spec()
    explainer = config.attack.explainer
    ordered = order_dataset(test_set, config.defense)

    reports = [
        measure_model(attacked, ordered, spec, explainer, reference, config.defense.eval_batch_size,
                      mode='attack', order_seed=config.defense.order_seed),
        evaluate_with_defense(attacked, test_set, config.defense, explainer, spec, reference),
    ]
    csv_path = write_csv([r.table_row() for r in reports], _out(config, 'defense_report.csv'))
    json_path = write_json([r.model_dump(mode='json') for r in reports], _out(config, 'defense_report.json'))
    for path in (attacked_path, reference_path):
        meta.snapshots[os.path.basename(path)] = sha256_file(path)
    meta.add_output(csv_path)
    meta.add_output(json_path)
    meta.write(config.run.out_dir)
    logger.info(f"ASR attack {reports[0].asr} -> defense {reports[1].asr}")
    return csv_path


def cmd_analyze(config: RunConfig, reference_path: str, snapshot_paths: List[str]) -> Tuple[str, str]:
    """Layerwise CKA/SRC of each snapshot against the reference, in long format plus group summary"""
    meta = _meta('analyze', config)
    reference = read_snapshot(_require(reference_path, 'Reference'))
    if not snapshot_paths:
        raise ConfigError("analyze needs at least one snapshot to compare")
    reports = []
    for path in snapshot_paths:
        snapshot = read_snapshot(_require(path, 'Compared'))
        group = {'norm_mode': snapshot.norm_mode}
        tags = snapshot.tags
        group.update({k: tags[k] for k in ('attack_kind', 'exp_loss', 'explainer', 'attack_seed') if k in tags})
        reports.append(layerwise_similarity_report(reference, snapshot, group))
        meta.snapshots[os.path.basename(path)] = sha256_file(path)

    long, summary = aggregate_similarity(reports, group_keys=['norm_mode'])
    rows = []
    for path, report in zip(snapshot_paths, reports):
        frame = report.to_frame()
        frame.insert(0, 'snapshot', os.path.basename(path))
        rows.append(frame)
    layer_path = write_csv(pd.concat(rows, ignore_index=True), _out(config, 'similarity_layers.csv'))
    long_path = write_csv(long, _out(config, 'similarity_long.csv'))
    summary_path = write_csv(summary, _out(config, 'similarity_summary.csv'))
    for path in (layer_path, long_path, summary_path):
        meta.add_output(path)
    meta.snapshots[os.path.basename(reference_path)] = sha256_file(reference_path)
    meta.extra['flattening'] = reports[0].flattening
    meta.extra['grid'] = [r.group for r in reports]
    meta.write(config.run.out_dir)
    return long_path, summary_path


def cmd_ablate(config: RunConfig, attacked_path: str, reference_path: str) -> str:
    """Defended evaluation at each configured batch size"""
    meta = _meta('ablate', config)
    attacked = load_weights(_require(attacked_path, 'Attacked'))
    reference = load_weights(_require(reference_path, 'Reference'))
    _check_same_arch(attacked, reference, 'attacked and reference snapshots')
    _, test_set = _data(config)
    rows = batch_size_ablation(harden_model(attacked, config.defense.epsilon), test_set, config.ablation.sizes,
                               config.metrics_spec(), config.attack.explainer, reference, config.defense)
    path = write_csv(rows, _out(config, 'ablation.csv'))
    for snap in (attacked_path, reference_path):
        meta.snapshots[os.path.basename(snap)] = sha256_file(snap)
    meta.add_output(path)
    meta.write(config.run.out_dir)
    return path


SCENARIO_VARIANTS = {
    'C1': {},
    'C3': {'param_scope': 'core'},
    'C5': {'train_norm_mode': 'CFN'},
}


def cmd_scenario(config: RunConfig, clean_path: str) -> str:
    """C1..C6 table: attacked variants under BN evaluation and their CFN-hardened counterparts"""
    meta = _meta('scenario', config)
    clean = load_weights(_require(clean_path, 'Clean'))
    train_set, test_set = _data(config)
    attacked = {}
    for variant, changes in SCENARIO_VARIANTS.items():
        path = getattr(config.scenario, variant.lower())
        if path:
            model = load_weights(_require(path, variant))
            _check_same_arch(model, clean, f"clean and {variant} snapshots")
            attacked[variant] = model
            meta.snapshots[os.path.basename(path)] = sha256_file(path)
        elif config.scenario.attack_missing:
            cell = AttackConfig(**dict(config.attack.model_dump(by_alias=True), **changes))
            model, log = run_attack(clean, train_set, cell, eval_set=test_set)
            snapshot_path = _out(config, f"scenario_{variant}.xgw")
            meta.add_snapshot(snapshot_path, save_weights(model, snapshot_path,
                                                          _snapshot_tags(cell, model.norm_mode.value)))
            meta.add_output(write_csv(log, _out(config, f"scenario_{variant}_log.csv")))
            attacked[variant] = model
        else:
            attacked[variant] = None

    rows = scenario_matrix_run(clean, attacked, test_set, config.defense, config.metrics_spec(),
                               config.scenario.threshold)
    path = write_csv([r.model_dump() for r in rows], _out(config, 'scenarios.csv'))
    meta.snapshots[os.path.basename(clean_path)] = sha256_file(clean_path)
    meta.add_output(path)
    meta.write(config.run.out_dir)
    return path


def cmd_softplus_baseline(config: RunConfig) -> str:
    """Softplus(beta) clean model, attacked, measured with BN and with CFN"""
    meta = _meta('softplus', config)
    train_set, test_set = _data(config)
    clean, attacked, log, reports = softplus_baseline(train_set, test_set, config.arch, config.train,
                                                      config.attack, config.seed)
    for name, model in (('softplus_clean.xgw', clean), ('softplus_attacked.xgw', attacked)):
        path = _out(config, name)
        meta.add_snapshot(path, save_weights(model, path, {'activation': 'softplus',
                                                           'softplus_beta': model.arch_spec.softplus_beta}))
    meta.add_output(write_csv(log, _out(config, 'softplus_attack_log.csv')))
    path = write_csv([dict(r.table_row(), softplus_beta=r.metadata['softplus_beta']) for r in reports],
                     _out(config, 'softplus_report.csv'))
    meta.add_output(path)
    meta.extra['softplus_beta'] = reports[0].metadata['softplus_beta']
    meta.write(config.run.out_dir)
    return path


def cmd_inspect(config: RunConfig, snapshot_path: str) -> List[str]:
    """Map grids for a few test samples (clean and triggered) and the BN vs CFN representation grids"""
    meta = _meta('inspect', config)
    model = load_weights(_require(snapshot_path, 'Inspected'))
    _, test_set = _data(config)
    samples = take(test_set, config.explainer.inspect_samples)
    explainer = config.explainer.name
    written = []
    for tag, images in (('clean', samples.images), ('triggered', impute_trigger(samples.images, config.attack.trigger))):
        maps = explain_maps(model, images, samples.labels, explainer, config.explainer.target_layer,
                            config.explainer.batch_size)
        for i, m in enumerate(maps):
            written.append(write_map_csv(m, _out(config, f"map_{tag}_{i}.csv")))
    if model.norm_layers():
        triggered = impute_trigger(samples.images, config.attack.trigger)
        comparison = compare_internal_representation(model, triggered, batch_size=config.defense.eval_batch_size)
        for i in range(len(triggered)):
            written.append(write_map_csv(comparison.bn[i], _out(config, f"repr_bn_{i}.csv")))
            written.append(write_map_csv(comparison.cfn[i], _out(config, f"repr_cfn_{i}.csv")))
        meta.extra['representation_layer'] = comparison.layer
    for path in written:
        meta.add_output(path)
    meta.snapshots[os.path.basename(snapshot_path)] = sha256_file(snapshot_path)
    meta.write(config.run.out_dir)
    return written


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='XAIGuard - Explanation-aware backdoors and the CFN defense')
    parser.add_argument('command', choices=COMMANDS, help='Command to run')
    parser.add_argument('snapshots', nargs='*', help='Snapshots to compare (analyze)')
    parser.add_argument('--config', help='TOML run configuration')
    parser.add_argument('--seed', type=int, help='Root seed (overrides run.seed)')
    parser.add_argument('--out', help='Output directory (overrides run.out_dir)')
    parser.add_argument('--kind', choices=['sf', 'rh', 'fd'], help='Attack kind')
    parser.add_argument('--exp-loss', choices=['mse', 'dssim'], help='Explanation loss')
    parser.add_argument('--explainer', choices=['grad', 'gradcam'], help='Explanation method')
    parser.add_argument('--grid', action='store_true', help='Expand the attack grid (kinds x losses x explainers x seeds)')
    parser.add_argument('--batch-size', type=int, help='Defense evaluation batch size')
    parser.add_argument('--target-class', type=int, help='Attack target class')
    parser.add_argument('--workers', type=int, default=WORKERS, help='Parallel grid cells (default: %(default)s)')
    parser.add_argument('--clean', help='Clean snapshot (attack, scenario)')
    parser.add_argument('--attacked', help='Attacked snapshot (defend, ablate, inspect)')
    parser.add_argument('--reference', help='Un-attacked reference snapshot (defend, ablate, analyze)')
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    return {
        'run.seed': args.seed,
        'run.out_dir': args.out,
        'attack.kind': args.kind,
        'attack.exp_loss': args.exp_loss,
        'attack.explainer': args.explainer,
        'attack.target_class': args.target_class,
        'defense.eval_batch_size': args.batch_size,
    }


def dispatch(args: argparse.Namespace):
    config = load_run_config(args.config, overrides_from_args(args))
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    os.makedirs(config.run.out_dir, exist_ok=True)
    clean = args.clean or _out(config, 'clean.xgw')

    if args.command == 'train':
        return cmd_train(config)
    if args.command == 'attack':
        return cmd_attack(config, clean, grid=args.grid, workers=args.workers)
    if args.command == 'defend':
        return cmd_defend(config, args.attacked, args.reference or clean)
    if args.command == 'analyze':
        return cmd_analyze(config, args.reference or clean, args.snapshots)
    if args.command == 'ablate':
        return cmd_ablate(config, args.attacked, args.reference or clean)
    if args.command == 'scenario':
        return cmd_scenario(config, clean)
    if args.command == 'softplus':
        return cmd_softplus_baseline(config)
    if args.command == 'inspect':
        return cmd_inspect(config, args.attacked or clean)
    raise ConfigError(f"Unknown command '{args.command}'")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point with CLI argument parsing"""
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == 1:
            logger.error(f"Fatal error: {e}", exc_info=True)
        else:
            logger.error(f"{type(e).__name__}: {e}")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
