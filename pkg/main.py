"""
TraDy - memory-budgeted sparse backpropagation experiments.

Run this file to use the command line:
    python main.py gen-data --out data
    python main.py pretrain --config pretrain.json --out runs/pretrain
    python main.py finetune --config transfer.json --strategy topk_random --budget 900
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

# Ensure we can import from src
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import APP_NAME, APP_VERSION, ExperimentConfig, get_log_level, get_output_dir, load_config
from src.analysis import spearman_matrix, t_test_matrix
from src.checkpoint import load_checkpoint
from src.cost_model import build_cost_table
from src.datasets import load_dataset, gen_synthetic_task, to_uint8, write_idx
from src.errors import ConfigError, TradyError
from src.experiment import (
    DEFAULT_SWEEP_STRATEGIES, METRICS_FILE, RECORD_FILE, build_spec, compare_strategies,
    initial_parameters, layer_count_sweep, load_record, profile_layers, run_experiment, training_profile,
    sweep, threshold_study,
)
from src.log import setup_logging
from src.metrics import cumulative_rgn_curve
from src.reporting import (
    read_matrix_csv, read_metrics_csv, render_heatmap_png, render_svg_curves,
    write_matrix_csv, write_rows_csv,
)
from src.selection import top_k_layers

logger = logging.getLogger("trady")


def build_config(args) -> ExperimentConfig:
    """Config file merged over defaults, then command-line overrides."""
    config = load_config(Path(args.config) if args.config else None)
    if getattr(args, 'strategy', None):
        config['strategy'] = args.strategy
    if getattr(args, 'mode', None):
        config['mode'] = args.mode
    if getattr(args, 'budget', None) is not None:
        config['budget'] = args.budget
    if getattr(args, 'seed', None) is not None:
        config['seeds'] = [args.seed]
    if getattr(args, 'checkpoint', None):
        config['init_checkpoint'] = args.checkpoint
    return ExperimentConfig.from_dict(config)


def cmd_gen_data(args) -> int:
    out = get_output_dir(args.out)
    shape = tuple(args.shape)
    for split, per_class in (('train', args.samples_per_class), ('test', args.test_samples_per_class)):
        dataset = gen_synthetic_task(args.task_seed, args.classes, per_class, shape, args.noise, split)
        images = to_uint8(dataset.images)
        if shape[0] == 1:
            images = images[:, 0]
        write_idx(out / f"{split}-images.idx", images)
        write_idx(out / f"{split}-labels.idx", dataset.labels.astype(np.uint8))
        logger.info("[Data] task %d %s split: %d samples -> %s", args.task_seed, split, len(dataset), out)
    return 0


def _run_seeds(config: ExperimentConfig, out: Path) -> int:
    for seed in config.seeds:
        run_dir = out if len(config.seeds) == 1 else out / f"seed{seed}"
        record = run_experiment(config, seed, run_dir)
        logger.info("[Run] %s seed %d: final test accuracy %.4f -> %s",
                    record.label, seed, record.final_test_acc, run_dir)
    return 0


def cmd_pretrain(args) -> int:
    config = build_config(args)
    if not args.strategy:
        config = config.replace(strategy='full', mode='dynamic')
    return _run_seeds(config, get_output_dir(args.out))


def cmd_finetune(args) -> int:
    config = build_config(args)
    if not config.init_checkpoint:
        raise ConfigError("finetune needs a pretrained checkpoint (--checkpoint or init_checkpoint)")
    return _run_seeds(config, get_output_dir(args.out))


def cmd_profile_layers(args) -> int:
    config = build_config(args)
    spec = build_spec(config)
    table = build_cost_table(spec)
    seed = config.seeds[0]
    if config.init_checkpoint and args.keep_classifier:
        params = load_checkpoint(spec, config.init_checkpoint)
    else:
        params = initial_parameters(config, spec, np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[0]))
    if args.epochs < 0:
        raise ConfigError(f"--epochs must be >= 0, got {args.epochs}")
    if args.epochs:
        pretrained = params if config.init_checkpoint and args.keep_classifier else None
        profile = training_profile(config, seed, args.epochs, pretrained)
    else:
        profile = profile_layers(spec, params, load_dataset(config.dataset, 'train'), config.batch_size, table)

    out = get_output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(json.dumps(profile.to_dict(), indent=1), encoding='utf-8')
    curve = cumulative_rgn_curve(profile.rgn)
    write_rows_csv([{'k': k, 'fraction': fraction} for k, fraction in curve], out / "cumulative_rgn.csv")
    render_svg_curves({'cumulative RGN': ([k for k, _ in curve], [f for _, f in curve])},
                      out / "cumulative_rgn.svg", title="Cumulative layer RGN", xlabel="layers", ylabel="share")
    pool = top_k_layers(profile, config.pool_theta)
    logger.info("[Profile] top-K pool at theta %.2f: %s", config.pool_theta, list(pool))
    return 0


def _find_records(paths: List[str]) -> List[Path]:
    found = []
    for path in paths:
        path = Path(path)
        if (path / RECORD_FILE).exists():
            found.append(path)
        else:
            found.extend(sorted(p.parent for p in path.rglob(RECORD_FILE)))
    return found


def cmd_analyze(args) -> int:
    run_dirs = _find_records(args.runs)
    if not run_dirs:
        raise ConfigError(f"no {RECORD_FILE} found under {args.runs}")
    records = [load_record(d) for d in run_dirs]
    labels = [f"{r.label}/t{r.config['dataset']['task_seed']}/s{r.seed}" for r in records]
    out = get_output_dir(args.out)

    layer_raw = [r.topology_vector("layer", "raw") for r in records]
    layer_rgn = [r.topology_vector("layer", "rgn") for r in records]
    channel = [r.topology_vector("channel") for r in records]
    write_matrix_csv(labels, spearman_matrix(layer_raw), out / "spearman_layer.csv")
    write_matrix_csv(labels, spearman_matrix(layer_rgn), out / "spearman_layer_rgn.csv")
    if len(records) > 1:
        write_matrix_csv(labels, t_test_matrix(channel, args.variant), out / "ttest_channel.csv")
    if len({r.label for r in records}) > 1:
        strategies, matrix = compare_strategies(records)
        write_matrix_csv(strategies, matrix, out / "paired_ttest.csv")
    logger.info("[Analyze] %d runs -> %s", len(records), out)
    return 0


def cmd_report(args) -> int:
    root = Path(args.dir)
    for metrics_path in sorted(root.rglob(METRICS_FILE)):
        rows = read_metrics_csv(metrics_path)
        epochs = [row['epoch'] for row in rows]
        render_svg_curves({'train': (epochs, [row['train_acc'] for row in rows]),
                           'test': (epochs, [row['test_acc'] for row in rows])},
                          metrics_path.parent / "accuracy.svg", title="Accuracy", ylabel="top-1")
        render_svg_curves({'weight': (epochs, [row['weight_sparsity'] for row in rows]),
                           'activation': (epochs, [row['activation_sparsity'] for row in rows]),
                           'MACs saved': (epochs, [row['macs_saved_fraction'] for row in rows])},
                          metrics_path.parent / "sparsity.svg", title="Sparsity", ylabel="fraction")
        if any(row['alpha_hat'] is not None for row in rows):
            render_svg_curves({'alpha': (epochs, [row['alpha_hat'] for row in rows])},
                              metrics_path.parent / "alpha.svg", title="Tail index", ylabel="alpha")
    for name in ("spearman_layer", "spearman_layer_rgn", "ttest_channel", "paired_ttest"):
        for matrix_path in sorted(root.rglob(f"{name}.csv")):
            labels, matrix = read_matrix_csv(matrix_path)
            bounds = (-1.0, 1.0) if name.startswith("spearman") else (0.0, 1.0)
            render_heatmap_png(labels, matrix, matrix_path.with_suffix(".png"), *bounds)
    logger.info("[Report] rendered figures under %s", root)
    return 0


def cmd_sweep(args) -> int:
    config = build_config(args)
    strategies = args.strategies.split(",") if args.strategies else DEFAULT_SWEEP_STRATEGIES
    records = sweep(config, get_output_dir(args.out), strategies, args.fractions)
    logger.info("[Sweep] %d runs finished", len(records))
    return 0


def cmd_threshold_study(args) -> int:
    config = build_config(args)
    threshold_study(config, args.eps, args.metric, config.seeds[0], get_output_dir(args.out))
    return 0


def cmd_layer_sweep(args) -> int:
    config = build_config(args)
    layer_count_sweep(config, args.k, args.selector, config.seeds[0], get_output_dir(args.out))
    return 0


def _add_run_flags(parser):
    parser.add_argument('--config', help="JSON config file merged over the defaults")
    parser.add_argument('--seed', type=int, help="run a single seed instead of the configured list")
    parser.add_argument('--out', help="output directory (default: $TRADY_OUT or ./runs)")
    parser.add_argument('--budget', type=int, help="memory budget in slots")
    parser.add_argument('--strategy', help="full_random, topk_random, det_rgn, det_raw_norm, threshold, "
                                           "full or classifier_only")
    parser.add_argument('--mode', choices=('static', 'dynamic'))
    parser.add_argument('--checkpoint', help="pretrained checkpoint manifest for transfer runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trady", description=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument('--log-level', default=None, help="overrides $TRADY_LOG_LEVEL")
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen-data', help="write a synthetic task as IDX files")
    gen.add_argument('--out', help="output directory")
    gen.add_argument('--task-seed', type=int, default=0)
    gen.add_argument('--classes', type=int, default=4)
    gen.add_argument('--samples-per-class', type=int, default=100)
    gen.add_argument('--test-samples-per-class', type=int, default=50)
    gen.add_argument('--shape', type=int, nargs=3, default=[1, 12, 12], metavar=('C', 'H', 'W'))
    gen.add_argument('--noise', type=float, default=0.5)
    gen.set_defaults(func=cmd_gen_data)

    for name, func, text in (
        ('pretrain', cmd_pretrain, "train from scratch (full backpropagation unless --strategy)"),
        ('finetune', cmd_finetune, "transfer from a pretrained checkpoint under a strategy"),
    ):
        sub = commands.add_parser(name, help=text)
        _add_run_flags(sub)
        sub.set_defaults(func=func)

    profile = commands.add_parser('profile-layers', help="layer RGN profile and cumulative curve")
    _add_run_flags(profile)
    profile.add_argument('--keep-classifier', action='store_true',
                         help="use the checkpoint's classifier instead of a fresh one")
    profile.add_argument('--epochs', type=int, default=0,
                         help="accumulate over this many full-mask training epochs (0: one gradient pass)")
    profile.set_defaults(func=cmd_profile_layers)

    analyze = commands.add_parser('analyze', help="Spearman and t-test matrices from run directories")
    analyze.add_argument('runs', nargs='+', help="run directories (searched recursively)")
    analyze.add_argument('--out', help="output directory")
    analyze.add_argument('--variant', choices=('student_pooled', 'welch'), default='student_pooled')
    analyze.set_defaults(func=cmd_analyze)

    report = commands.add_parser('report', help="SVG curves and PNG heat maps for a results tree")
    report.add_argument('dir')
    report.set_defaults(func=cmd_report)

    sweep_parser = commands.add_parser('sweep', help="strategies x budgets x seeds")
    _add_run_flags(sweep_parser)
    sweep_parser.add_argument('--strategies', help="comma list of mode:kind, e.g. static:full_random")
    sweep_parser.add_argument('--fractions', type=float, nargs='+', help="budgets as fractions of all slots")
    sweep_parser.set_defaults(func=cmd_sweep)

    threshold = commands.add_parser('threshold-study', help="epsilon-threshold runs")
    _add_run_flags(threshold)
    threshold.add_argument('--eps', type=float, nargs='+', required=True)
    threshold.add_argument('--metric', choices=('raw', 'rgn'), default='rgn')
    threshold.set_defaults(func=cmd_threshold_study)

    layers = commands.add_parser('layer-sweep', help="accuracy against the number of pool layers")
    _add_run_flags(layers)
    layers.add_argument('--k', type=int, nargs='+', required=True)
    layers.add_argument('--selector', choices=('random', 'rgn', 'raw'), default='random')
    layers.set_defaults(func=cmd_layer_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or get_log_level())
    try:
        return args.func(args)
    except TradyError as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
