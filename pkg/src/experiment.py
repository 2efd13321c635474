"""
Experiment harness: pretraining and transfer runs under a selection
strategy, per-epoch metrics, mask audit logs, topology vectors, and the
sweeps built on top of single runs.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import ExperimentConfig, get_threads, save_config
from src.analysis import TopologyVector, paired_test_matrix
from src.checkpoint import load_backbone, save_checkpoint, save_tensors
from src.cost_model import Budget, ChannelCostTable, build_cost_table, sparsity_report
from src.datasets import Dataset, load_dataset
from src.errors import BudgetViolation, ConfigError, EstimationError
from src.ht_stats import GradientTraceRecorder, estimate_alpha
from src.log import progress_enabled
from src.metrics import LayerRgnProfile
from src.network import (
    ConvGrad, GradientSet, NetworkSpec, Parameters, backward, build_network,
    cosine_warmup_lr, empty_mask, forward, full_mask, init_classifier,
    init_parameters, sgd_step,
)
from src.reporting import write_metrics_csv, write_rows_csv
from src.selection import (
    LayerPool, SelectionMode, StrategyKind, StrategyState,
    layer_pool_from_ranking, strategy_step, top_k_layers,
)
from src.tensor_ops import MacCounter, channel_weight_mask, softmax_cross_entropy

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
RECORD_FILE = "record.json"
MASKS_FILE = "masks.json"
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "model.json"
TRACES_FILE = "traces.json"


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    slots_used: int
    budget: int
    weight_sparsity: float
    activation_sparsity: float
    wgrad_macs: int
    macs_saved_fraction: float
    alpha_hat: Optional[float] = None
    raw_alpha: Optional[float] = None
    channels: int = 0
    profiling_macs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    """One run's rows, mask audit log and topology vectors."""
    label: str
    seed: int
    config: dict
    rows: List[EpochRow] = field(default_factory=list)
    masks: List[dict] = field(default_factory=list)
    pool: Tuple[int, ...] = ()
    topology: Optional[LayerRgnProfile] = None
    initial_profile: Optional[LayerRgnProfile] = None
    # per-epoch gradient trace matrices; kept out of record.json
    traces: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1].test_acc if self.rows else float('nan')

    @property
    def final_train_acc(self) -> float:
        return self.rows[-1].train_acc if self.rows else float('nan')

    @property
    def cell(self) -> tuple:
        """What a strategy comparison pairs on: task, budget and seed."""
        dataset = self.config.get('dataset', {})
        return (dataset.get('task_seed'), self.config.get('budget'), self.seed)

    def topology_vector(self, kind: str = "layer", metric: str = "raw") -> TopologyVector:
        if self.topology is None:
            raise ConfigError(f"run {self.label} has no topology vectors")
        if kind == "channel":
            values = self.topology.channel_vector()
        else:
            values = self.topology.raw if metric == "raw" else self.topology.rgn
        return TopologyVector(kind, values, self.label,
                              {'seed': self.seed, 'task_seed': self.config.get('dataset', {}).get('task_seed'),
                               'strategy': self.config.get('strategy')})

    def to_dict(self) -> dict:
        return {
            'label': self.label,
            'seed': self.seed,
            'config': self.config,
            'rows': [row.to_dict() for row in self.rows],
            'masks': self.masks,
            'pool': list(self.pool),
            'topology': self.topology.to_dict() if self.topology else None,
            'initial_profile': self.initial_profile.to_dict() if self.initial_profile else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'RunRecord':
        return cls(
            label=data['label'],
            seed=int(data['seed']),
            config=data['config'],
            rows=[EpochRow(**row) for row in data['rows']],
            masks=data.get('masks', []),
            pool=tuple(data.get('pool', ())),
            topology=LayerRgnProfile.from_dict(data['topology']) if data.get('topology') else None,
            initial_profile=(LayerRgnProfile.from_dict(data['initial_profile'])
                             if data.get('initial_profile') else None),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> 'RunRecord':
        return cls.from_dict(json.loads(text))


def load_record(run_dir) -> RunRecord:
    path = Path(run_dir) / RECORD_FILE
    try:
        return RunRecord.from_json(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigError(f"cannot read run record {path}: {e}") from e


def build_spec(config: ExperimentConfig) -> NetworkSpec:
    return build_network(config.network, config.dataset.image_shape, config.dataset.classes)


def iterate_batches(dataset: Dataset, batch_size: int, order: Optional[np.ndarray] = None
                    ) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
    order = np.arange(len(dataset)) if order is None else order
    for start in range(0, len(dataset), batch_size):
        index = order[start:start + batch_size]
        yield dataset.images[index], dataset.labels[index]


def evaluate(spec: NetworkSpec, params: Parameters, dataset: Dataset, batch_size: int) -> float:
    """Top-1 accuracy. Nothing is cached for backward."""
    mask = empty_mask(spec)
    correct = 0
    for images, labels in iterate_batches(dataset, batch_size):
        logits, _ = forward(spec, params, images, mask)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == labels))
    return correct / len(dataset)


def full_gradient(spec: NetworkSpec, params: Parameters, dataset: Dataset, batch_size: int) -> GradientSet:
    """Dataset-mean gradient with every channel computed (the profiling pass)."""
    mask = full_mask(spec)
    counter = MacCounter()
    conv = {i: np.zeros(spec.layers[i].geom.weight_shape) for i in spec.conv_layers}
    weight = np.zeros_like(params.classifier_weight)
    bias = np.zeros_like(params.classifier_bias)
    n = len(dataset)
    for images, labels in iterate_batches(dataset, batch_size):
        logits, cache = forward(spec, params, images, mask)
        _, dlogits = softmax_cross_entropy(logits, labels)
        grads = backward(spec, params, cache, dlogits, mask, counter)
        share = images.shape[0] / n
        for i in spec.conv_layers:
            conv[i] += share * grads.conv[i].grad
        weight += share * grads.classifier_weight
        bias += share * grads.classifier_bias
    computed = {i: ConvGrad(conv[i], np.ones(spec.layers[i].geom.in_channels, dtype=bool))
                for i in spec.conv_layers}
    return GradientSet(computed, weight, bias, wgrad_macs=counter.value)


def profile_layers(spec: NetworkSpec, params: Parameters, dataset: Dataset, batch_size: int,
                   table: Optional[ChannelCostTable] = None) -> LayerRgnProfile:
    """Layer RGN and raw-norm profile of one full-gradient pass."""
    table = table or build_cost_table(spec)
    profile = LayerRgnProfile.empty(table)
    profile.accumulate(spec, full_gradient(spec, params, dataset, batch_size), table)
    return profile


def load_layer_profile(path, table: ChannelCostTable) -> LayerRgnProfile:
    """A saved profile.json, or the accumulated topology of a run's record.json."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read layer profile {path}: {e}") from e
    if 'topology' in data:
        data = data['topology']
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: no layer profile recorded")
    try:
        profile = LayerRgnProfile.from_dict(data)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{path}: malformed layer profile ({e})") from e
    if profile.layer_indices != table.layer_indices:
        raise ConfigError(f"{path}: profile covers layers {list(profile.layer_indices)}, "
                          f"network has {list(table.layer_indices)}")
    return profile


def _trace_entries(spec: NetworkSpec, grads: GradientSet) -> np.ndarray:
    """Every computed gradient entry of one step, classifier included."""
    parts = []
    for i in spec.conv_layers:
        conv_grad = grads.conv[i]
        if conv_grad.computed.any():
            parts.append(conv_grad.grad[channel_weight_mask(conv_grad.computed, spec.layers[i].geom)])
    parts.append(grads.classifier_weight.ravel())
    parts.append(grads.classifier_bias.ravel())
    return np.concatenate(parts)


@dataclass
class RunSetup:
    """Everything a run needs before its first epoch."""
    config: ExperimentConfig
    seed: int
    spec: NetworkSpec
    table: ChannelCostTable
    train_set: Dataset
    test_set: Dataset
    params: Parameters
    state: StrategyState
    shuffle_rng: np.random.Generator
    initial_profile: Optional[LayerRgnProfile] = None


def initial_parameters(config: ExperimentConfig, spec: NetworkSpec, rng: np.random.Generator) -> Parameters:
    """Fresh weights, or a pretrained backbone with a new seeded classifier."""
    if not config.init_checkpoint:
        return init_parameters(spec, rng)
    conv = load_backbone(spec, config.init_checkpoint)
    weight, bias = init_classifier(spec, rng)
    return Parameters(conv, weight, bias)


def resolve_budget(config: ExperimentConfig, table: ChannelCostTable) -> Budget:
    kind = StrategyKind(config.strategy)
    if not kind.budgeted:
        # unbudgeted kinds report the full backbone as their budget
        return Budget(table.total_slots)
    if config.budget is not None:
        return Budget(int(config.budget))
    return Budget.from_fraction(table, config.budget_fraction)


def resolve_pool(config: ExperimentConfig, table: ChannelCostTable,
                 profile: Optional[LayerRgnProfile]) -> LayerPool:
    """
    Explicit layers win. TopKRandom otherwise takes the top-K pool of the
    saved profile named by pool.profile, else of the initial profile.
    """
    if config.pool_layers is not None:
        return tuple(config.pool_layers)
    if StrategyKind(config.strategy) is StrategyKind.TOPK_RANDOM:
        if config.pool_profile:
            return top_k_layers(load_layer_profile(config.pool_profile, table), config.pool_theta)
        return top_k_layers(profile, config.pool_theta)
    return table.layer_indices


def prepare_run(config: ExperimentConfig, seed: int, train_set: Optional[Dataset] = None,
                test_set: Optional[Dataset] = None) -> RunSetup:
    spec = build_spec(config)
    table = build_cost_table(spec)
    init_seq, shuffle_seq, select_seq = np.random.SeedSequence(seed).spawn(3)
    train_set = train_set if train_set is not None else load_dataset(config.dataset, 'train')
    test_set = test_set if test_set is not None else load_dataset(config.dataset, 'test')
    if train_set.image_shape != spec.input_shape:
        raise ConfigError(f"dataset images are {train_set.image_shape}, network expects {spec.input_shape}")
    params = initial_parameters(config, spec, np.random.default_rng(init_seq))

    kind = StrategyKind(config.strategy)
    profile = None
    needs_profile = kind is StrategyKind.TOPK_RANDOM and config.pool_layers is None and not config.pool_profile
    if needs_profile or config.init_checkpoint:
        profile = profile_layers(spec, params, train_set, config.batch_size, table)
    state = StrategyState(
        kind=kind,
        mode=SelectionMode(config.mode),
        pool=resolve_pool(config, table, profile),
        budget=resolve_budget(config, table),
        rng=np.random.default_rng(select_seq),
        eps=config.threshold,
        metric=config.threshold_metric,
    )
    return RunSetup(config, seed, spec, table, train_set, test_set, params, state,
                    np.random.default_rng(shuffle_seq), profile)


def train(setup: RunSetup) -> Tuple[RunRecord, Parameters]:
    """
    The training loop: per epoch pick a mask, run masked SGD over shuffled
    batches, evaluate, and emit one metrics row.
    """
    config, spec, table, state = setup.config, setup.spec, setup.table, setup.state
    params = setup.params
    label = state.label
    record = RunRecord(label=label, seed=setup.seed, config=config.to_dict(), pool=tuple(state.pool),
                       topology=LayerRgnProfile.empty(table), initial_profile=setup.initial_profile)
    counter = MacCounter()
    recorder = GradientTraceRecorder()
    logger.info("[Train] %s seed %d: budget %d slots, pool %s", label, setup.seed, state.budget.limit, state.pool)

    epochs = tqdm(range(config.epochs), desc=f"{label} s{setup.seed}", unit="epoch",
                  disable=not progress_enabled(), leave=False)
    for epoch in epochs:
        lr = cosine_warmup_lr(epoch, config.epochs, config.warmup_epochs, config.lr_max)
        profiling = None
        if state.kind.needs_gradients and (state.mode is SelectionMode.DYNAMIC or state.cached is None):
            profiling = full_gradient(spec, params, setup.train_set, config.batch_size)
        mask = strategy_step(state, epoch, table, spec, profiling)
        if state.kind.budgeted and mask.slots > state.budget.limit:
            raise BudgetViolation(mask.slots, state.budget.limit, f"{label} epoch {epoch}")
        record.masks.append({'epoch': epoch, 'slots': mask.slots, 'channels': mask.channel_count,
                             'selected': {str(i): chans for i, chans in mask.selected().items()}})

        loss_sum = 0.0
        correct = 0
        epoch_macs = 0
        report = None
        order = setup.shuffle_rng.permutation(len(setup.train_set))
        for images, labels in iterate_batches(setup.train_set, config.batch_size, order):
            logits, cache = forward(spec, params, images, mask)
            loss, dlogits = softmax_cross_entropy(logits, labels)
            counter.reset()
            grads = backward(spec, params, cache, dlogits, mask, counter)
            report = sparsity_report(mask, table, grads.wgrad_macs, images.shape[0])
            epoch_macs += grads.wgrad_macs
            loss_sum += loss * images.shape[0]
            correct += int(np.count_nonzero(logits.argmax(axis=1) == labels))
            record.topology.accumulate(spec, grads, table)
            if config.collect_alpha:
                recorder.record_step(_trace_entries(spec, grads))
            params = sgd_step(spec, params, grads, lr)

        alpha_hat = raw_alpha = None
        if config.collect_alpha:
            trace = recorder.reset()
            record.traces.append(trace)
            try:
                estimate = estimate_alpha(trace, epoch=epoch)
                alpha_hat, raw_alpha = estimate.alpha_hat, estimate.raw_alpha
            except EstimationError as e:
                logger.warning("[Alpha] %s", e)

        n = len(setup.train_set)
        row = EpochRow(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / n,
            train_acc=correct / n,
            test_acc=evaluate(spec, params, setup.test_set, config.batch_size),
            slots_used=mask.slots,
            budget=state.budget.limit,
            weight_sparsity=report.weight_sparsity,
            activation_sparsity=report.activation_sparsity,
            wgrad_macs=epoch_macs,
            macs_saved_fraction=report.macs_saved_fraction,
            alpha_hat=alpha_hat,
            raw_alpha=raw_alpha,
            channels=mask.channel_count,
            profiling_macs=profiling.wgrad_macs if profiling is not None else 0,
        )
        record.rows.append(row)
        epochs.set_postfix(loss=f"{row.train_loss:.3f}", test=f"{row.test_acc:.3f}")
        logger.debug("[Train] %s epoch %d: lr %.4f loss %.4f train %.3f test %.3f slots %d",
                     label, epoch, lr, row.train_loss, row.train_acc, row.test_acc, row.slots_used)

    logger.info("[Train] %s seed %d done: test accuracy %.4f", label, setup.seed, record.final_test_acc)
    return record, params


def write_run(record: RunRecord, spec: NetworkSpec, params: Parameters, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv([row.to_dict() for row in record.rows], out_dir / METRICS_FILE)
    (out_dir / RECORD_FILE).write_text(record.to_json(), encoding='utf-8')
    (out_dir / MASKS_FILE).write_text(json.dumps(record.masks), encoding='utf-8')
    save_config(record.config, out_dir / CONFIG_FILE)
    save_checkpoint(spec, params, out_dir / CHECKPOINT_FILE)
    if record.traces:
        save_tensors({f"epoch{e}": trace for e, trace in enumerate(record.traces)}, out_dir / TRACES_FILE,
                     network=spec.name)
    return out_dir


def run_experiment(config: ExperimentConfig, seed: int, out_dir=None) -> RunRecord:
    """One run end to end; files are written when out_dir is given."""
    setup = prepare_run(config, seed)
    record, params = train(setup)
    if out_dir is not None:
        write_run(record, setup.spec, params, out_dir)
    return record


def training_profile(config: ExperimentConfig, seed: int, epochs: int,
                     params: Optional[Parameters] = None) -> LayerRgnProfile:
    """
    Layer profile accumulated over every batch of a short full-mask training
    run, starting from `params` when given.
    """
    profiling = config.replace(strategy='full', mode='dynamic', epochs=epochs,
                               warmup_epochs=min(config.warmup_epochs, epochs - 1),
                               pool_layers=None, pool_profile=None, collect_alpha=False)
    setup = prepare_run(profiling, seed)
    if params is not None:
        setup.params = params
    record, _ = train(setup)
    return record.topology


def _run_job(job: Tuple[dict, int, str]) -> dict:
    config_dict, seed, out_dir = job
    record = run_experiment(ExperimentConfig.from_dict(config_dict), seed, out_dir)
    return record.to_dict()


def run_jobs(jobs: Sequence[Tuple[ExperimentConfig, int, Path]]) -> List[RunRecord]:
    """Run independent jobs, in worker processes when TRADY_THREADS > 1. Results keep job order."""
    payload = [(config.to_dict(), seed, str(out_dir)) for config, seed, out_dir in jobs]
    threads = get_threads()
    if threads > 1 and len(payload) > 1:
        logger.info("[Sweep] %d runs on %d workers", len(payload), threads)
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_job, payload))
    else:
        results = [_run_job(job) for job in tqdm(payload, desc="runs", unit="run", disable=not progress_enabled())]
    return [RunRecord.from_dict(result) for result in results]


def parse_strategy(text: str) -> Tuple[str, str]:
    """'dynamic:topk_random' -> ('dynamic', 'topk_random'); mode defaults to dynamic."""
    mode, _, kind = text.partition(":")
    if not kind:
        mode, kind = "dynamic", mode
    try:
        StrategyKind(kind)
        SelectionMode(mode)
    except ValueError as e:
        raise ConfigError(f"bad strategy '{text}': {e}") from e
    return mode, kind


DEFAULT_SWEEP_STRATEGIES = ("static:full_random", "dynamic:topk_random", "dynamic:det_rgn")


def sweep(config: ExperimentConfig, out_dir, strategies: Sequence[str] = DEFAULT_SWEEP_STRATEGIES,
          fractions: Optional[Sequence[float]] = None) -> List[RunRecord]:
    """Strategies x budgets x seeds, each run in its own directory."""
    table = build_cost_table(build_spec(config))
    if fractions:
        budgets = [Budget.from_fraction(table, f).limit for f in fractions]
    elif config.budget is not None:
        budgets = [config.budget]
    else:
        budgets = [Budget.from_fraction(table, config.budget_fraction).limit]

    jobs = []
    for text in strategies:
        mode, kind = parse_strategy(text)
        for budget in budgets:
            for seed in config.seeds:
                run_config = config.replace(strategy=kind, mode=mode, budget=budget)
                jobs.append((run_config, seed, Path(out_dir) / f"{mode}-{kind}" / f"b{budget}" / f"seed{seed}"))
    return run_jobs(jobs)


def threshold_study(config: ExperimentConfig, eps_grid: Sequence[float], metric: str, seed: int,
                    out_dir) -> List[dict]:
    """One Threshold run per epsilon; totals are summed over epochs."""
    jobs = [(config.replace(strategy='threshold', mode='dynamic', threshold=float(eps), threshold_metric=metric),
             seed, Path(out_dir) / f"{metric}-eps{eps:g}") for eps in eps_grid]
    rows = []
    for eps, record in zip(eps_grid, run_jobs(jobs)):
        rows.append({
            'metric': metric,
            'eps': float(eps),
            'final_test_acc': record.final_test_acc,
            'total_slots': sum(row.slots_used for row in record.rows),
            'total_wgrad_macs': sum(row.wgrad_macs for row in record.rows),
            'total_channels': sum(row.channels for row in record.rows),
        })
    write_rows_csv(rows, Path(out_dir) / f"threshold_{metric}.csv")
    return rows


LAYER_SELECTORS = {
    'random': ('topk_random', 'rgn'),
    'rgn': ('det_rgn', 'rgn'),
    'raw': ('det_raw_norm', 'raw'),
}


def layer_count_sweep(config: ExperimentConfig, k_grid: Sequence[int], selector: str, seed: int,
                      out_dir) -> List[dict]:
    """Pools of the K highest layers of the initial profile, one dynamic run per K."""
    if selector not in LAYER_SELECTORS:
        raise ConfigError(f"selector must be one of {sorted(LAYER_SELECTORS)}, got '{selector}'")
    kind, metric = LAYER_SELECTORS[selector]
    spec = build_spec(config)
    table = build_cost_table(spec)
    train_set = load_dataset(config.dataset, 'train')
    init_seq = np.random.SeedSequence(seed).spawn(3)[0]
    params = initial_parameters(config, spec, np.random.default_rng(init_seq))
    profile = profile_layers(spec, params, train_set, config.batch_size, table)

    jobs = []
    for k in k_grid:
        pool = layer_pool_from_ranking(profile, int(k), metric)
        jobs.append((config.replace(strategy=kind, mode='dynamic', pool_layers=pool),
                     seed, Path(out_dir) / f"{selector}-k{k}"))
    rows = []
    for k, (run_config, _, _), record in zip(k_grid, jobs, run_jobs(jobs)):
        rows.append({
            'selector': selector,
            'k': int(k),
            'pool': " ".join(str(i) for i in run_config.pool_layers),
            'final_train_acc': record.final_train_acc,
            'final_test_acc': record.final_test_acc,
        })
    write_rows_csv(rows, Path(out_dir) / f"layers_{selector}.csv")
    return rows


def strategy_accuracies(records: Sequence[RunRecord]) -> Dict[str, List[float]]:
    """Final accuracies per strategy label, aligned on the cells every strategy has."""
    by_label: Dict[str, Dict[tuple, float]] = {}
    for record in records:
        by_label.setdefault(record.label, {})[record.cell] = record.final_test_acc
    common = set.intersection(*(set(cells) for cells in by_label.values())) if by_label else set()
    cells = sorted(common, key=repr)
    return {label: [accs[cell] for cell in cells] for label, accs in sorted(by_label.items())}


def compare_strategies(records: Sequence[RunRecord]) -> Tuple[List[str], np.ndarray]:
    return paired_test_matrix(strategy_accuracies(records))
