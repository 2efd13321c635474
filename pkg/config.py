"""
Configuration management for TraDy experiments.
Defaults, JSON config files and environment overrides.
"""
import os
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from src.errors import ConfigError

# Application Info
APP_NAME = "TraDy"
APP_VERSION = "1.0.0"

# Default settings
DEFAULT_CONFIG = {
    'network': 'toynet-residual',
    'dataset': {
        'source': 'synthetic',
        'task_seed': 0,
        'classes': 4,
        'samples_per_class': 100,
        'test_samples_per_class': 50,
        'image_shape': [1, 12, 12],
        'noise': 0.5,
        'train_images': None,
        'train_labels': None,
        'test_images': None,
        'test_labels': None,
    },
    'strategy': 'topk_random',
    'mode': 'dynamic',
    'pool': {'layers': None, 'theta': 0.97, 'profile': None},
    'budget': None,
    'budget_fraction': 0.15,
    'epochs': 30,
    'warmup_epochs': 5,
    'lr_max': 0.125,
    'batch_size': 32,
    'seeds': [0, 1, 2],
    'threshold': 0.0,
    'threshold_metric': 'rgn',
    'init_checkpoint': None,
    'collect_alpha': False,
}

DEFAULT_BUDGET_FRACTIONS = (0.05, 0.15, 0.40)

STRATEGY_NAMES = (
    'full_random', 'topk_random', 'det_rgn', 'det_raw_norm',
    'threshold', 'full', 'classifier_only',
)


def load_config(path: Optional[Path] = None) -> dict:
    """
    Load configuration from a JSON file, merged over the defaults.
    Nested sections are merged key by key.
    """
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return config

    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            overrides = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    for key, value in overrides.items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key '{key}' in {path}")
        if isinstance(DEFAULT_CONFIG[key], dict) and isinstance(value, dict):
            for sub in value:
                if sub not in DEFAULT_CONFIG[key]:
                    raise ConfigError(f"unknown config key '{key}.{sub}' in {path}")
            config[key].update(value)
        else:
            config[key] = value
    return config


def save_config(config: dict, path: Path):
    """Save configuration to file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config, f, indent=2)


def get_threads() -> int:
    """
    Worker cap for sweeps.
    Priority:
    1. Environment variable TRADY_THREADS
    2. Default of 1 (sequential)
    """
    value = os.getenv('TRADY_THREADS', '')
    if value:
        try:
            threads = int(value)
        except ValueError:
            raise ConfigError(f"TRADY_THREADS must be an integer, got '{value}'")
        if threads < 1:
            raise ConfigError(f"TRADY_THREADS must be >= 1, got {threads}")
        return threads
    return 1


def get_output_dir(cli_value: Optional[str] = None) -> Path:
    """Output directory: CLI flag, then TRADY_OUT, then ./runs."""
    if cli_value:
        return Path(cli_value)
    env_dir = os.getenv('TRADY_OUT', '')
    if env_dir:
        return Path(env_dir)
    return Path('runs')


def get_log_level() -> str:
    """Log level from TRADY_LOG_LEVEL, INFO by default."""
    return os.getenv('TRADY_LOG_LEVEL', 'INFO').upper()


@dataclass
class DatasetConfig:
    source: str = 'synthetic'
    task_seed: int = 0
    classes: int = 4
    samples_per_class: int = 100
    test_samples_per_class: int = 50
    image_shape: tuple = (1, 12, 12)
    noise: float = 0.5
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


@dataclass
class ExperimentConfig:
    """One training run (or a sweep template) fully described."""
    network: str = 'toynet-residual'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    strategy: str = 'topk_random'
    mode: str = 'dynamic'
    pool_layers: Optional[tuple] = None
    pool_theta: float = 0.97
    pool_profile: Optional[str] = None
    budget: Optional[int] = None
    budget_fraction: float = 0.15
    epochs: int = 30
    warmup_epochs: int = 5
    lr_max: float = 0.125
    batch_size: int = 32
    seeds: tuple = (0, 1, 2)
    threshold: float = 0.0
    threshold_metric: str = 'rgn'
    init_checkpoint: Optional[str] = None
    collect_alpha: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy '{self.strategy}', expected one of {STRATEGY_NAMES}")
        if self.mode not in ('static', 'dynamic'):
            raise ConfigError(f"mode must be 'static' or 'dynamic', got '{self.mode}'")
        if self.budget is not None and self.budget < 0:
            raise ConfigError(f"budget must be >= 0, got {self.budget}")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ConfigError(f"budget_fraction must be in [0, 1], got {self.budget_fraction}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must satisfy 0 <= T_w < T, got T_w={self.warmup_epochs}, T={self.epochs}")
        if self.lr_max < 0:
            raise ConfigError(f"lr_max must be >= 0, got {self.lr_max}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must be nonempty")
        if not 0.0 < self.pool_theta <= 1.0:
            raise ConfigError(f"pool theta must be in (0, 1], got {self.pool_theta}")
        if self.threshold_metric not in ('raw', 'rgn'):
            raise ConfigError(f"threshold_metric must be 'raw' or 'rgn', got '{self.threshold_metric}'")
        if self.dataset.source not in ('synthetic', 'idx'):
            raise ConfigError(f"dataset source must be 'synthetic' or 'idx', got '{self.dataset.source}'")

    @classmethod
    def from_dict(cls, config: dict) -> 'ExperimentConfig':
        """Build from a merged config dictionary (see load_config)."""
        data = dict(config['dataset'])
        data['image_shape'] = tuple(data['image_shape'])
        pool = config.get('pool') or {}
        layers = pool.get('layers')
        return cls(
            network=config['network'],
            dataset=DatasetConfig(**data),
            strategy=config['strategy'],
            mode=config['mode'],
            pool_layers=tuple(layers) if layers is not None else None,
            pool_theta=float(pool.get('theta', 0.97)),
            pool_profile=pool.get('profile'),
            budget=config.get('budget'),
            budget_fraction=float(config['budget_fraction']),
            epochs=int(config['epochs']),
            warmup_epochs=int(config['warmup_epochs']),
            lr_max=float(config['lr_max']),
            batch_size=int(config['batch_size']),
            seeds=tuple(int(s) for s in config['seeds']),
            threshold=float(config['threshold']),
            threshold_metric=config['threshold_metric'],
            init_checkpoint=config.get('init_checkpoint'),
            collect_alpha=bool(config['collect_alpha']),
        )

    def to_dict(self) -> dict:
        """Inverse of from_dict, JSON-ready."""
        data = asdict(self)
        dataset = data.pop('dataset')
        dataset['image_shape'] = list(dataset['image_shape'])
        pool_layers = data.pop('pool_layers')
        pool_theta = data.pop('pool_theta')
        pool_profile = data.pop('pool_profile')
        data['dataset'] = dataset
        data['pool'] = {'layers': list(pool_layers) if pool_layers is not None else None,
                        'theta': pool_theta, 'profile': pool_profile}
        data['seeds'] = list(self.seeds)
        return data

    def replace(self, **changes) -> 'ExperimentConfig':
        """Copy with some fields changed (validated again)."""
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return ExperimentConfig(**data)
