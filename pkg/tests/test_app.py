"""
Configuration layer and the command line, end to end on a tiny task.
"""
import json

import numpy as np
import pytest

from config import (
    DEFAULT_CONFIG, ExperimentConfig, get_log_level, get_output_dir, get_threads, load_config, save_config,
)
from main import main
from src.checkpoint import save_tensors
from src.errors import ConfigError
from src.experiment import CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, load_record
from src.metrics import LayerRgnProfile
from src.selection import top_k_layers


def test_imports():
    import src.analysis
    import src.checkpoint
    import src.cost_model
    import src.datasets
    import src.experiment
    import src.ht_stats
    import src.metrics
    import src.network
    import src.reporting
    import src.selection
    import src.tensor_ops  # noqa: F401


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

def test_defaults_build_a_valid_config():
    config = ExperimentConfig.from_dict(load_config())
    assert config.strategy == "topk_random"
    assert config.pool_theta == 0.97
    assert config.dataset.image_shape == (1, 12, 12)


def test_nested_sections_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset": {"classes": 7}, "epochs": 4}))
    config = load_config(path)
    assert config["dataset"]["classes"] == 7
    assert config["dataset"]["noise"] == DEFAULT_CONFIG["dataset"]["noise"]
    assert config["epochs"] == 4


@pytest.mark.parametrize("overrides", [{"learning_rate": 0.1}, {"dataset": {"colour": True}}])
def test_unknown_keys_are_rejected(tmp_path, overrides):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(overrides))
    with pytest.raises(ConfigError):
        load_config(path)


def test_saved_config_loads_back(tmp_path):
    config = ExperimentConfig(strategy="det_rgn", mode="static", pool_layers=(3, 5), pool_profile="profile.json",
                              budget=900, seeds=(4,))
    save_config(config.to_dict(), tmp_path / "saved.json")
    assert ExperimentConfig.from_dict(load_config(tmp_path / "saved.json")) == config


@pytest.mark.parametrize("changes", [{"strategy": "greedy"}, {"mode": "weekly"}, {"budget": -1},
                                     {"warmup_epochs": 30}, {"seeds": ()}, {"pool_theta": 0.0}])
def test_invalid_values(changes):
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(**changes)


def test_environment(monkeypatch, tmp_path):
    monkeypatch.delenv("TRADY_THREADS", raising=False)
    monkeypatch.delenv("TRADY_OUT", raising=False)
    monkeypatch.delenv("TRADY_LOG_LEVEL", raising=False)
    assert get_threads() == 1
    assert str(get_output_dir()) == "runs"
    assert get_log_level() == "INFO"

    monkeypatch.setenv("TRADY_THREADS", "3")
    monkeypatch.setenv("TRADY_OUT", str(tmp_path))
    monkeypatch.setenv("TRADY_LOG_LEVEL", "debug")
    assert get_threads() == 3
    assert get_output_dir() == tmp_path
    assert get_output_dir("elsewhere").name == "elsewhere"
    assert get_log_level() == "DEBUG"

    monkeypatch.setenv("TRADY_THREADS", "many")
    with pytest.raises(ConfigError):
        get_threads()


# ----------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------

def _write_config(path, data_dir, **overrides):
    config = {
        "dataset": {
            "source": "idx",
            "classes": 3,
            "image_shape": [1, 8, 8],
            "train_images": str(data_dir / "train-images.idx"),
            "train_labels": str(data_dir / "train-labels.idx"),
            "test_images": str(data_dir / "test-images.idx"),
            "test_labels": str(data_dir / "test-labels.idx"),
        },
        "epochs": 2,
        "warmup_epochs": 1,
        "batch_size": 8,
        "seeds": [0],
    }
    config.update(overrides)
    path.write_text(json.dumps(config))
    return str(path)


def test_cli_end_to_end(tmp_path, monkeypatch):
    monkeypatch.delenv("TRADY_THREADS", raising=False)
    data = tmp_path / "data"
    runs = tmp_path / "runs"
    assert main(["gen-data", "--out", str(data), "--task-seed", "5", "--classes", "3",
                 "--samples-per-class", "10", "--test-samples-per-class", "4", "--shape", "1", "8", "8"]) == 0
    for split in ("train", "test"):
        assert (data / f"{split}-images.idx").exists()
        assert (data / f"{split}-labels.idx").exists()

    config = _write_config(tmp_path / "run.json", data)
    assert main(["--log-level", "WARNING", "pretrain", "--config", config, "--out", str(runs / "pretrain")]) == 0
    checkpoint = runs / "pretrain" / CHECKPOINT_FILE
    assert checkpoint.exists()
    assert load_record(runs / "pretrain").label == "D-full"

    transfer = _write_config(tmp_path / "transfer.json", data, seeds=[0, 1])
    assert main(["finetune", "--config", transfer, "--checkpoint", str(checkpoint),
                 "--strategy", "topk_random", "--budget", "900", "--out", str(runs / "finetune")]) == 0
    for seed in (0, 1):
        run_dir = runs / "finetune" / f"seed{seed}"
        record = load_record(run_dir)
        assert record.label == "D-topk_random"
        assert all(row.slots_used <= 900 for row in record.rows)
        assert json.loads((run_dir / CONFIG_FILE).read_text())["init_checkpoint"] == str(checkpoint)

    profile = tmp_path / "profile"
    assert main(["profile-layers", "--config", config, "--checkpoint", str(checkpoint), "--out", str(profile)]) == 0
    assert json.loads((profile / "profile.json").read_text())["layer_indices"] == [0, 3, 5, 8, 10, 12]
    assert (profile / "cumulative_rgn.csv").read_text().splitlines()[0] == "k,fraction"

    trained_profile = tmp_path / "trained-profile"
    assert main(["profile-layers", "--config", config, "--checkpoint", str(checkpoint), "--epochs", "2",
                 "--out", str(trained_profile)]) == 0
    saved = json.loads((trained_profile / "profile.json").read_text())
    assert saved["passes"] == 2 * 4
    pooled = _write_config(tmp_path / "pooled.json", data, pool={"profile": str(trained_profile / "profile.json")})
    assert main(["finetune", "--config", pooled, "--checkpoint", str(checkpoint), "--budget", "900",
                 "--out", str(tmp_path / "pooled")]) == 0
    expected = top_k_layers(LayerRgnProfile.from_dict(saved), DEFAULT_CONFIG["pool"]["theta"])
    assert load_record(tmp_path / "pooled").pool == expected

    analysis = tmp_path / "analysis"
    assert main(["analyze", str(runs / "finetune"), "--out", str(analysis)]) == 0
    assert (analysis / "spearman_layer.csv").exists()
    assert (analysis / "ttest_channel.csv").exists()
    assert not (analysis / "paired_ttest.csv").exists()

    assert main(["report", str(tmp_path)]) == 0
    assert (runs / "pretrain" / "accuracy.svg").exists()
    assert (runs / "finetune" / "seed1" / "sparsity.svg").exists()
    assert (analysis / "spearman_layer.png").exists()
    assert len(list(tmp_path.rglob(METRICS_FILE))) == 4


def test_cli_errors_exit_with_code_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    assert main(["finetune", "--out", str(tmp_path / "run")]) == 2
    assert main(["analyze", str(tmp_path), "--out", str(tmp_path / "a")]) == 2
    assert main(["sweep", "--strategies", "sometimes:full_random", "--out", str(tmp_path / "s")]) == 2
    broken = save_tensors({"conv0": np.ones(4)}, tmp_path / "broken.json")
    manifest = json.loads(broken.read_text())
    del manifest["tensors"][0]["offset"]
    broken.write_text(json.dumps(manifest))
    assert main(["finetune", "--checkpoint", str(broken), "--out", str(tmp_path / "run")]) == 2
    assert main(["profile-layers", "--epochs", "-1", "--out", str(tmp_path / "p")]) == 2
