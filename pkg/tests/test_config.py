import pytest
import yaml

from cxrfusion.config import Mode, RunConfig, apply_overrides, config_from_dict, load_config, parse_backend_flag
from cxrfusion.consensus import SimilarityMetric
from cxrfusion.orchestrator import BackendKind, ConfigError


def test_nested_sections_and_relative_paths(tmp_path):
    (tmp_path / "fx.jsonl").write_text("")
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({
        "dataset": "index.csv",
        "out": "out",
        "mode": "multimodal",
        "consensus": {"threshold": 0.9, "metric": "token_f1"},
        "notegen": {"seed": 11, "audit": True},
        "sample": {"count": 50, "seed": 3},
        "backends": [{"id": "a", "kind": "replay", "fixture": "fx.jsonl"}],
    }))
    cfg = load_config(path)
    assert cfg.dataset == tmp_path / "index.csv" and cfg.out == tmp_path / "out"
    assert cfg.mode is Mode.MULTIMODAL and cfg.metric is SimilarityMetric.TOKEN_F1
    assert (cfg.threshold, cfg.notegen_seed, cfg.notegen_audit, cfg.sample_count, cfg.seed) == (0.9, 11, True, 50, 3)
    assert cfg.backends[0].fixture_path == str(tmp_path / "fx.jsonl")


def test_unknown_keys_and_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"thresold": 0.9})
    with pytest.raises(ConfigError):
        config_from_dict({"consensus": {"tau": 0.9}})
    with pytest.raises(ConfigError):
        config_from_dict({"mode": "trimodal"})
    with pytest.raises(ConfigError):
        RunConfig(threshold=1.5)
    with pytest.raises(ConfigError):
        RunConfig(thresholds=(0.9, 0.8))


def test_flags_override_file_values(tmp_path):
    cfg = apply_overrides(RunConfig(threshold=0.9), mode="multimodal", threshold=0.95, seed=4, sample=10,
                          out=tmp_path, backends=["a=mock:0.8,0.9,5", "b=mock:0.7,0.6"])
    assert (cfg.mode, cfg.threshold, cfg.seed, cfg.sample_count, cfg.out) == (Mode.MULTIMODAL, 0.95, 4, 10, tmp_path)
    assert [b.kind for b in cfg.backends] == [BackendKind.MOCK, BackendKind.MOCK]
    assert cfg.backends[0].error_profile.seed == 5


@pytest.mark.parametrize("spec", ["nobackend", "a=mock:0.5", "a=live:http://x", "a=mock:x,y"])
def test_bad_backend_flags(spec):
    with pytest.raises((ConfigError, ValueError)):
        parse_backend_flag(spec)


def test_config_hash_ignores_output_dir():
    assert RunConfig(out="a").config_hash() == RunConfig(out="b").config_hash()
    assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()


def test_validate_paths(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig().validate_paths("dataset")
    with pytest.raises(ConfigError):
        RunConfig(dataset=tmp_path / "missing.csv").validate_paths("dataset")
    cfg = config_from_dict({"backends": [{"id": "a", "kind": "replay", "fixture": str(tmp_path / "nope")}]})
    with pytest.raises(ConfigError):
        cfg.validate_paths()
