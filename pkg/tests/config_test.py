import json
import os
import tempfile

import pytest

from vesselprune import config, settings
from vesselprune.config import ConfigError, PipelineConfig, config_from_dict, derive_seed


def test_config_from_dict_defaults():
    cfg = config_from_dict({})
    assert cfg == PipelineConfig()
    assert cfg.gat.threshold == settings.PRUNE_THRESHOLD
    assert cfg.benchmark.n_scenes == 60

    cfg = config_from_dict(
        {
            "rng_seed": 3,
            "synth": {"volume_dims": [32, 32, 32], "branch_len_range": [4, 6]},
            "gat": {"lr": 1, "standardize": True},
        }
    )
    assert cfg.synth.volume_dims == (32, 32, 32)
    assert cfg.synth.branch_len_range == (4.0, 6.0)
    assert isinstance(cfg.gat.lr, float)
    assert cfg.gat.standardize is True

    cfg = config_from_dict({"dual_graph": {"feature_volumes": ["feats/{scene}_vesselness.cvol"]}})
    assert cfg.dual_graph.feature_volumes == ("feats/{scene}_vesselness.cvol",)
    assert cfg.dual_graph.feature_paths("scene_001") == ["feats/scene_001_vesselness.cvol"]


@pytest.mark.parametrize(
    "data, match",
    [
        ([1, 2], "config: must be an object"),
        ({"graph": {}}, "graph: unknown section"),
        ({"gat": {"layers": 2}}, r"gat.layers: unknown field"),
        ({"gat": []}, "gat: must be an object"),
        ({"gat": {"heads": 2.5}}, "gat.heads: must be an integer"),
        ({"gat": {"heads": True}}, "gat.heads: must be an integer"),
        ({"gat": {"standardize": 1}}, "gat.standardize: must be a boolean"),
        ({"eval": {"catch_dist": "far"}}, "eval.catch_dist: must be a number"),
        ({"gat": {"init": 3}}, "gat.init: must be a string"),
        ({"synth": {"volume_dims": [32, 32]}}, "synth.volume_dims: must be a list of 3"),
        ({"synth": {"volume_dims": [32, 32, "a"]}}, r"synth.volume_dims\[2\]"),
        ({"gat": {"threshold": 1.5}}, "gat.threshold: must lie in"),
        ({"dual_graph": {"nmd": 0}}, "dual_graph.nmd: must be positive"),
        ({"dual_graph": {"feature_volumes": "a.cvol"}}, "feature_volumes: must be a list"),
        ({"dual_graph": {"feature_volumes": [3]}}, r"dual_graph.feature_volumes\[0\]"),
        ({"dual_graph": {"feature_volumes": ["a.cvol"]}}, "dual_graph.feature_volumes: path"),
        ({"benchmark": {"workers": 0}}, "benchmark.workers: must be positive"),
        ({"rng_seed": -1}, "rng_seed: must be an unsigned 64 bit integer"),
        ({"rng_seed": "1"}, "rng_seed: must be an integer"),
        ({"out_dir": ""}, "out_dir: must be a non-empty path"),
    ],
)
def test_config_from_dict_errors(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_config_hash():
    a = config_from_dict({"rng_seed": 1})
    assert a.config_hash() == config_from_dict({"rng_seed": 1}).config_hash()
    assert a.config_hash() != config_from_dict({"rng_seed": 2}).config_hash()
    assert a.config_hash() != a.replace("gat.threshold", 0.3).config_hash()
    # the output location does not change the hash
    assert a.config_hash() == a.replace("out_dir", "elsewhere").config_hash()
    assert len(a.config_hash()) == 32


def test_config_replace():
    cfg = config_from_dict({})
    changed = cfg.replace("dual_graph.nmd", 7)
    assert changed.dual_graph.nmd == 7.0
    assert cfg.dual_graph.nmd == settings.NODE_MATCHING_DISTANCE
    assert cfg.replace("rng_seed", 5).rng_seed == 5

    with pytest.raises(ConfigError, match="gat.threshold"):
        cfg.replace("gat.threshold", -0.1)


def test_load_config():
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, "config.json")
        with open(path, "w") as f:
            json.dump({"rng_seed": 11, "gat": {"epochs": 3}}, f)

        cfg = config.load_config(path)
        assert cfg.rng_seed == 11
        assert cfg.gat.epochs == 3

        with pytest.raises(FileNotFoundError, match=r"A bad path*"):
            config.load_config(os.path.join(temp_dir, "missing.json"))


def test_derive_seed():
    assert derive_seed(1, "synth", 0) == derive_seed(1, "synth", 0)
    seeds = {derive_seed(1, stage, i) for stage in settings.STAGES for i in range(5)}
    assert len(seeds) == 5 * len(settings.STAGES)
    assert derive_seed(1, "trace", 3) != derive_seed(2, "trace", 3)
    assert 0 <= derive_seed(2**64 - 1, "eval", 9) < 2**63

    with pytest.raises(ValueError):
        derive_seed(1, "render", 0)
