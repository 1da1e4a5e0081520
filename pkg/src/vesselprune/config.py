import copy
import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np
from alpineer import misc_utils

from vesselprune import settings
from vesselprune.dual_graph import DualGraphParams
from vesselprune.gat import GatParams
from vesselprune.heatmap_synth import CorruptionParams, HeatmapParams, SynthParams
from vesselprune.json_utils import dumps, read_json_file
from vesselprune.prune_eval import EvalParams
from vesselprune.tracer import TracerParams


class ConfigError(ValueError):
    """Raised for an invalid config value; the message starts with the dotted field path."""


@dataclass
class BenchmarkParams:
    """Scene counts of the synthetic benchmark and sweep parallelism.

    Args:
        n_train (int): scenes used to train the network
        n_test (int): scenes pruned and evaluated
        workers (int): worker threads for sweep points
    """

    n_train: int = 50
    n_test: int = 10
    workers: int = 4

    def validate(self):
        if self.n_train < 1:
            raise ValueError(f"n_train: must be positive, got {self.n_train}")
        if self.n_test < 1:
            raise ValueError(f"n_test: must be positive, got {self.n_test}")
        if self.workers < 1:
            raise ValueError(f"workers: must be positive, got {self.workers}")

    @property
    def n_scenes(self) -> int:
        return self.n_train + self.n_test


SECTIONS = {
    "synth": SynthParams,
    "heatmap": HeatmapParams,
    "corruption": CorruptionParams,
    "tracer": TracerParams,
    "dual_graph": DualGraphParams,
    "gat": GatParams,
    "eval": EvalParams,
    "benchmark": BenchmarkParams,
}


@dataclass
class PipelineConfig:
    """The full pipeline configuration, one section per module plus the global seed."""

    rng_seed: int = 0
    out_dir: str = "vesselprune_out"
    synth: SynthParams = field(default_factory=SynthParams)
    heatmap: HeatmapParams = field(default_factory=HeatmapParams)
    corruption: CorruptionParams = field(default_factory=CorruptionParams)
    tracer: TracerParams = field(default_factory=TracerParams)
    dual_graph: DualGraphParams = field(default_factory=DualGraphParams)
    gat: GatParams = field(default_factory=GatParams)
    eval: EvalParams = field(default_factory=EvalParams)
    benchmark: BenchmarkParams = field(default_factory=BenchmarkParams)

    def validate(self):
        if not isinstance(self.rng_seed, int) or isinstance(self.rng_seed, bool):
            raise ConfigError(f"rng_seed: must be an integer, got {self.rng_seed!r}")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError(f"rng_seed: must be an unsigned 64 bit integer, got {self.rng_seed}")
        if not isinstance(self.out_dir, str) or not self.out_dir:
            raise ConfigError(f"out_dir: must be a non-empty path, got {self.out_dir!r}")
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except (ValueError, TypeError) as err:
                raise ConfigError(f"{name}.{err}") from err

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of every field except `out_dir`, so relocated runs share manifests."""
        data = self.to_dict()
        data.pop("out_dir")
        return hashlib.blake2b(dumps(data).encode("utf-8"), digest_size=16).hexdigest()

    def replace(self, path, value) -> "PipelineConfig":
        """A copy with the dotted field `path` (e.g. `dual_graph.nmd`) set to `value`."""
        data = self.to_dict()
        section, _, name = path.partition(".")
        if name:
            data[section][name] = value
        else:
            data[section] = value
        return config_from_dict(data)


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{path}: must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float, np.number)):
            raise ConfigError(f"{path}: must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: must be a string, got {value!r}")
        return value
    if default == ():
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: must be a list, got {value!r}")
        return tuple(_coerce(f"{path}[{i}]", v, "") for i, v in enumerate(value))
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{path}: must be a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(f"{path}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default)))
    return value


def _section_from_dict(name, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: must be an object, got {data!r}")
    defaults = cls()
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field, valid fields are {names}")
    values = {
        key: _coerce(f"{name}.{key}", value, getattr(defaults, key)) for key, value in data.items()
    }
    return cls(**values)


def config_from_dict(data) -> PipelineConfig:
    """Builds and validates a config; missing fields take their defaults.

    Args:
        data (dict): the parsed JSON config

    Returns:
        PipelineConfig:
            the validated config

    Raises:
        ConfigError:
            for unknown or out-of-domain fields, naming the dotted field path
    """
    if not isinstance(data, dict):
        raise ConfigError(f"config: must be an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(SECTIONS) - {"rng_seed", "out_dir"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section, valid sections are {list(SECTIONS)}")

    sections = {
        name: _section_from_dict(name, cls, copy.deepcopy(data.get(name, {})))
        for name, cls in SECTIONS.items()
    }
    config = PipelineConfig(
        rng_seed=data.get("rng_seed", 0),
        out_dir=data.get("out_dir", PipelineConfig.out_dir),
        **sections,
    )
    config.validate()
    return config


def load_config(config_path) -> PipelineConfig:
    return config_from_dict(read_json_file(config_path))


def derive_seed(seed, stage, index=0) -> int:
    """Per-stage, per-item seed split from the global seed.

    Args:
        seed (int): global seed
        stage (str): stage name, one of `settings.STAGES`
        index (int): scene or sub-task index

    Returns:
        int:
            a 63 bit seed, identical for identical arguments
    """
    misc_utils.verify_in_list(stage=[stage], valid_stages=settings.STAGES)
    sequence = np.random.SeedSequence([int(seed), settings.STAGES.index(stage), int(index)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
