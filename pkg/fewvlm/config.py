import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import yaml

from fewvlm.utils.errors import ConfigError, MissingFile
from fewvlm.utils.logging import CONFIG_DIR, logger


def read_config(name: str) -> dict:
    """Load one of the yaml files under `configs/` by its stem"""
    return yaml.safe_load(open(CONFIG_DIR / f"{name}.yaml"))


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON rendering of a resolved config"""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def resolve_seed(seed: int | None, default: int = 0) -> int:
    """Explicit seed first, then the FEWVLM_SEED environment variable, then `default`"""
    if seed is not None:
        return int(seed)
    env = os.environ.get("FEWVLM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"FEWVLM_SEED must be an integer, got {env=}") from err
    return default


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters of the encoder-decoder.

    Attributes
    ----------
    n_enc_layers : int
        Number of encoder blocks.
    n_dec_layers : int
        Number of decoder blocks.
    hidden_dim : int
        Model width, equals n_heads * head_dim.
    ff_dim : int
        Width of the feed-forward sub-layer.
    n_heads : int
        Number of attention heads.
    head_dim : int
        Width of a single attention head.
    vocab_size : int
        Number of token ids, taken from the vocabulary in use.
    max_text_len : int
        Maximum number of text tokens on both the encoder and the decoder side.
    n_regions : int
        Number of region slots appended to the encoder input.
    feature_dim : int
        Width of a region feature vector.
    dropout : float
        Dropout rate used while training.
    """

    n_enc_layers: int = 4
    n_dec_layers: int = 4
    hidden_dim: int = 128
    ff_dim: int = 512
    n_heads: int = 8
    head_dim: int = 16
    vocab_size: int = 512
    max_text_len: int = 64
    n_regions: int = 36
    feature_dim: int = 2048
    dropout: float = 0.1

    def __post_init__(self):
        counts = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "dropout"}
        bad = {k: v for k, v in counts.items() if v < 1}
        if bad:
            raise ConfigError(f"All model counts must be >= 1, got {bad}")
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim must equal n_heads * head_dim, got {self.hidden_dim=},"
                f" {self.n_heads=}, {self.head_dim=}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout=}")


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings shared by pre-training and fine-tuning.

    Attributes
    ----------
    epochs : int
        Number of passes over the training pairs.
    lr : float
        Peak learning rate of Adam.
    warmup : float
        Fraction of the total steps used for linear warmup.
    batch_size : int
        Upper bound of examples per step.
    seed : int
        Seed for shuffling and dropout.
    eval_stride : int
        Evaluate the dev metric every `eval_stride` epochs (and after the last).
    max_gen_len : int
        Generation budget during dev evaluation.
    """

    epochs: int = 200
    lr: float = 5e-5
    warmup: float = 0.05
    batch_size: int = 16
    seed: int = 0
    eval_stride: int = 1
    max_gen_len: int = 20

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs=}")
        if not 0 <= self.warmup < 1:
            raise ConfigError(f"warmup must be in [0, 1), got {self.warmup=}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr=}")
        if self.batch_size < 1 or self.eval_stride < 1 or self.max_gen_len < 1:
            raise ConfigError(
                f"batch_size, eval_stride and max_gen_len must be >= 1, got {self}"
            )


@dataclass(frozen=True)
class ObjectiveConfig:
    mask_rate: float = 0.15
    mix: float = 0.5
    sentinel_offset: int = 0

    def __post_init__(self):
        if not 0 < self.mask_rate < 1:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate=}")
        if not 0 <= self.mix <= 1:
            raise ConfigError(f"mix must be in [0, 1], got {self.mix=}")
        if self.sentinel_offset < 0:
            raise ConfigError(f"sentinel_offset must be >= 0, got {self.sentinel_offset}")


@dataclass(frozen=True)
class SynthConfig:
    shapes: tuple = ("circle", "square", "triangle", "star")
    colors: tuple = ("red", "blue", "green", "black", "yellow")
    grid_size: int = 6
    feature_dim: int = 64
    n_regions: int = 8
    noise_sigma: float = 0.05
    min_objects: int = 1
    max_objects: int = 3
    projection_seed: int = 0
    n_pretrain: int = 2000
    n_vqa_pool: int = 200
    n_vqa_test: int = 200
    n_caption_pool: int = 200
    n_caption_test: int = 200
    n_way: int = 5
    n_query: int = 4
    n_episodes: int = 10

    def __post_init__(self):
        # yaml gives lists, keep the config hashable
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", tuple(self.colors))
        if self.feature_dim < 16:
            raise ConfigError(f"feature_dim must be >= 16, got {self.feature_dim=}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"Need 1 <= min_objects <= max_objects, got {self.min_objects=}, {self.max_objects=}"
            )
        if self.max_objects > min(self.n_regions, self.grid_size**2):
            raise ConfigError(
                f"{self.max_objects=} exceeds the region slots ({self.n_regions})"
                f" or grid cells ({self.grid_size**2})"
            )


@dataclass
class ExperimentConfig:
    """
    Resolved settings of one CLI command.

    Attributes
    ----------
    command : str
        The command the settings belong to.
    values : dict
        Flat mapping of command keys (paths, template id, metric id, seeds, ...).
    """

    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def hash(self) -> str:
        return config_hash({"command": self.command, **self.values})

    def to_dict(self) -> dict:
        return {"command": self.command, **self.values, "config_hash": self.hash}


def load_model_config(profile: str = "desk", **kwargs) -> ModelConfig:
    """
    Load a model profile from configs/model.yaml.

    Parameters
    ----------
    profile : str
        One of the top level keys in configs/model.yaml, e.g. "desk" or "paper_base".
    **kwargs
        Additional keyword arguments to override the profile values.

    Returns
    -------
    ModelConfig
    """
    profiles = read_config("model")
    if profile not in profiles:
        raise ConfigError(f"Unknown model profile {profile=}, available: {list(profiles)}")
    kw = {**profiles[profile], **kwargs}
    logger.debug(f"Creating ModelConfig with {kw=}")
    return ModelConfig(**kw)


def load_train_config(profile: str = "fewshot", **kwargs) -> TrainConfig:
    profiles = read_config("train")
    if profile not in profiles:
        raise ConfigError(f"Unknown train profile {profile=}, available: {list(profiles)}")
    kw = {**profiles[profile], **kwargs}
    logger.debug(f"Creating TrainConfig with {kw=}")
    return TrainConfig(**kw)


def load_objective_config(**kwargs) -> ObjectiveConfig:
    kw = {**read_config("objectives"), **kwargs}
    return ObjectiveConfig(**kw)


def load_synth_config(**kwargs) -> SynthConfig:
    kw = {**read_config("synth"), **kwargs}
    logger.debug(f"Creating SynthConfig with {kw=}")
    return SynthConfig(**kw)


def load_experiment_config(
    command: str, config_file: str | None = None, **flags
) -> ExperimentConfig:
    """
    Resolve the settings of a CLI command.

    Defaults come from configs/experiment.yaml, command line flags overwrite
    them, and an explicit config file (JSON or yaml) overwrites both. A flag
    that disagrees with the config file is reported as a warning.

    Parameters
    ----------
    command : str
        Section of configs/experiment.yaml to start from.
    config_file : str | None
        Path to an experiment config file whose keys mirror the flags.
    **flags
        Values given on the command line. `None` values are ignored.

    Returns
    -------
    ExperimentConfig
    """
    defaults = read_config("experiment").get(command, {}) or {}
    values = {**defaults}
    flags = {k: v for k, v in flags.items() if v is not None}
    values.update(flags)

    file_cfg = {}
    if config_file is not None:
        try:
            with open(config_file, encoding="utf-8") as f:
                file_cfg = yaml.safe_load(f) or {}
        except OSError as err:
            raise MissingFile(f"Cannot read config file {config_file}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"Config file {config_file} is not valid yaml: {err}") from err
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"Config file {config_file} must hold a mapping, got {type(file_cfg).__name__}")
        for k, v in file_cfg.items():
            if k in flags and flags[k] != v:
                logger.warning(
                    f"Flag --{k}={flags[k]!r} conflicts with {config_file}: using {v!r}"
                )
        values.update(file_cfg)

    for key in ("seed", "master_seed"):
        if key in values:
            explicit = file_cfg.get(key, flags.get(key))
            values[key] = resolve_seed(explicit, default=int(defaults.get(key) or 0))

    cfg = ExperimentConfig(command=command, values=values)
    logger.info(f"Resolved {command} config: {cfg.values}")
    return cfg
