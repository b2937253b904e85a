"""
Run configuration: a structured schema merged with an optional YAML file,
command line dotlist overrides and path environment variables.
"""
import logging
import os
import pathlib
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Union

from omegaconf import DictConfig
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from talkfast.exceptions import ConfigError

logger = logging.getLogger(__name__)

ENV_OVERRIDES = {
    "TALKFAST_DATA_ROOT": "paths.data_root",
    "TALKFAST_OUTPUT_DIR": "paths.output_dir",
    "TALKFAST_CHECKPOINT_DIR": "paths.checkpoint_dir",
}
SNAPSHOT_NAME = "config.yaml"


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    clip_seconds: float = 1.0
    encoder_set: str = "conv"
    context_width: int = 64
    emotion_width: int = 64
    hop: int = 320
    num_emotions: int = 8


@dataclass
class LandmarksConfig:
    num_points: int = 68
    mouth_indices: List[int] = field(default_factory=lambda: list(range(48, 68)))
    decoder_width: int = 64
    face_width: int = 128
    mouth_width: int = 64
    recurrent_hidden: int = 128
    heads: int = 4
    layers: int = 2
    dropout: float = 0.0
    point_width: int = 4
    fusion_width: int = 128
    head: str = "kan"
    head_hidden: int = 64
    grid_size: int = 8
    use_global: bool = True
    use_context: bool = True
    use_kfusion: bool = True
    emotion_loss_weight: float = 0.0


@dataclass
class NoiseConfig:
    kernel_size: int = 13
    sigma: float = 2.0
    delta: float = 0.1


@dataclass
class DiffusionConfig:
    train_steps: int = 1000
    inference_steps: int = 8
    beta_schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: List[int] = field(default_factory=lambda: [32, 64, 128])
    identity_shape: List[int] = field(default_factory=lambda: [32, 64])
    identity_width: int = 32
    clip_x0: bool = True
    use_emotion: bool = True
    landmark_checkpoint: Optional[str] = None


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    lr_min: float = 1e-6
    max_steps_per_epoch: Optional[int] = None
    grad_clip: Optional[float] = None
    num_workers: int = 0
    progress: bool = True


@dataclass
class DataConfig:
    frames: int = 30
    fps: int = 30
    image_size: int = 128
    split_seed: int = 0
    test_fraction: float = 0.1
    val_fraction: float = 0.1
    ingest_workers: int = 4


@dataclass
class PathsConfig:
    data_root: str = "data"
    output_dir: str = "runs"
    checkpoint_dir: str = "checkpoints"


@dataclass
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    landmarks: LandmarksConfig = field(default_factory=LandmarksConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    device: str = "auto"
    seed: int = 0


def default_config() -> DictConfig:
    """The schema with all defaults, typed and closed to unknown keys."""
    return OmegaConf.structured(RunConfig)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and not n & (n - 1)


def validate_config(config: DictConfig) -> DictConfig:
    """Checks the cross-field invariants of a `RunConfig`.

    Raises:
        ConfigError: Listing every violated invariant.
    """
    problems = []
    audio, lm, noise, diff = config.audio, config.landmarks, config.noise, config.diffusion
    train, data = config.train, config.data

    if noise.kernel_size < 1 or noise.kernel_size % 2 == 0:
        problems.append(f"noise.kernel_size must be a positive odd number, got {noise.kernel_size}")
    if not noise.sigma > 0:
        problems.append(f"noise.sigma must be positive, got {noise.sigma}")
    if not 0.0 < noise.delta < 1.0:
        problems.append(f"noise.delta must lie in (0, 1), got {noise.delta}")

    mouth = list(lm.mouth_indices)
    if not mouth:
        problems.append("landmarks.mouth_indices must not be empty")
    if len(set(mouth)) != len(mouth):
        problems.append("landmarks.mouth_indices must be unique")
    if any(i < 0 or i >= lm.num_points for i in mouth):
        problems.append(f"landmarks.mouth_indices must lie in [0, {lm.num_points})")
    if lm.head not in ("kan", "mlp"):
        problems.append(f"landmarks.head must be 'kan' or 'mlp', got {lm.head!r}")

    clip_samples = int(round(audio.clip_seconds * audio.sample_rate))
    if audio.hop < 1 or clip_samples % audio.hop:
        problems.append(f"clip samples ({clip_samples}) must be divisible by audio.hop ({audio.hop})")

    if len(diff.channels) != 3:
        problems.append(f"diffusion.channels must hold three sizes, got {list(diff.channels)}")
    if len(diff.identity_shape) != 2:
        problems.append(f"diffusion.identity_shape must be two sizes, got {list(diff.identity_shape)}")
    if not 1 <= diff.inference_steps <= diff.train_steps:
        problems.append(
            f"diffusion.inference_steps must lie in [1, {diff.train_steps}], got {diff.inference_steps}"
        )
    if diff.beta_schedule not in ("linear", "cosine"):
        problems.append(f"diffusion.beta_schedule must be 'linear' or 'cosine', got {diff.beta_schedule!r}")

    if train.epochs < 1:
        problems.append(f"train.epochs must be positive, got {train.epochs}")
    if train.lr_min > train.lr:
        problems.append(f"train.lr_min ({train.lr_min}) must not exceed train.lr ({train.lr})")

    if data.frames < 1:
        problems.append(f"data.frames must be positive, got {data.frames}")
    if not _is_power_of_two(data.image_size) or data.image_size < 8:
        problems.append(f"data.image_size must be a power of two >= 8, got {data.image_size}")
    for name in ("test_fraction", "val_fraction"):
        if not 0.0 <= data[name] < 1.0:
            problems.append(f"data.{name} must lie in [0, 1), got {data[name]}")

    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    return config


def apply_env_overrides(
    config: DictConfig, environ: Optional[Mapping[str, str]] = None
) -> DictConfig:
    """Overrides path entries from `TALKFAST_*` environment variables."""
    environ = os.environ if environ is None else environ
    for variable, key in ENV_OVERRIDES.items():
        if environ.get(variable):
            OmegaConf.update(config, key, environ[variable])
            logger.debug("%s overridden by %s", key, variable)
    return config


def load_config(
    path: Optional[Union[str, pathlib.Path]] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> DictConfig:
    """Builds and validates a run configuration.

    Precedence, lowest first: schema defaults, the YAML file at `path`,
    `overrides` in `key=value` dotlist form, path environment variables.

    Raises:
        ConfigError: On unknown keys, type errors or violated invariants.
    """
    try:
        config = default_config()
        if path is not None:
            config = OmegaConf.merge(config, OmegaConf.load(str(path)))
        if overrides:
            config = OmegaConf.merge(config, OmegaConf.from_dotlist(list(overrides)))
    except OmegaConfBaseException as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    apply_env_overrides(config, environ)
    return validate_config(config)


def with_overrides(config: DictConfig, overrides: Mapping[str, Any]) -> DictConfig:
    """Validated copy of `config` with `{"section.key": value}` updates."""
    copy = OmegaConf.merge(config, {})
    try:
        for key, value in overrides.items():
            OmegaConf.update(copy, key, value)
    except OmegaConfBaseException as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return validate_config(copy)


def to_dict(config: DictConfig) -> Dict[str, Any]:
    return OmegaConf.to_container(config, resolve=True)


def save_config(config: DictConfig, out_dir: Union[str, pathlib.Path]) -> pathlib.Path:
    """Writes the run's `config.yaml` snapshot into `out_dir`."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    OmegaConf.save(config, path)
    return path


def load_snapshot(run_dir: Union[str, pathlib.Path]) -> DictConfig:
    """Reloads the snapshot written by `save_config`."""
    return load_config(pathlib.Path(run_dir) / SNAPSHOT_NAME, environ={})
