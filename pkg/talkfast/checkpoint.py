"""
Checkpoint containers: named tensors plus the structural metadata needed to
refuse loading them under an incompatible configuration.
"""
import logging
import pathlib
from typing import Any
from typing import Dict
from typing import Optional
from typing import Union

import torch
from omegaconf import DictConfig
from torch import nn

from talkfast.config.schema import to_dict
from talkfast.diffusion import DiffusionModel
from talkfast.exceptions import CheckpointMismatchError
from talkfast.exceptions import ValidationError
from talkfast.landmarks import LandmarkGenerator

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("landmarks", "diffusion")

PathLike = Union[str, pathlib.Path]


def checkpoint_metadata(kind: str, config: DictConfig) -> Dict[str, Any]:
    """Structural settings a `kind` checkpoint's weights depend on."""
    audio, lm, diff, data = config.audio, config.landmarks, config.diffusion, config.data
    if kind == "landmarks":
        return {
            "num_points": lm.num_points,
            "mouth_indices": list(lm.mouth_indices),
            "frames": data.frames,
            "clip_samples": int(round(audio.clip_seconds * audio.sample_rate)),
            "encoder_set": audio.encoder_set,
            "context_width": audio.context_width,
            "emotion_width": audio.emotion_width,
            "hop": audio.hop,
            "num_emotions": audio.num_emotions,
            "decoder_width": lm.decoder_width,
            "face_width": lm.face_width,
            "mouth_width": lm.mouth_width,
            "recurrent_hidden": lm.recurrent_hidden,
            "heads": lm.heads,
            "layers": lm.layers,
            "point_width": lm.point_width,
            "fusion_width": lm.fusion_width,
            "head": lm.head,
            "head_hidden": lm.head_hidden,
            "grid_size": lm.grid_size,
            "use_global": lm.use_global,
            "use_context": lm.use_context,
            "use_kfusion": lm.use_kfusion,
        }
    if kind == "diffusion":
        return {
            "channels": list(diff.channels),
            "identity_shape": list(diff.identity_shape),
            "identity_width": diff.identity_width,
            "emotion_width": audio.emotion_width,
            "image_size": data.image_size,
            "frames": data.frames,
            "train_steps": diff.train_steps,
            "beta_schedule": diff.beta_schedule,
            "beta_start": diff.beta_start,
            "beta_end": diff.beta_end,
        }
    raise ValidationError(f"Unknown checkpoint kind: {kind}. Only supports one of: {list(KINDS)}")


def save_checkpoint(
    path: PathLike,
    kind: str,
    model: nn.Module,
    config: DictConfig,
    extra: Optional[Dict[str, Any]] = None,
) -> pathlib.Path:
    """Saves `model`'s state dict with metadata and the full config snapshot."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "metadata": checkpoint_metadata(kind, config),
        "config": to_dict(config),
        "extra": dict(extra or {}),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    logger.debug("saved %s checkpoint to %s", kind, path)
    return path


def validate_checkpoint(checkpoint: Dict[str, Any], kind: str, config: DictConfig) -> None:
    """Compares a loaded checkpoint with the run configuration.

    Raises:
        CheckpointMismatchError: If the kind, format version or any structural setting differs.
    """
    if checkpoint.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {checkpoint.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    if checkpoint.get("kind") != kind:
        raise CheckpointMismatchError(f"expected a {kind} checkpoint, got {checkpoint.get('kind')!r}")
    expected = checkpoint_metadata(kind, config)
    stored = checkpoint.get("metadata", {})
    differing = sorted(k for k in expected if stored.get(k) != expected[k])
    if differing:
        details = ", ".join(f"{k}: checkpoint={stored.get(k)!r} config={expected[k]!r}" for k in differing)
        raise CheckpointMismatchError(f"{kind} checkpoint does not match the configuration ({details})")


def load_checkpoint(path: PathLike, kind: str, config: Optional[DictConfig] = None) -> Dict[str, Any]:
    """Loads a checkpoint container, validating it against `config` when given.

    Raises:
        OSError: If `path` cannot be read.
        CheckpointMismatchError: See `validate_checkpoint`.
    """
    checkpoint = torch.load(str(path), map_location="cpu", weights_only=True)
    if config is not None:
        validate_checkpoint(checkpoint, kind, config)
    return checkpoint


def load_landmark_generator(
    path: PathLike, config: DictConfig, device: Union[str, torch.device] = "cpu"
) -> LandmarkGenerator:
    checkpoint = load_checkpoint(path, "landmarks", config)
    generator = LandmarkGenerator.from_config(config)
    generator.load_state_dict(checkpoint["state_dict"])
    return generator.to(device).eval()


def load_diffusion_model(
    path: PathLike, config: DictConfig, device: Union[str, torch.device] = "cpu"
) -> DiffusionModel:
    checkpoint = load_checkpoint(path, "diffusion", config)
    model = DiffusionModel.from_config(config)
    model.load_state_dict(checkpoint["state_dict"])
    return model.to(device).eval()
