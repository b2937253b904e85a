"""
Training loops of the two trainable stages: the landmark generator and the
identity-conditioned denoiser (conditioned on ground truth landmarks).
"""
import logging
import math
import pathlib
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Tuple
from typing import Union

import torch
import torch.nn.functional as F
from omegaconf import DictConfig
from torch import nn
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from talkfast.audio import EncoderSet
from talkfast.checkpoint import load_landmark_generator
from talkfast.checkpoint import save_checkpoint
from talkfast.config.schema import save_config
from talkfast.data import ClipDataset
from talkfast.data import DatasetManifest
from talkfast.data import make_loader
from talkfast.diffusion import DiffusionModel
from talkfast.diffusion import DiffusionSchedule
from talkfast.diffusion import build_schedule
from talkfast.diffusion import diffusion_loss
from talkfast.exceptions import NonFiniteLossError
from talkfast.exceptions import ValidationError
from talkfast.landmarks import LandmarkGenerator
from talkfast.noise import landmark_noise_fields
from talkfast.utils import resolve_device
from talkfast.utils import seed_everything

logger = logging.getLogger(__name__)

STAGES = ("landmarks", "diffusion")

Batch = Dict[str, Any]
PathLike = Union[str, pathlib.Path]


class TrainResult(NamedTuple):
    """Outcome of one training run.

    Args:
        stage (str): `"landmarks"` or `"diffusion"`.
        checkpoint (pathlib.Path): Checkpoint of the final epoch.
        run_dir (pathlib.Path): Directory with the config snapshot and checkpoints.
        losses (List[float]): Mean loss per epoch.
    """

    stage: str
    checkpoint: pathlib.Path
    run_dir: pathlib.Path
    losses: List[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def cosine_lr(epoch: int, epochs: int, lr: float = 1e-4, lr_min: float = 1e-6) -> float:
    """Cosine annealing from `lr` at epoch 0 to `lr_min` at epoch `epochs - 1`."""
    if epochs <= 1:
        return lr
    progress = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return lr_min + (lr - lr_min) * (1.0 + math.cos(math.pi * progress)) / 2.0


def make_scheduler(
    optimizer: torch.optim.Optimizer, epochs: int, lr: float, lr_min: float
) -> LambdaLR:
    """Per-epoch scheduler following `cosine_lr`; `optimizer` must start at `lr`."""
    return LambdaLR(optimizer, lambda epoch: cosine_lr(epoch, epochs, lr, lr_min) / lr)


def _to_device(batch: Batch, device: torch.device) -> Batch:
    return {k: v.to(device) if isinstance(v, torch.Tensor) else v for k, v in batch.items()}


def landmark_loss(generator: LandmarkGenerator, batch: Batch, emotion_weight: float = 0.0) -> torch.Tensor:
    """MSE between predicted and ground truth landmarks, plus the optional
    emotion classification term weighted by `emotion_weight`.
    """
    audio = batch["audio"]
    needs_context = generator.use_context or emotion_weight > 0
    context = generator.encoders(audio) if needs_context else None
    pred = generator(audio, batch["identity_landmarks"], context)
    loss = F.mse_loss(pred, batch["landmarks"])
    if emotion_weight > 0:
        logits = generator.encoders.classify_emotion(context.w_e)
        loss = loss + emotion_weight * F.cross_entropy(logits, batch["emotion"])
    return loss


def diffusion_batch_loss(
    model: DiffusionModel,
    batch: Batch,
    config: DictConfig,
    sched: DiffusionSchedule,
    encoders: Optional[EncoderSet] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Denoising loss of one batch.

    Noise fields come from the batch's ground truth landmarks. `w_e` is taken
    from the frozen `encoders` when given, otherwise emotion conditioning is off.
    """
    device = batch["frames"].device
    fields = landmark_noise_fields(
        batch["landmarks"].cpu(),
        config.noise.kernel_size,
        config.noise.sigma,
        config.noise.delta,
        size=batch["frames"].shape[-2],
        generator=generator,
    ).values.to(device)
    w_e = None
    if encoders is not None:
        with torch.no_grad():
            w_e = encoders(batch["audio"]).w_e
    cond = model.condition(batch["identity_image"], w_e)
    x0 = batch["frames"] * 2.0 - 1.0
    return diffusion_loss(model, x0, fields, cond, sched, generator=generator)


def _dump_batch(run_dir: pathlib.Path, stage: str, epoch: int, step: int, batch: Batch) -> pathlib.Path:
    path = run_dir / "nan_batch.pt"
    payload = {
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "batch": {k: v.detach().cpu() if isinstance(v, torch.Tensor) else v for k, v in batch.items()},
    }
    torch.save(payload, path)
    return path


def fit(
    stage: str,
    model: nn.Module,
    loss_fn: Callable[[Batch], torch.Tensor],
    loader,
    config: DictConfig,
    run_dir: pathlib.Path,
    device: torch.device,
    extra: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """Adam with per-epoch cosine annealing; writes `<stage>_last.pt` after every epoch.

    Raises:
        NonFiniteLossError: On a NaN or Inf loss, after dumping the batch to `nan_batch.pt`.
    """
    train = config.train
    parameters = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(parameters, lr=train.lr)
    scheduler = make_scheduler(optimizer, train.epochs, train.lr, train.lr_min)
    checkpoint = run_dir / "checkpoints" / f"{stage}_last.pt"
    losses = []

    for epoch in range(train.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        total, steps = 0.0, 0
        progress = tqdm(loader, desc=f"{stage} {epoch + 1}/{train.epochs}", disable=not train.progress, leave=False)
        for step, batch in enumerate(progress):
            if train.max_steps_per_epoch is not None and step >= train.max_steps_per_epoch:
                break
            batch = _to_device(batch, device)
            loss = loss_fn(batch)
            if not torch.isfinite(loss):
                path = _dump_batch(run_dir, stage, epoch, step, batch)
                raise NonFiniteLossError(
                    f"{stage} loss is {loss.item()} at epoch {epoch} step {step}, batch saved to {path}",
                    str(path),
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if train.grad_clip is not None:
                nn.utils.clip_grad_norm_(parameters, train.grad_clip)
            optimizer.step()
            total += loss.item()
            steps += 1
            progress.set_postfix(loss=f"{loss.item():.4g}")
        if steps == 0:
            raise ValidationError(f"no {stage} training batches")
        losses.append(total / steps)
        scheduler.step()
        logger.info("%s epoch %d/%d loss %.6g lr %.3g", stage, epoch + 1, train.epochs, losses[-1], lr)
        save_checkpoint(
            checkpoint, stage, model, config, dict(extra or {}, epoch=epoch, loss=losses[-1])
        )
    return TrainResult(stage, checkpoint, run_dir, losses)


def _prepare(
    stage: str,
    manifest: DatasetManifest,
    config: DictConfig,
    data_root: Optional[PathLike],
    run_dir: Optional[PathLike],
) -> Tuple[pathlib.Path, ClipDataset, torch.device]:
    seed_everything(config.seed)
    run_dir = pathlib.Path(run_dir or pathlib.Path(config.paths.output_dir) / stage)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir)
    dataset = ClipDataset(
        manifest, data_root or config.paths.data_root, "train", config.audio.sample_rate
    )
    if not len(dataset):
        raise ValidationError("the manifest holds no training clips")
    device = resolve_device(config.device)
    logger.info("training %s on %d clips (%s)", stage, len(dataset), device)
    return run_dir, dataset, device


def train_landmarks(
    manifest: DatasetManifest,
    config: DictConfig,
    data_root: Optional[PathLike] = None,
    run_dir: Optional[PathLike] = None,
) -> TrainResult:
    """Trains the audio to landmark generator on the manifest's train split."""
    run_dir, dataset, device = _prepare("landmarks", manifest, config, data_root, run_dir)
    generator = LandmarkGenerator.from_config(config).to(device)
    loader = make_loader(dataset, config.train.batch_size, True, config.seed, config.train.num_workers)
    weight = config.landmarks.emotion_loss_weight
    return fit(
        "landmarks", generator, lambda b: landmark_loss(generator, b, weight), loader, config, run_dir, device
    )


def train_diffusion(
    manifest: DatasetManifest,
    config: DictConfig,
    data_root: Optional[PathLike] = None,
    run_dir: Optional[PathLike] = None,
) -> TrainResult:
    """Trains the denoiser on ground truth landmarks of the train split.

    Emotion conditioning uses the encoders of `diffusion.landmark_checkpoint`
    when `diffusion.use_emotion` is set and a checkpoint is configured.
    """
    run_dir, dataset, device = _prepare("diffusion", manifest, config, data_root, run_dir)
    model = DiffusionModel.from_config(config).to(device)
    sched = build_schedule(
        config.diffusion.train_steps,
        config.diffusion.inference_steps,
        config.diffusion.beta_schedule,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )
    encoders = None
    if config.diffusion.use_emotion and config.diffusion.landmark_checkpoint:
        encoders = load_landmark_generator(config.diffusion.landmark_checkpoint, config, device).encoders
        encoders.requires_grad_(False)
    else:
        logger.info("training the denoiser without emotion conditioning")
    rng = torch.Generator().manual_seed(config.seed)
    loader = make_loader(dataset, config.train.batch_size, True, config.seed, config.train.num_workers)
    return fit(
        "diffusion",
        model,
        lambda b: diffusion_batch_loss(model, b, config, sched, encoders, rng),
        loader,
        config,
        run_dir,
        device,
        extra={"uses_emotion": encoders is not None},
    )


def train_stage(
    stage: str,
    manifest: DatasetManifest,
    config: DictConfig,
    data_root: Optional[PathLike] = None,
    run_dir: Optional[PathLike] = None,
) -> TrainResult:
    """Trains `stage`, `"landmarks"` or `"diffusion"`.

    Raises:
        ValidationError: If `stage` is unknown or there is nothing to train on.
        NonFiniteLossError: If the loss diverges.
    """
    if stage == "landmarks":
        return train_landmarks(manifest, config, data_root, run_dir)
    if stage == "diffusion":
        return train_diffusion(manifest, config, data_root, run_dir)
    raise ValidationError(f"Unknown stage: {stage}. Only supports one of: {list(STAGES)}")
