"""
End-to-end generation: audio and one identity image in, numbered PNG frames
and a timing record out.
"""
import logging
import pathlib
from typing import NamedTuple
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
import torch
from omegaconf import DictConfig
from PIL import Image

from talkfast import bench
from talkfast.audio import clip_tensor
from talkfast.audio import load_audio
from talkfast.audio import segment_clips
from talkfast.checkpoint import load_checkpoint
from talkfast.checkpoint import load_diffusion_model
from talkfast.checkpoint import load_landmark_generator
from talkfast.config.schema import save_config
from talkfast.diffusion import ConditioningBundle
from talkfast.diffusion import DiffusionModel
from talkfast.diffusion import DiffusionSchedule
from talkfast.diffusion import build_schedule
from talkfast.diffusion import denoise_sequence
from talkfast.diffusion import identity_encode
from talkfast.dtypes import Stats
from talkfast.dtypes import TimingRecord
from talkfast.exceptions import ValidationError
from talkfast.format import save_rows
from talkfast.landmarks import LandmarkGenerator
from talkfast.landmarks import generate_landmarks
from talkfast.landmarks import template_landmarks
from talkfast.noise import apply_guided_noise
from talkfast.noise import landmark_noise_fields
from talkfast.system import collect_system_statistics
from talkfast.utils import resolve_device

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]


class Pipeline(NamedTuple):
    """Loaded models and the sampling schedule.

    Args:
        generator (LandmarkGenerator): Audio to landmark model.
        model (DiffusionModel): Denoiser with its identity encoder.
        sched (DiffusionSchedule): Schedule with the strided inference steps.
        config (DictConfig): Run configuration.
        use_emotion (bool): Whether `w_e` conditions the denoiser.
        device (torch.device): Device all models live on.
    """

    generator: LandmarkGenerator
    model: DiffusionModel
    sched: DiffusionSchedule
    config: DictConfig
    use_emotion: bool
    device: torch.device


class InferenceResult(NamedTuple):
    """Output of `infer`.

    Args:
        frame_dir (pathlib.Path): Directory of numbered PNG frames.
        frame_count (int): Written frames.
        landmarks (np.ndarray): `[N, P, 2]` generated landmarks.
        timing (TimingRecord): Per-clip speed summary.
    """

    frame_dir: pathlib.Path
    frame_count: int
    landmarks: np.ndarray
    timing: TimingRecord


def schedule_from_config(config: DictConfig) -> DiffusionSchedule:
    diff = config.diffusion
    return build_schedule(
        diff.train_steps, diff.inference_steps, diff.beta_schedule, diff.beta_start, diff.beta_end
    )


def load_pipeline(
    landmark_checkpoint: PathLike, diffusion_checkpoint: PathLike, config: DictConfig
) -> Pipeline:
    """Loads both stages, refusing checkpoints that do not match `config`.

    Raises:
        CheckpointMismatchError: If either checkpoint disagrees with `config`.
    """
    device = resolve_device(config.device)
    generator = load_landmark_generator(landmark_checkpoint, config, device)
    model = load_diffusion_model(diffusion_checkpoint, config, device)
    stored = load_checkpoint(diffusion_checkpoint, "diffusion")
    use_emotion = bool(stored.get("extra", {}).get("uses_emotion", False))
    return Pipeline(generator, model, schedule_from_config(config), config, use_emotion, device)


def load_identity_image(path: PathLike, size: int = 128) -> torch.Tensor:
    """Reads an RGB image resized to `size x size`, `[H, W, 3]` in [0, 1]."""
    with Image.open(path) as image:
        image = image.convert("RGB")
        if image.size != (size, size):
            image = image.resize((size, size), Image.BICUBIC)
        array = np.asarray(image, dtype=np.float32) / 255.0
    return torch.as_tensor(array)


@torch.no_grad()
def generate_clip(
    pipeline: Pipeline,
    audio: torch.Tensor,
    identity_image: torch.Tensor,
    identity_landmarks: torch.Tensor,
    w_i: Optional[torch.Tensor] = None,
    rng: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Generates the frames of one clip.

    Landmarks are predicted from the audio, turned into noise fields, the
    identity frame is noised at the first inference timestep with those
    fields and denoised with the strided DDIM chain.

    Args:
        pipeline (Pipeline): Loaded models.
        audio (torch.Tensor): `[L]` clip samples.
        identity_image (torch.Tensor): `[H, W, 3]` in [0, 1].
        identity_landmarks (torch.Tensor): `[P, 2]` landmarks of the identity image.
        w_i (Optional[torch.Tensor], optional): Precomputed identity vector `[2048]`.
        rng (Optional[torch.Generator], optional): CPU generator for the noise.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: Frames `[F, H, W, 3]` in [0, 1] and landmarks `[F, P, 2]`.
    """
    config, device = pipeline.config, pipeline.device
    generator, model = pipeline.generator, pipeline.model
    audio = audio.to(device).unsqueeze(0)
    context = generator.encoders(audio)
    points = generate_landmarks(generator, audio, identity_landmarks, context=context).points[0]

    size = identity_image.shape[0]
    fields = landmark_noise_fields(
        points.cpu(), config.noise.kernel_size, config.noise.sigma, config.noise.delta,
        size=size, generator=rng,
    ).values.unsqueeze(0)
    frames = points.shape[0]
    x_id = (identity_image * 2.0 - 1.0).expand(1, frames, -1, -1, -1).contiguous()
    eps = torch.randn(x_id.shape, generator=rng, dtype=x_id.dtype)
    start = pipeline.sched.inference_steps[0]
    init = apply_guided_noise(x_id, fields, eps, start, pipeline.sched).to(device)

    if w_i is None:
        w_i = identity_encode(identity_image.to(device), model.identity)
    cond = ConditioningBundle(context.w_e if pipeline.use_emotion else None, w_i.unsqueeze(0))
    out = denoise_sequence(init, cond, pipeline.sched, model, clip_x0=config.diffusion.clip_x0)
    return out[0].cpu(), points.cpu()


def save_frames(frames: torch.Tensor, out_dir: PathLike, start: int = 0) -> int:
    """Writes `[F, H, W, 3]` frames in [0, 1] as `%06d.png` starting at index `start`."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    array = np.round(frames.clamp(0.0, 1.0).numpy() * 255.0).astype(np.uint8)
    for i, frame in enumerate(array):
        Image.fromarray(frame).save(out_dir / f"{start + i:06d}.png")
    return len(array)


def _identity_landmarks(path: Optional[PathLike], num_points: int) -> torch.Tensor:
    if path is None:
        return template_landmarks(num_points)
    points = torch.as_tensor(np.load(path), dtype=torch.float32)
    if points.shape != (num_points, 2):
        raise ValidationError(f"identity landmarks must be [{num_points}, 2], got {tuple(points.shape)}")
    return points


def infer(
    audio_path: PathLike,
    identity_image_path: PathLike,
    landmark_checkpoint: PathLike,
    diffusion_checkpoint: PathLike,
    config: DictConfig,
    out_dir: PathLike,
    identity_landmarks_path: Optional[PathLike] = None,
    label: Optional[str] = None,
) -> InferenceResult:
    """Generates a talking-head frame sequence for an audio file.

    Writes `frames/%06d.png`, `landmarks.npy`, `timing.json`, `timing.md` and
    the config snapshot into `out_dir`. Every one-second clip yields
    `data.frames` frames; the same seed and inputs give identical frames.

    Args:
        audio_path (PathLike): Driving audio.
        identity_image_path (PathLike): Still image of the subject.
        landmark_checkpoint (PathLike): Trained landmark generator.
        diffusion_checkpoint (PathLike): Trained denoiser.
        config (DictConfig): Run configuration the checkpoints must match.
        out_dir (PathLike): Output directory.
        identity_landmarks_path (Optional[PathLike], optional): `.npy` `[P, 2]`
            landmarks of the identity image. Defaults to a neutral template face.
        label (Optional[str], optional): Timing row label. Defaults to `"Ours (step = N)"`.

    Raises:
        CheckpointMismatchError: If a checkpoint disagrees with `config`.
    """
    out_dir = pathlib.Path(out_dir)
    pipeline = load_pipeline(landmark_checkpoint, diffusion_checkpoint, config)
    save_config(config, out_dir)

    wave = load_audio(audio_path, config.audio.sample_rate)
    clips = segment_clips(wave, config.audio.clip_seconds, config.data.frames)
    identity_image = load_identity_image(identity_image_path, config.data.image_size)
    identity = _identity_landmarks(identity_landmarks_path, config.landmarks.num_points)
    w_i = identity_encode(identity_image.to(pipeline.device), pipeline.model.identity)
    rng = torch.Generator().manual_seed(config.seed)

    frame_dir = out_dir / "frames"
    times, all_points, written = [], [], 0
    for clip in clips:
        (frames, points), seconds = bench.time_call(
            generate_clip,
            pipeline,
            clip_tensor(clip)[0],
            identity_image,
            identity,
            w_i,
            rng,
            device=pipeline.device,
        )
        written += save_frames(frames, frame_dir, written)
        all_points.append(points.numpy())
        times.append(seconds)
        logger.info("clip %d/%d: %.3f s", len(times), len(clips), seconds)

    steps = len(pipeline.sched.inference_steps)
    stats = Stats(
        times, label or f"Ours (step = {steps})", frames_per_clip=config.data.frames, steps=steps
    )
    stats.validate()
    timing = TimingRecord.from_stats(
        stats, str(pipeline.device), collect_system_statistics(pipeline.device)._asdict()
    )
    save_rows(timing, out_dir, "timing", ("json", "markdown"))
    landmarks = np.concatenate(all_points) if all_points else np.zeros((0, config.landmarks.num_points, 2))
    np.save(out_dir / "landmarks.npy", landmarks)
    logger.info("wrote %d frames to %s (%.3f s per clip, %.1f FPS)", written, frame_dir, timing.seconds_per_clip, timing.fps)
    return InferenceResult(frame_dir, written, landmarks, timing)


def benchmark_inference(
    pipeline: Pipeline,
    identity_image: torch.Tensor,
    identity_landmarks: Optional[torch.Tensor] = None,
    repetitions: int = 5,
    warmups: int = 1,
) -> TimingRecord:
    """Repeatedly generates one silent clip to measure seconds per clip and FPS."""
    config = pipeline.config
    clip_samples = int(round(config.audio.clip_seconds * config.audio.sample_rate))
    audio = torch.zeros(clip_samples)
    if identity_landmarks is None:
        identity_landmarks = template_landmarks(config.landmarks.num_points)
    w_i = identity_encode(identity_image.to(pipeline.device), pipeline.model.identity)
    rng = torch.Generator().manual_seed(config.seed)
    steps = len(pipeline.sched.inference_steps)
    stats = bench.benchit(
        generate_clip,
        repetitions,
        warmups=warmups,
        fn_args=(pipeline, audio, identity_image, identity_landmarks, w_i, rng),
        label=f"Ours (step = {steps})",
        frames_per_clip=config.data.frames,
        steps=steps,
        device=pipeline.device,
    )
    stats.validate()
    return TimingRecord.from_stats(
        stats, str(pipeline.device), collect_system_statistics(pipeline.device)._asdict()
    )
