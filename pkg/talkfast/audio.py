"""
Audio loading, clip segmentation and the context encoder boundary.
"""
import logging
import math
import pathlib
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Union

import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F
from scipy import signal
from torch import nn

from talkfast.exceptions import ConfigError
from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SECONDS = 1.0
FRAMES_PER_CLIP = 30


class AudioWave(NamedTuple):
    """Mono audio buffer.

    Args:
        samples (np.ndarray): 1-D float64 samples, amplitude in [-1, 1].
        sample_rate (int): Sample rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


class AudioClip(NamedTuple):
    """A fixed-length clip cut from an `AudioWave`.

    Args:
        wave (AudioWave): Exactly `duration * sample_rate` samples.
        duration (float): Seconds.
        frame_count (int): Video frames the clip drives.
    """

    wave: AudioWave
    duration: float = CLIP_SECONDS
    frame_count: int = FRAMES_PER_CLIP


class ContextFeature(NamedTuple):
    """Fused context representation.

    Args:
        c (torch.Tensor): `[B, T_a, D_c]` elementwise product of emotion and speech features.
        w_e (torch.Tensor): `[B, D_e]` pooled emotion embedding.
    """

    c: torch.Tensor
    w_e: torch.Tensor


def validate_wave(wave: AudioWave) -> AudioWave:
    """Checks the `AudioWave` invariants.

    Raises:
        ValidationError: If the wave is not mono, not finite or has no samples.
    """
    samples = np.asarray(wave.samples)
    if samples.ndim != 1:
        raise ValidationError(f"audio must be mono, got shape {samples.shape}")
    if samples.size == 0:
        raise ValidationError("audio has zero length")
    if not np.all(np.isfinite(samples)):
        raise ValidationError("audio contains non-finite samples")
    if wave.sample_rate <= 0:
        raise ValidationError(f"invalid sample rate {wave.sample_rate}")
    return wave


def resample(samples: np.ndarray, orig_sr: int, target_sr: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser window) from `orig_sr` to `target_sr`."""
    if orig_sr == target_sr:
        return samples
    divisor = math.gcd(int(orig_sr), int(target_sr))
    up = int(target_sr) // divisor
    down = int(orig_sr) // divisor
    return signal.resample_poly(samples, up, down)


def peak_normalize(samples: np.ndarray) -> np.ndarray:
    """Scales `samples` so the peak is at most 1. Quieter signals pass unchanged."""
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        return samples / peak
    return samples


def load_audio(
    path: Union[str, pathlib.Path], sample_rate: int = SAMPLE_RATE
) -> AudioWave:
    """Loads an audio file as a mono, `sample_rate` Hz, peak-bounded `AudioWave`.

    Multi-channel input is averaged over channels.

    Args:
        path (Union[str, pathlib.Path]): Audio file, usually WAV (PCM 16/24 bit or float).
        sample_rate (int, optional): Target rate. Defaults to 16000.

    Raises:
        OSError: If the file cannot be read or decoded.
        ValidationError: If the file holds no samples or non-finite values.

    Returns:
        AudioWave: The normalized wave.
    """
    try:
        data, file_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc

    if data.shape[0] == 0:
        raise ValidationError(f"{path} contains zero-length audio")

    samples = data.mean(axis=1)
    samples = resample(samples, file_rate, sample_rate)
    samples = peak_normalize(samples)
    return validate_wave(AudioWave(np.ascontiguousarray(samples), sample_rate))


def save_audio(path: Union[str, pathlib.Path], wave: AudioWave) -> None:
    """Writes `wave` as a float WAV file."""
    sf.write(str(path), np.asarray(wave.samples), wave.sample_rate, subtype="FLOAT")


def segment_clips(
    wave: AudioWave,
    clip_seconds: float = CLIP_SECONDS,
    frames_per_clip: int = FRAMES_PER_CLIP,
) -> List[AudioClip]:
    """Splits `wave` into consecutive clips of `clip_seconds`, zero padding the last one.

    An empty wave yields no clips. Concatenating the clips and dropping the
    padding gives back the original samples.

    Returns:
        List[AudioClip]: `ceil(len / clip_samples)` clips.
    """
    samples = np.asarray(wave.samples)
    if samples.ndim != 1:
        raise ValidationError(f"audio must be mono, got shape {samples.shape}")
    clip_samples = int(round(clip_seconds * wave.sample_rate))
    count = math.ceil(samples.size / clip_samples)
    clips = []
    for index in range(count):
        chunk = samples[index * clip_samples : (index + 1) * clip_samples]
        if chunk.size < clip_samples:
            chunk = np.concatenate([chunk, np.zeros(clip_samples - chunk.size, chunk.dtype)])
        clips.append(
            AudioClip(AudioWave(chunk, wave.sample_rate), clip_seconds, frames_per_clip)
        )
    return clips


def clip_tensor(clips: Union[AudioClip, List[AudioClip]]) -> torch.Tensor:
    """Stacks clip samples into a float32 `[B, samples]` tensor."""
    if isinstance(clips, AudioClip):
        clips = [clips]
    return torch.as_tensor(
        np.stack([np.asarray(c.wave.samples) for c in clips]), dtype=torch.float32
    )


class ConvAudioEncoder(nn.Module):
    """Strided-convolution stand-in for a pretrained audio encoder.

    One convolution with kernel and stride `hop` frames the waveform into
    `samples // hop` steps, then a temporal convolution mixes neighbours.
    """

    def __init__(self, width: int = 64, hop: int = 320):
        super().__init__()
        self.hop = hop
        self.frame = nn.Conv1d(1, width, kernel_size=hop, stride=hop)
        self.mix = nn.Conv1d(width, width, kernel_size=3, padding=1)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        # [B, L] -> [B, T_a, D]
        h = F.gelu(self.frame(audio.unsqueeze(1)))
        h = h + F.gelu(self.mix(h))
        return h.transpose(1, 2)


class EncoderSet(nn.Module):
    """Speech and emotion encoders whose features are fused by elementwise product.

    Args:
        speech (nn.Module): `[B, L] -> [B, T_a, D_s]` encoder.
        emotion (nn.Module): `[B, L] -> [B, T_a, D_e']` encoder.
        context_width (int): Shared width `D_c` both outputs are projected to.
        emotion_width (int): Width `D_e` of the pooled emotion embedding.
        num_emotions (int): Size of the emotion label set for the auxiliary head.
        speech_width (Optional[int]): Output width of `speech`; no projection if equal to `context_width`.
        emotion_features (Optional[int]): Output width of `emotion`; no projection if equal to `context_width`.
    """

    def __init__(
        self,
        speech: nn.Module,
        emotion: nn.Module,
        context_width: int = 64,
        emotion_width: int = 64,
        num_emotions: int = 8,
        speech_width: Optional[int] = None,
        emotion_features: Optional[int] = None,
    ):
        super().__init__()
        self.speech = speech
        self.emotion = emotion
        self.context_width = context_width
        self.emotion_width = emotion_width
        speech_width = speech_width or context_width
        emotion_features = emotion_features or context_width
        self.speech_proj = (
            nn.Identity()
            if speech_width == context_width
            else nn.Linear(speech_width, context_width)
        )
        self.emotion_proj = (
            nn.Identity()
            if emotion_features == context_width
            else nn.Linear(emotion_features, context_width)
        )
        self.pool_proj = (
            nn.Identity()
            if emotion_width == context_width
            else nn.Linear(context_width, emotion_width)
        )
        self.emotion_head = nn.Linear(emotion_width, num_emotions)

    def features(self, audio: torch.Tensor):
        """Returns the projected `(speech, emotion)` feature matrices."""
        return self.speech_proj(self.speech(audio)), self.emotion_proj(self.emotion(audio))

    def forward(self, audio: torch.Tensor) -> ContextFeature:
        speech, emotion = self.features(audio)
        c = fuse_context(speech, emotion)
        w_e = self.pool_proj(emotion.mean(dim=1))
        return ContextFeature(c, w_e)

    def classify_emotion(self, w_e: torch.Tensor) -> torch.Tensor:
        """Emotion logits from the pooled embedding."""
        return self.emotion_head(w_e)


def fuse_context(speech: torch.Tensor, emotion: torch.Tensor) -> torch.Tensor:
    """Elementwise product of emotion and speech features.

    Raises:
        ContractError: If the two feature matrices differ in shape.
    """
    if speech.shape != emotion.shape:
        raise ContractError(
            f"speech features {tuple(speech.shape)} and emotion features "
            f"{tuple(emotion.shape)} must share the same T_a x D_c shape"
        )
    return emotion * speech


_ENCODER_SETS: Dict[str, Callable[..., EncoderSet]] = {}


def register_encoder_set(name: str) -> Callable:
    """Registers an `EncoderSet` factory under `name` (selected by config key `encoder_set`)."""

    def inner(factory: Callable[..., EncoderSet]) -> Callable[..., EncoderSet]:
        _ENCODER_SETS[name] = factory
        return factory

    return inner


def available_encoder_sets() -> List[str]:
    return sorted(_ENCODER_SETS)


def build_encoder_set(name: str = "conv", **kwargs) -> EncoderSet:
    """Builds the registered encoder set `name`.

    Raises:
        ConfigError: If no encoder set is registered under `name`.
    """
    if name not in _ENCODER_SETS:
        raise ConfigError(
            f"Unknown encoder set: {name}. Only supports one of: {available_encoder_sets()}"
        )
    return _ENCODER_SETS[name](**kwargs)


@register_encoder_set("conv")
def conv_encoder_set(
    context_width: int = 64,
    emotion_width: int = 64,
    hop: int = 320,
    num_emotions: int = 8,
) -> EncoderSet:
    return EncoderSet(
        ConvAudioEncoder(context_width, hop),
        ConvAudioEncoder(context_width, hop),
        context_width=context_width,
        emotion_width=emotion_width,
        num_emotions=num_emotions,
    )


def context_encode(
    clip: Union[AudioClip, torch.Tensor], encoders: EncoderSet
) -> ContextFeature:
    """Encodes a clip (or a `[B, L]` batch) into its fused context feature.

    Raises:
        ContractError: If the encoders emit mismatched shapes after projection.
    """
    audio = clip_tensor(clip) if isinstance(clip, AudioClip) else clip
    param = next(encoders.parameters(), None)
    if param is not None:
        audio = audio.to(device=param.device, dtype=param.dtype)
    return encoders(audio)
