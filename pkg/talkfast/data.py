"""
Dataset preparation: the procedural synthetic face generator, ingestion of
raw samples into fixed-length clips, the line-delimited manifest with its
hash-based split, and the torch dataset reading ingested clips.

Raw layout, one directory per sample::

    <raw_root>/<sample_id>/frames/00000.png ...   (or video.mp4, decoded with ffmpeg)
    <raw_root>/<sample_id>/audio.wav               (or taken from video.mp4)
    <raw_root>/<sample_id>/landmarks.npy           [N, P, 2] in [0, 1]
    <raw_root>/<sample_id>/meta.json               {"emotion": 0, "identity_frame": 0, "fps": 30}
"""
import hashlib
import json
import logging
import math
import pathlib
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import torch
from omegaconf import DictConfig
from PIL import Image
from PIL import ImageDraw
from torch.utils.data import DataLoader
from torch.utils.data import Dataset

from talkfast.audio import AudioWave
from talkfast.audio import load_audio
from talkfast.audio import save_audio
from talkfast.exceptions import ValidationError
from talkfast.landmarks import template_landmarks
from talkfast.metrics import load_frames

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
SPLITS = ("train", "val", "test")

PathLike = Union[str, pathlib.Path]


class SyntheticSample(NamedTuple):
    """A procedurally rendered talking face.

    Args:
        frames (np.ndarray): `[N, H, W, 3]` uint8 frames.
        audio (AudioWave): Sine-modulated audio driving the mouth.
        landmarks (np.ndarray): `[N, P, 2]` float32 landmarks in [0, 1].
        emotion (int): Emotion label.
    """

    frames: np.ndarray
    audio: AudioWave
    landmarks: np.ndarray
    emotion: int


def _place(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(center + scale * (points - 0.5), 0.0, 1.0)


def render_face(
    points: np.ndarray,
    size: int,
    background: Sequence[int],
    skin: Sequence[int],
    face_box: Sequence[float],
) -> np.ndarray:
    """Draws a face ellipse, two eye dots and a mouth ellipse spanning the outer lip points."""
    image = Image.new("RGB", (size, size), tuple(background))
    draw = ImageDraw.Draw(image)
    px = points * (size - 1)
    draw.ellipse([c * (size - 1) for c in face_box], fill=tuple(skin))
    radius = max(1.0, 0.03 * size)
    for eye in (px[36:42], px[42:48]):
        cx, cy = eye.mean(axis=0)
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=(20, 20, 20))
    lips = px[48:60]
    x0, y0 = lips.min(axis=0)
    x1, y1 = lips.max(axis=0)
    draw.ellipse([x0, y0, x1, max(y1, y0 + 1.0)], fill=(120, 20, 30))
    return np.asarray(image, dtype=np.uint8)


def synthesize_sample(
    seed: int,
    seconds: float = 2.0,
    image_size: int = 128,
    fps: int = 30,
    sample_rate: int = 16000,
    num_emotions: int = 8,
) -> SyntheticSample:
    """Renders one synthetic sample.

    The mouth opening follows a slow sine envelope that also modulates the
    amplitude of a tone, so audio and lip motion are correlated. Face
    position, scale, colours and the tone frequencies vary per seed.
    """
    rng = np.random.default_rng(seed)
    center = 0.5 + rng.uniform(-0.03, 0.03, size=2)
    scale = float(rng.uniform(0.92, 1.05))
    background = rng.integers(0, 90, size=3)
    skin = rng.integers(150, 240, size=3)
    carrier = float(rng.uniform(180.0, 320.0))
    rate = float(rng.uniform(1.5, 3.0))
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    emotion = int(rng.integers(num_emotions))

    def envelope(t: np.ndarray) -> np.ndarray:
        return 0.5 + 0.5 * np.sin(2.0 * math.pi * rate * t + phase)

    t_audio = np.arange(int(round(seconds * sample_rate))) / sample_rate
    samples = 0.5 * envelope(t_audio) * np.sin(2.0 * math.pi * carrier * t_audio)

    n_frames = int(round(seconds * fps))
    openings = envelope(np.arange(n_frames) / fps)
    cx, cy = center
    face_box = [cx - 0.36 * scale, cy - 0.44 * scale, cx + 0.36 * scale, cy + 0.44 * scale]
    landmarks = np.stack(
        [
            _place(template_landmarks(mouth_open=float(m)).numpy().astype(np.float64), center, scale)
            for m in openings
        ]
    ).astype(np.float32)
    frames = np.stack(
        [render_face(p, image_size, background, skin, face_box) for p in landmarks]
    )
    return SyntheticSample(frames, AudioWave(samples, sample_rate), landmarks, emotion)


def write_synthetic_dataset(
    root: PathLike,
    count: int = 8,
    seed: int = 0,
    seconds: float = 2.0,
    image_size: int = 128,
    fps: int = 30,
    num_emotions: int = 8,
) -> List[str]:
    """Writes `count` synthetic samples in the raw layout `ingest` reads.

    Returns:
        List[str]: The sample ids, `synth_000`, `synth_001`, ...
    """
    root = pathlib.Path(root)
    ids = []
    for index in range(count):
        sample_id = f"synth_{index:03d}"
        sample = synthesize_sample(
            seed * 100003 + index, seconds, image_size, fps, num_emotions=num_emotions
        )
        sample_dir = root / sample_id
        frames_dir = sample_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(sample.frames):
            Image.fromarray(frame).save(frames_dir / f"{i:05d}.png")
        save_audio(sample_dir / "audio.wav", sample.audio)
        np.save(sample_dir / "landmarks.npy", sample.landmarks)
        meta = {"emotion": sample.emotion, "identity_frame": 0, "fps": fps}
        (sample_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
        ids.append(sample_id)
    logger.info("wrote %d synthetic samples to %s", count, root)
    return ids


def ffmpeg_available() -> bool:
    return shutil.which("ffmpeg") is not None


def _ffmpeg(args: List[str]) -> bytes:
    if not ffmpeg_available():
        raise OSError("ffmpeg is not installed, cannot decode video")
    try:
        result = subprocess.run(
            ["ffmpeg", "-v", "error", "-nostdin", *args], capture_output=True, check=True
        )
    except subprocess.CalledProcessError as exc:
        raise OSError(f"ffmpeg failed: {exc.stderr.decode(errors='replace').strip()}") from exc
    return result.stdout


def decode_video(path: PathLike, fps: int = 30, size: int = 128) -> np.ndarray:
    """Decodes a video into `[N, size, size, 3]` uint8 frames at `fps` with ffmpeg.

    Raises:
        OSError: If ffmpeg is missing or fails.
    """
    raw = _ffmpeg(
        ["-i", str(path), "-r", str(fps), "-vf", f"scale={size}:{size}",
         "-f", "rawvideo", "-pix_fmt", "rgb24", "-"]
    )
    frame_bytes = size * size * 3
    if not raw or len(raw) % frame_bytes:
        raise OSError(f"ffmpeg returned {len(raw)} bytes for {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, size, size, 3)


def extract_audio(path: PathLike, sample_rate: int = 16000) -> AudioWave:
    """Extracts the mono audio track of a video with ffmpeg."""
    raw = _ffmpeg(["-i", str(path), "-vn", "-ac", "1", "-ar", str(sample_rate), "-f", "f32le", "-"])
    samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if samples.size == 0:
        raise ValidationError(f"{path} contains no audio")
    return AudioWave(samples, sample_rate)


def mux_video(frames_dir: PathLike, audio_path: PathLike, out_path: PathLike, fps: int = 30) -> pathlib.Path:
    """Encodes a numbered PNG directory and an audio file into an MP4 with ffmpeg."""
    pattern = pathlib.Path(frames_dir) / "%06d.png"
    _ffmpeg(
        ["-y", "-framerate", str(fps), "-i", str(pattern), "-i", str(audio_path),
         "-c:v", "libx264", "-pix_fmt", "yuv420p", "-c:a", "aac", "-shortest", str(out_path)]
    )
    return pathlib.Path(out_path)


@dataclass
class ManifestEntry:
    """One ingested clip. Paths are relative to the manifest directory."""

    sample_id: str
    clip: int
    frames_dir: str
    audio_path: str
    landmarks_path: str
    identity_image: str
    identity_landmarks: str
    identity_frame: int
    emotion: int
    split: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DatasetManifest:
    """Ingested clips with their split assignment and the samples that were skipped."""

    entries: List[ManifestEntry]
    header: Dict[str, Any] = field(default_factory=dict)
    skipped: List[Dict[str, str]] = field(default_factory=list)

    def split(self, name: Optional[str]) -> List[ManifestEntry]:
        if name is None:
            return list(self.entries)
        if name not in SPLITS:
            raise ValidationError(f"Unknown split: {name}. Only supports one of: {list(SPLITS)}")
        return [e for e in self.entries if e.split == name]

    def sample_counts(self) -> Dict[str, int]:
        """Distinct samples per split."""
        return {
            name: len({e.sample_id for e in self.entries if e.split == name}) for name in SPLITS
        }

    def save(self, path: PathLike) -> pathlib.Path:
        """Writes the header line followed by one JSON line per entry."""
        path = pathlib.Path(path)
        header = dict(self.header, version=MANIFEST_VERSION, skipped=self.skipped)
        lines = [json.dumps({"header": header}, sort_keys=True)]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        """Reads a manifest written by `save`.

        Raises:
            ValidationError: If the header is missing or the version is unsupported.
        """
        lines = pathlib.Path(path).read_text().splitlines()
        if not lines or "header" not in json.loads(lines[0]):
            raise ValidationError(f"{path} has no manifest header")
        header = json.loads(lines[0])["header"]
        if header.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"unsupported manifest version {header.get('version')!r}")
        skipped = header.pop("skipped", [])
        header.pop("version")
        entries = [ManifestEntry(**json.loads(line)) for line in lines[1:] if line.strip()]
        return cls(entries, header, skipped)


def split_key(sample_id: str, seed: int) -> str:
    return hashlib.sha256(f"{seed}:{sample_id}".encode()).hexdigest()


def assign_splits(
    sample_ids: Sequence[str],
    seed: int = 0,
    test_fraction: float = 0.1,
    val_fraction: float = 0.1,
) -> Dict[str, str]:
    """Assigns samples to train/val/test by their seeded hash rank.

    `round(test_fraction * N)` samples go to test, then
    `round(val_fraction * (N - n_test))` of the rest to val (Python rounding,
    halves to even). 100 samples split 81/9/10.
    """
    ranked = sorted(set(sample_ids), key=lambda s: (split_key(s, seed), s))
    n_test = int(round(test_fraction * len(ranked)))
    n_val = int(round(val_fraction * (len(ranked) - n_test)))
    splits = {}
    for rank, sample_id in enumerate(ranked):
        if rank < n_test:
            splits[sample_id] = "test"
        elif rank < n_test + n_val:
            splits[sample_id] = "val"
        else:
            splits[sample_id] = "train"
    return splits


class _Ingested(NamedTuple):
    sample_id: str
    entries: List[ManifestEntry]
    reason: Optional[str] = None


def _retime(count: int, source_fps: float, target_fps: int) -> np.ndarray:
    """Source frame indices for `target_fps`, nearest frame."""
    if source_fps == target_fps:
        return np.arange(count)
    n_out = int(math.floor(count * target_fps / source_fps))
    return np.minimum(np.round(np.arange(n_out) * source_fps / target_fps).astype(int), count - 1)


def _resized(image: Image.Image, size: int) -> Image.Image:
    image = image.convert("RGB")
    if image.size != (size, size):
        image = image.resize((size, size), Image.BICUBIC)
    return image


def _write_clips(
    sample_id: str,
    frame_image: Callable[[int], Image.Image],
    frame_count: int,
    landmarks: np.ndarray,
    wave: AudioWave,
    identity_frame: int,
    emotion: int,
    target: pathlib.Path,
    out_root: pathlib.Path,
    config: DictConfig,
) -> List[ManifestEntry]:
    frames_per_clip = config.data.frames
    target.mkdir(parents=True, exist_ok=True)
    frame_image(identity_frame).save(target / "identity.png")
    np.save(target / "identity_landmarks.npy", landmarks[identity_frame])

    clip_samples = int(round(config.audio.clip_seconds * config.audio.sample_rate))
    samples = np.asarray(wave.samples)
    entries = []
    for clip in range(frame_count // frames_per_clip):
        clip_dir = target / f"clip_{clip:03d}"
        frames_dir = clip_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        first = clip * frames_per_clip
        for i in range(frames_per_clip):
            frame_image(first + i).save(frames_dir / f"{i:03d}.png")
        chunk = samples[clip * clip_samples : (clip + 1) * clip_samples]
        chunk = np.pad(chunk, (0, clip_samples - chunk.size))
        save_audio(clip_dir / "audio.wav", AudioWave(chunk, config.audio.sample_rate))
        np.save(clip_dir / "landmarks.npy", landmarks[first : first + frames_per_clip])
        rel = clip_dir.relative_to(out_root).as_posix()
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                clip=clip,
                frames_dir=f"{rel}/frames",
                audio_path=f"{rel}/audio.wav",
                landmarks_path=f"{rel}/landmarks.npy",
                identity_image=f"{sample_id}/identity.png",
                identity_landmarks=f"{sample_id}/identity_landmarks.npy",
                identity_frame=identity_frame,
                emotion=emotion,
                split="",
            )
        )
    return entries


def _ingest_sample(sample_dir: pathlib.Path, out_root: pathlib.Path, config: DictConfig) -> _Ingested:
    """Reads, validates and writes one raw sample. Nothing is left in `out_root` for a skipped sample."""
    sample_id = sample_dir.name
    data, audio_cfg = config.data, config.audio
    frames_per_clip, size = data.frames, data.image_size

    video = sample_dir / "video.mp4"
    frame_paths = sorted((sample_dir / "frames").glob("*.png"))
    try:
        meta_path = sample_dir / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        if not isinstance(meta, dict):
            return _Ingested(sample_id, [], "meta.json is not an object")
        fps = meta.get("fps", data.fps)
        identity_frame = int(meta.get("identity_frame", 0))
        emotion = int(meta.get("emotion", 0))

        if frame_paths:
            frames: Union[List[pathlib.Path], np.ndarray] = frame_paths
        elif video.exists():
            frames = decode_video(video, data.fps, size)
            fps = data.fps
        else:
            return _Ingested(sample_id, [], "no frames or video.mp4")

        landmarks_path = sample_dir / "landmarks.npy"
        if not landmarks_path.exists():
            return _Ingested(sample_id, [], "missing landmarks.npy")
        landmarks = np.load(landmarks_path).astype(np.float32)
        if landmarks.ndim != 3 or landmarks.shape[1:] != (config.landmarks.num_points, 2):
            return _Ingested(sample_id, [], f"landmarks have shape {landmarks.shape}")

        if (sample_dir / "audio.wav").exists():
            wave = load_audio(sample_dir / "audio.wav", audio_cfg.sample_rate)
        elif video.exists():
            wave = extract_audio(video, audio_cfg.sample_rate)
        else:
            return _Ingested(sample_id, [], "no audio.wav or video.mp4")
    except (OSError, ValueError, TypeError) as exc:
        return _Ingested(sample_id, [], f"cannot decode: {exc}")

    if isinstance(frames, list) and fps != data.fps:
        index = _retime(len(frames), fps, data.fps)
        frames = [frames[i] for i in index]
        landmarks = landmarks[_retime(len(landmarks), fps, data.fps)]
    if len(frames) != len(landmarks):
        return _Ingested(sample_id, [], f"{len(frames)} frames but {len(landmarks)} landmark frames")
    if len(frames) < frames_per_clip:
        return _Ingested(sample_id, [], f"only {len(frames)} frames, need {frames_per_clip}")
    if not 0 <= identity_frame < len(frames):
        return _Ingested(sample_id, [], f"identity frame {identity_frame} out of range")

    def frame_image(i: int) -> Image.Image:
        if isinstance(frames, list):
            with Image.open(frames[i]) as image:
                return _resized(image, size)
        return _resized(Image.fromarray(frames[i]), size)

    target = out_root / sample_id
    try:
        entries = _write_clips(
            sample_id, frame_image, len(frames), landmarks, wave, identity_frame, emotion,
            target, out_root, config,
        )
    except (OSError, ValueError) as exc:
        shutil.rmtree(target, ignore_errors=True)
        return _Ingested(sample_id, [], f"cannot decode: {exc}")
    return _Ingested(sample_id, entries)


def ingest(raw_root: PathLike, out_root: PathLike, config: DictConfig) -> DatasetManifest:
    """Converts raw samples into fixed-length clips and writes `manifest.jsonl`.

    Each sample is cut into `len // frames` clips of `data.frames` frames
    (a trailing partial clip is dropped) at `data.image_size` pixels, with
    the matching `audio.clip_seconds` of 16 kHz mono audio. Samples that
    cannot be decoded or are too short are skipped, logged and listed in the
    manifest header. Samples are processed by a thread pool; the manifest is
    ordered by sample id and clip so re-running gives identical bytes.
    """
    raw_root, out_root = pathlib.Path(raw_root), pathlib.Path(out_root)
    if not raw_root.is_dir():
        raise ValidationError(f"{raw_root} is not a directory")
    out_root.mkdir(parents=True, exist_ok=True)
    sample_dirs = sorted(p for p in raw_root.iterdir() if p.is_dir())

    with ThreadPoolExecutor(max_workers=max(1, config.data.ingest_workers)) as pool:
        results = list(pool.map(lambda d: _ingest_sample(d, out_root, config), sample_dirs))

    skipped = []
    for result in results:
        if result.reason is not None:
            logger.warning("skipping sample %s: %s", result.sample_id, result.reason)
            skipped.append({"sample_id": result.sample_id, "reason": result.reason})

    kept = [r for r in results if r.reason is None]
    splits = assign_splits(
        [r.sample_id for r in kept],
        config.data.split_seed,
        config.data.test_fraction,
        config.data.val_fraction,
    )
    entries = []
    for result in kept:
        for entry in result.entries:
            entry.split = splits[entry.sample_id]
            entries.append(entry)

    header = {
        "frames": config.data.frames,
        "fps": config.data.fps,
        "image_size": config.data.image_size,
        "sample_rate": config.audio.sample_rate,
        "num_points": config.landmarks.num_points,
        "split_seed": config.data.split_seed,
        "samples": len(sample_dirs),
    }
    manifest = DatasetManifest(entries, header, skipped)
    manifest.save(out_root / MANIFEST_NAME)
    logger.info(
        "ingested %d clips from %d of %d samples (%s), skipped %d",
        len(entries), len(kept), len(sample_dirs), manifest.sample_counts(), len(skipped),
    )
    return manifest


class ClipDataset(Dataset):
    """Ingested clips of one split as tensors.

    Items are dictionaries with `audio` `[L]`, `frames` `[F, H, W, 3]` in [0, 1],
    `landmarks` `[F, P, 2]`, `identity_image` `[H, W, 3]`,
    `identity_landmarks` `[P, 2]`, `emotion` and `sample_id`.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        root: PathLike,
        split: Optional[str] = "train",
        sample_rate: int = 16000,
    ):
        self.root = pathlib.Path(root)
        self.sample_rate = sample_rate
        self.entries = manifest.split(split)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        entry = self.entries[index]
        wave = load_audio(self.root / entry.audio_path, self.sample_rate)
        with Image.open(self.root / entry.identity_image) as image:
            identity = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
        return {
            "audio": torch.as_tensor(wave.samples, dtype=torch.float32),
            "frames": torch.as_tensor(load_frames(self.root / entry.frames_dir), dtype=torch.float32),
            "landmarks": torch.as_tensor(np.load(self.root / entry.landmarks_path), dtype=torch.float32),
            "identity_image": torch.as_tensor(identity),
            "identity_landmarks": torch.as_tensor(
                np.load(self.root / entry.identity_landmarks), dtype=torch.float32
            ),
            "emotion": torch.tensor(entry.emotion, dtype=torch.long),
            "sample_id": entry.sample_id,
        }


def make_loader(
    dataset: Dataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    num_workers: int = 0,
) -> DataLoader:
    """DataLoader whose shuffling order is fixed by `seed`."""
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        generator=torch.Generator().manual_seed(seed),
    )


def load_manifest(root: PathLike) -> DatasetManifest:
    """Loads `manifest.jsonl` from an ingested dataset directory (or the file itself)."""
    path = pathlib.Path(root)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return DatasetManifest.load(path)
