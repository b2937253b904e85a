"""
Audio to landmark-sequence generation: the Global and Context domain
extractors and the KFusion reconstruction head.
"""
import logging
import math
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import torch
import torch.nn.functional as F
from torch import nn

from talkfast.audio import AudioClip
from talkfast.audio import ContextFeature
from talkfast.audio import EncoderSet
from talkfast.audio import build_encoder_set
from talkfast.audio import clip_tensor
from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError
from talkfast.kan import build_head

logger = logging.getLogger(__name__)

NUM_POINTS = 68
MOUTH_INDICES = tuple(range(48, 68))


class LandmarkSequence(NamedTuple):
    """Normalized landmark trajectories.

    Args:
        points (torch.Tensor): `[F, P, 2]` (or `[B, F, P, 2]`) coordinates in [0, 1], `(x, y)` order.
        mouth_indices (Tuple[int, ...]): Mouth subset `L_m` of the P points.
    """

    points: torch.Tensor
    mouth_indices: Tuple[int, ...] = MOUTH_INDICES

    @property
    def mouth(self) -> torch.Tensor:
        return self.points[..., list(self.mouth_indices), :]


class DomainFeatures(NamedTuple):
    """Extractor outputs, all `[B, F, width]`."""

    g_f: torch.Tensor
    g_m: torch.Tensor
    c_f: torch.Tensor
    c_m: torch.Tensor
    c_ef: torch.Tensor


def validate_mouth_indices(mouth_indices: Sequence[int], num_points: int) -> Tuple[int, ...]:
    indices = tuple(int(i) for i in mouth_indices)
    if len(set(indices)) != len(indices):
        raise ValidationError(f"mouth indices must be unique, got {indices}")
    if any(i < 0 or i >= num_points for i in indices):
        raise ValidationError(f"mouth indices must lie in [0, {num_points}), got {indices}")
    return indices


def validate_sequence(sequence: LandmarkSequence) -> LandmarkSequence:
    """Checks coordinate range and the mouth index set.

    Raises:
        ValidationError: On coordinates outside [0, 1] or bad mouth indices.
    """
    points = sequence.points
    if points.shape[-1] != 2:
        raise ValidationError(f"landmarks must be (..., P, 2), got {tuple(points.shape)}")
    if not torch.isfinite(points).all() or points.min() < 0 or points.max() > 1:
        raise ValidationError("landmark coordinates must be finite and lie in [0, 1]")
    validate_mouth_indices(sequence.mouth_indices, points.shape[-2])
    return sequence


def template_landmarks(num_points: int = NUM_POINTS, mouth_open: float = 0.0) -> torch.Tensor:
    """A neutral frontal face in the 68-point layout, `[P, 2]` in [0, 1].

    `mouth_open` in [0, 1] widens the vertical extent of both lip contours.
    Layouts other than 68 points are spread on a circle.
    """
    if num_points != NUM_POINTS:
        angle = torch.linspace(0, 2 * math.pi, num_points + 1)[:-1]
        return torch.stack([0.5 + 0.3 * torch.cos(angle), 0.5 + 0.3 * torch.sin(angle)], dim=-1)

    def arc(n, cx, cy, rx, ry, start, stop):
        t = torch.linspace(start, stop, n)
        return torch.stack([cx + rx * torch.cos(t), cy + ry * torch.sin(t)], dim=-1)

    def line(n, x0, y0, x1, y1):
        t = torch.linspace(0, 1, n)
        return torch.stack([x0 + (x1 - x0) * t, y0 + (y1 - y0) * t], dim=-1)

    lip = 0.02 + 0.06 * float(mouth_open)
    # y grows downwards, so the jaw is the arc through angle pi/2.
    parts = [
        arc(17, 0.5, 0.45, 0.33, 0.40, math.pi, 0.0),
        arc(5, 0.35, 0.36, 0.09, 0.03, math.pi, 2 * math.pi),
        arc(5, 0.65, 0.36, 0.09, 0.03, math.pi, 2 * math.pi),
        line(4, 0.5, 0.40, 0.5, 0.56),
        line(5, 0.45, 0.60, 0.55, 0.60),
        arc(6, 0.35, 0.43, 0.05, 0.02, math.pi, 3 * math.pi - math.pi / 3),
        arc(6, 0.65, 0.43, 0.05, 0.02, math.pi, 3 * math.pi - math.pi / 3),
        arc(12, 0.5, 0.72, 0.12, lip + 0.02, math.pi, 3 * math.pi - math.pi / 6),
        arc(8, 0.5, 0.72, 0.08, lip, math.pi, 3 * math.pi - math.pi / 4),
    ]
    return torch.cat(parts, dim=0).clamp(0.0, 1.0)


def resample_time(x: torch.Tensor, length: int) -> torch.Tensor:
    """Linear interpolation of `[B, T, D]` features to `[B, length, D]` (end points kept)."""
    if x.shape[1] == length:
        return x
    y = F.interpolate(x.transpose(1, 2), size=length, mode="linear", align_corners=True)
    return y.transpose(1, 2)


def tile_over_time(points: torch.Tensor, length: int) -> torch.Tensor:
    """`[B, K, 2]` landmarks to `[B, length, 2K]` by repeating over time."""
    flat = points.reshape(points.shape[0], 1, -1)
    return flat.expand(-1, length, -1)


def encoder_stack(width: int, heads: int, layers: int, dropout: float) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        width, heads, dim_feedforward=2 * width, dropout=dropout, batch_first=True
    )
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class FuseConv(nn.Module):
    """Concatenates time-tiled landmarks to features, then a 1-D convolution."""

    def __init__(self, feature_width: int, num_points: int, width: int):
        super().__init__()
        self.conv = nn.Conv1d(feature_width + 2 * num_points, width, kernel_size=3, padding=1)

    def forward(self, features: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        tiled = tile_over_time(points, features.shape[1]).to(features.dtype)
        x = torch.cat([features, tiled], dim=-1).transpose(1, 2)
        return F.gelu(self.conv(x)).transpose(1, 2)


class AudioDecoder(nn.Module):
    """Transformer decoder over raw-audio patches attending to learned queries."""

    def __init__(
        self,
        width: int,
        hop: int,
        tokens: int,
        queries: int,
        heads: int,
        layers: int,
        dropout: float,
    ):
        super().__init__()
        self.patch = nn.Conv1d(1, width, kernel_size=hop, stride=hop)
        self.position = nn.Parameter(torch.zeros(1, tokens, width))
        self.queries = nn.Parameter(torch.randn(1, queries, width) * 0.02)
        layer = nn.TransformerDecoderLayer(
            width, heads, dim_feedforward=2 * width, dropout=dropout, batch_first=True
        )
        self.decoder = nn.TransformerDecoder(layer, layers)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        tokens = self.patch(audio.unsqueeze(1)).transpose(1, 2)
        if tokens.shape[1] != self.position.shape[1]:
            raise ContractError(
                f"audio yields {tokens.shape[1]} patches, decoder expects {self.position.shape[1]}"
            )
        memory = self.queries.expand(audio.shape[0], -1, -1)
        return self.decoder(tokens + self.position, memory)


class GlobalDomain(nn.Module):
    """`g_f = E_f(Conv(D(x), v))`, `g_m = E_m(Conv(D(x), v_m))` with one shared decoder."""

    def __init__(
        self,
        num_points: int,
        mouth_points: int,
        frames: int,
        decoder: AudioDecoder,
        decoder_width: int,
        face_width: int,
        mouth_width: int,
        heads: int,
        layers: int,
        dropout: float,
    ):
        super().__init__()
        self.frames = frames
        self.decoder = decoder
        self.fuse_f = FuseConv(decoder_width, num_points, face_width)
        self.fuse_m = FuseConv(decoder_width, mouth_points, mouth_width)
        self.encoder_f = encoder_stack(face_width, heads, layers, dropout)
        self.encoder_m = encoder_stack(mouth_width, heads, layers, dropout)

    def forward(self, audio: torch.Tensor, v: torch.Tensor, v_m: torch.Tensor):
        decoded = resample_time(self.decoder(audio), self.frames)
        g_f = self.encoder_f(self.fuse_f(decoded, v))
        g_m = self.encoder_m(self.fuse_m(decoded, v_m))
        return g_f, g_m


class ContextDomain(nn.Module):
    """Two recurrent branches (`c_f`, `c_m`) and an emotion-face branch (`c_ef`)."""

    def __init__(
        self,
        context_width: int,
        num_points: int,
        frames: int,
        face_width: int,
        mouth_width: int,
        hidden: int,
        heads: int,
        layers: int,
        dropout: float,
    ):
        super().__init__()
        self.frames = frames
        self.lstm_f = nn.LSTM(context_width, hidden, batch_first=True)
        self.lstm_m = nn.LSTM(context_width, hidden, batch_first=True)
        self.proj_f = nn.Linear(hidden, face_width)
        self.proj_m = nn.Linear(hidden, mouth_width)
        self.fuse_ef = FuseConv(context_width, num_points, face_width)
        self.encoder_ef = encoder_stack(face_width, heads, layers, dropout)

    def forward(self, c: torch.Tensor, v: torch.Tensor):
        c_f = self.proj_f(self.lstm_f(c)[0])
        c_m = self.proj_m(self.lstm_m(c)[0])
        c_ef = self.encoder_ef(self.fuse_ef(c, v))
        return (
            resample_time(c_f, self.frames),
            resample_time(c_m, self.frames),
            resample_time(c_ef, self.frames),
        )


class ConvBlock(nn.Module):
    """`Conv(k=1) -> Conv(k=3) -> Conv(k=1)` over time on `[B, T, C]` features."""

    def __init__(self, in_width: int, hidden: int, out_width: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_width, hidden, kernel_size=1)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel_size=3, padding=1)
        self.conv3 = nn.Conv1d(hidden, out_width, kernel_size=1)

    def block(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(x.transpose(1, 2)))
        h = F.relu(self.conv2(h))
        return self.conv3(h).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)

    @torch.no_grad()
    def identity_(self) -> "ConvBlock":
        """Sets the block to the identity on non-negative inputs (square widths only)."""
        for conv in (self.conv1, self.conv2, self.conv3):
            if conv.in_channels != conv.out_channels:
                raise ValidationError("identity initialisation needs equal widths")
            conv.weight.zero_()
            conv.bias.zero_()
            centre = conv.kernel_size[0] // 2
            conv.weight[:, :, centre].copy_(torch.eye(conv.in_channels))
        return self


class RConvBlock(ConvBlock):
    """`ConvBlock` with a residual path (1x1 projection when widths differ)."""

    def __init__(self, in_width: int, hidden: int, out_width: int):
        super().__init__(in_width, hidden, out_width)
        self.shortcut = (
            nn.Identity() if in_width == out_width else nn.Linear(in_width, out_width, bias=False)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x) + self.shortcut(x)


class KFusion(nn.Module):
    """Fuses domain features into landmarks.

    `x_m = c_m ⊕ g_m`, `x_f = c_f ⊕ c_ef ⊕ g_f`, `x'_f = RConv(x_f) * Conv(x_f)`,
    then `Conv(x_m)` overwrites the mouth points of `x'_f` and the head
    predicts `P x 2` coordinates squashed into [0, 1] by a sigmoid.
    Each of the P points owns `point_width` channels of `x'_f`.
    """

    def __init__(
        self,
        face_in: int,
        mouth_in: int,
        num_points: int = NUM_POINTS,
        mouth_indices: Sequence[int] = MOUTH_INDICES,
        point_width: int = 4,
        fusion_width: int = 128,
        head: str = "kan",
        head_hidden: int = 64,
        grid_size: int = 8,
        use_kfusion: bool = True,
    ):
        super().__init__()
        self.face_in = face_in
        self.mouth_in = mouth_in
        self.num_points = num_points
        self.mouth_indices = validate_mouth_indices(mouth_indices, num_points)
        self.point_width = point_width
        self.use_kfusion = use_kfusion
        self.register_buffer(
            "mouth_index", torch.tensor(self.mouth_indices, dtype=torch.long), persistent=False
        )
        face_out = num_points * point_width
        if use_kfusion:
            self.conv_face = ConvBlock(face_in, fusion_width, face_out)
            self.rconv_face = RConvBlock(face_in, fusion_width, face_out)
            self.conv_mouth = ConvBlock(mouth_in, fusion_width, len(self.mouth_indices) * point_width)
        else:
            self.project = nn.Linear(face_in + mouth_in, face_out)
        self.head = build_head(head, face_out, num_points * 2, head_hidden, grid_size)

    def fuse(self, x_f: torch.Tensor, x_m: torch.Tensor, write_mouth: bool = True) -> torch.Tensor:
        """Returns `x'_f` as `[B, F, P, point_width]`."""
        batch, frames = x_f.shape[:2]
        if not self.use_kfusion:
            fused = self.project(torch.cat([x_f, x_m], dim=-1))
            return fused.view(batch, frames, self.num_points, self.point_width)
        fused = self.rconv_face(x_f) * self.conv_face(x_f)
        fused = fused.view(batch, frames, self.num_points, self.point_width)
        if write_mouth:
            mouth = self.conv_mouth(x_m).view(batch, frames, len(self.mouth_indices), self.point_width)
            fused = fused.index_copy(2, self.mouth_index, mouth)
        return fused

    def forward(self, d: DomainFeatures) -> torch.Tensor:
        x_m = torch.cat([d.c_m, d.g_m], dim=-1)
        x_f = torch.cat([d.c_f, d.c_ef, d.g_f], dim=-1)
        if x_f.shape[-1] != self.face_in or x_m.shape[-1] != self.mouth_in:
            raise ContractError(
                f"KFusion expects face/mouth widths {self.face_in}/{self.mouth_in}, "
                f"got {x_f.shape[-1]}/{x_m.shape[-1]}"
            )
        if x_f.shape[:2] != x_m.shape[:2]:
            raise ContractError("face and mouth features disagree on batch or frame count")
        fused = self.fuse(x_f, x_m)
        batch, frames = fused.shape[:2]
        out = self.head(fused.reshape(batch, frames, -1))
        return torch.sigmoid(out).view(batch, frames, self.num_points, 2)


class LandmarkGenerator(nn.Module):
    """Complete audio to landmark module.

    Args:
        encoders (EncoderSet): Context domain encoders.
        clip_samples (int): Samples per clip (16000).
        frames (int): Output frames per clip (30).
        num_points (int): P.
        mouth_indices (Sequence[int]): L_m.
        hop (int): Raw-audio patch size of the global domain decoder.
        decoder_width, face_width, mouth_width, recurrent_hidden, heads, layers,
        dropout, point_width, fusion_width, head, head_hidden, grid_size: widths and head choice.
        use_global, use_context, use_kfusion (bool): Ablation toggles. A disabled
            domain contributes zeros.
    """

    def __init__(
        self,
        encoders: EncoderSet,
        clip_samples: int = 16000,
        frames: int = 30,
        num_points: int = NUM_POINTS,
        mouth_indices: Sequence[int] = MOUTH_INDICES,
        hop: int = 320,
        decoder_width: int = 64,
        face_width: int = 128,
        mouth_width: int = 64,
        recurrent_hidden: int = 128,
        heads: int = 4,
        layers: int = 2,
        dropout: float = 0.0,
        point_width: int = 4,
        fusion_width: int = 128,
        head: str = "kan",
        head_hidden: int = 64,
        grid_size: int = 8,
        use_global: bool = True,
        use_context: bool = True,
        use_kfusion: bool = True,
    ):
        super().__init__()
        self.frames = frames
        self.num_points = num_points
        self.mouth_indices = validate_mouth_indices(mouth_indices, num_points)
        self.face_width = face_width
        self.mouth_width = mouth_width
        self.use_global = use_global
        self.use_context = use_context
        self.encoders = encoders
        decoder = AudioDecoder(
            decoder_width, hop, clip_samples // hop, frames, heads, layers, dropout
        )
        self.global_domain = GlobalDomain(
            num_points,
            len(self.mouth_indices),
            frames,
            decoder,
            decoder_width,
            face_width,
            mouth_width,
            heads,
            layers,
            dropout,
        )
        self.context_domain = ContextDomain(
            encoders.context_width,
            num_points,
            frames,
            face_width,
            mouth_width,
            recurrent_hidden,
            heads,
            layers,
            dropout,
        )
        self.kfusion = KFusion(
            3 * face_width,
            2 * mouth_width,
            num_points,
            self.mouth_indices,
            point_width,
            fusion_width,
            head,
            head_hidden,
            grid_size,
            use_kfusion,
        )

    @classmethod
    def from_config(cls, config) -> "LandmarkGenerator":
        """Builds the generator and its encoder set from a `RunConfig`."""
        audio, lm = config.audio, config.landmarks
        encoders = build_encoder_set(
            audio.encoder_set,
            context_width=audio.context_width,
            emotion_width=audio.emotion_width,
            hop=audio.hop,
            num_emotions=audio.num_emotions,
        )
        return cls(
            encoders,
            clip_samples=int(round(audio.clip_seconds * audio.sample_rate)),
            frames=config.data.frames,
            num_points=lm.num_points,
            mouth_indices=lm.mouth_indices,
            hop=audio.hop,
            decoder_width=lm.decoder_width,
            face_width=lm.face_width,
            mouth_width=lm.mouth_width,
            recurrent_hidden=lm.recurrent_hidden,
            heads=lm.heads,
            layers=lm.layers,
            dropout=lm.dropout,
            point_width=lm.point_width,
            fusion_width=lm.fusion_width,
            head=lm.head,
            head_hidden=lm.head_hidden,
            grid_size=lm.grid_size,
            use_global=lm.use_global,
            use_context=lm.use_context,
            use_kfusion=lm.use_kfusion,
        )

    def mouth_of(self, v: torch.Tensor) -> torch.Tensor:
        return v[:, list(self.mouth_indices), :]

    def extract(
        self,
        audio: torch.Tensor,
        identity: torch.Tensor,
        context: Optional[ContextFeature] = None,
    ) -> DomainFeatures:
        """Runs both domains for `[B, L]` audio and `[B, P, 2]` identity landmarks."""
        batch = audio.shape[0]
        zeros_f = audio.new_zeros(batch, self.frames, self.face_width)
        zeros_m = audio.new_zeros(batch, self.frames, self.mouth_width)
        if self.use_global:
            g_f, g_m = self.global_domain(audio, identity, self.mouth_of(identity))
        else:
            g_f, g_m = zeros_f, zeros_m
        if self.use_context:
            if context is None:
                context = self.encoders(audio)
            c_f, c_m, c_ef = self.context_domain(context.c, identity)
        else:
            c_f, c_m, c_ef = zeros_f, zeros_m, zeros_f
        return DomainFeatures(g_f, g_m, c_f, c_m, c_ef)

    def forward(
        self,
        audio: torch.Tensor,
        identity: torch.Tensor,
        context: Optional[ContextFeature] = None,
    ) -> torch.Tensor:
        """`[B, L]` audio, `[B, P, 2]` identity landmarks -> `[B, F, P, 2]` in [0, 1]."""
        return self.kfusion(self.extract(audio, identity, context))


def _batched(points: torch.Tensor) -> torch.Tensor:
    return points.unsqueeze(0) if points.dim() == 2 else points


def _audio_batch(clip: Union[AudioClip, torch.Tensor], like: nn.Module) -> torch.Tensor:
    if isinstance(clip, AudioClip):
        audio = clip_tensor(clip)
    else:
        audio = clip.unsqueeze(0) if clip.dim() == 1 else clip
    param = next(like.parameters())
    return audio.to(device=param.device, dtype=param.dtype)


def global_domain(
    generator: LandmarkGenerator,
    clip: Union[AudioClip, torch.Tensor],
    v: torch.Tensor,
    v_m: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Global domain features `(g_f, g_m)`, each `[B, F, width]`.

    Raises:
        ValidationError: If `v_m` is not `v` restricted to the mouth indices.
    """
    v, v_m = _batched(v), _batched(v_m)
    if v_m.shape != generator.mouth_of(v).shape or not torch.equal(generator.mouth_of(v), v_m):
        raise ValidationError("v_m must equal the identity landmarks restricted to the mouth indices")
    audio = _audio_batch(clip, generator)
    return generator.global_domain(audio, v.to(audio), v_m.to(audio))


def context_domain(
    generator: LandmarkGenerator, feat: ContextFeature, v: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Context domain features `(c_f, c_m, c_ef)`, each `[B, F, width]`."""
    c = feat.c if feat.c.dim() == 3 else feat.c.unsqueeze(0)
    return generator.context_domain(c, _batched(v).to(c))


def kfusion(generator: LandmarkGenerator, d: DomainFeatures) -> LandmarkSequence:
    """Reconstructs landmarks from domain features."""
    return LandmarkSequence(generator.kfusion(d), generator.mouth_indices)


def generate_landmarks(
    generator: LandmarkGenerator,
    clip: Union[AudioClip, torch.Tensor],
    identity_landmarks: torch.Tensor,
    encoders: Optional[EncoderSet] = None,
    context: Optional[ContextFeature] = None,
) -> LandmarkSequence:
    """Predicts the landmark sequence of one clip (`[F, P, 2]`) or a batch (`[B, F, P, 2]`).

    Args:
        generator (LandmarkGenerator): Trained generator.
        clip (Union[AudioClip, torch.Tensor]): One clip or `[B, L]` samples.
        identity_landmarks (torch.Tensor): `[P, 2]` or `[B, P, 2]` identity frame landmarks.
        encoders (Optional[EncoderSet]): Context encoders; defaults to the generator's own.
        context (Optional[ContextFeature]): Precomputed encoder output for `clip`; skips the encoders.
    """
    single = isinstance(clip, AudioClip) or clip.dim() == 1
    validate_sequence(LandmarkSequence(identity_landmarks, generator.mouth_indices))
    audio = _audio_batch(clip, generator)
    identity = _batched(identity_landmarks).to(audio)
    if identity.shape[0] == 1 and audio.shape[0] > 1:
        identity = identity.expand(audio.shape[0], -1, -1)
    if context is None and generator.use_context:
        context = (encoders or generator.encoders)(audio)
    points = generator(audio, identity, context)
    return LandmarkSequence(points[0] if single else points, generator.mouth_indices)
