"""
Identity-conditioned 3D U-Net denoiser, the beta schedule and the
deterministic DDIM sampler.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import torch
import torch.nn.functional as F
from torch import nn

from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError
from talkfast.noise import NoiseField
from talkfast.noise import apply_guided_noise

logger = logging.getLogger(__name__)

TRAIN_STEPS = 1000
INFERENCE_STEPS = 8
IDENTITY_SHAPE = (32, 64)
BETA_SCHEDULES = ("linear", "cosine")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule of the forward process and the strided inference timesteps.

    Args:
        betas (torch.Tensor): `[T]` float64 variances, each in (0, 1).
        alpha_bars (torch.Tensor): `[T]` cumulative products of `1 - betas`.
        inference_steps (Tuple[int, ...]): Strictly decreasing timesteps visited by the sampler.
        beta_schedule (str): Name of the beta schedule.
    """

    betas: torch.Tensor
    alpha_bars: torch.Tensor
    inference_steps: Tuple[int, ...]
    beta_schedule: str = "linear"

    @property
    def train_steps(self) -> int:
        return int(self.betas.numel())

    def alpha_bar_at(self, t: Union[int, torch.Tensor], batch: Optional[int] = None) -> torch.Tensor:
        """Cumulative alpha for timestep(s) `t`; negative timesteps map to 1.

        A scalar `t` is broadcast to `batch` entries when `batch` is given.
        """
        t = torch.as_tensor(t, dtype=torch.long).cpu()
        if t.dim() == 0 and batch is not None:
            t = t.expand(batch)
        values = self.alpha_bars[t.clamp(min=0)]
        return torch.where(t < 0, torch.ones_like(values), values)

    def step_pairs(self) -> List[Tuple[int, int]]:
        """`(t, t_prev)` pairs of the reverse chain, ending at `t_prev = -1`."""
        steps = list(self.inference_steps)
        return list(zip(steps, steps[1:] + [-1]))

    def to_metadata(self) -> Dict[str, Any]:
        return {
            "train_steps": self.train_steps,
            "n_inference": len(self.inference_steps),
            "beta_schedule": self.beta_schedule,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def _cosine_betas(train_steps: int, offset: float = 0.008) -> torch.Tensor:
    steps = torch.arange(train_steps + 1, dtype=torch.float64) / train_steps
    f = torch.cos((steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    return (1.0 - f[1:] / f[:-1]).clamp(1e-8, 0.999)


def build_schedule(
    train_steps: int = TRAIN_STEPS,
    n_inference: int = INFERENCE_STEPS,
    beta_schedule: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> DiffusionSchedule:
    """Builds the beta table and the DDIM inference subset.

    Inference timesteps are `round(linspace(T - 1, 0, n_inference))`, so the
    chain always starts at `T - 1` and, for more than one step, ends at 0.

    Args:
        train_steps (int, optional): Forward process length `T`. Defaults to 1000.
        n_inference (int, optional): Sampler steps. Defaults to 8.
        beta_schedule (str, optional): `"linear"` or `"cosine"`. Defaults to `"linear"`.
        beta_start (float, optional): First linear beta. Defaults to 1e-4.
        beta_end (float, optional): Last linear beta. Defaults to 0.02.

    Raises:
        ValidationError: If `n_inference` is not in [1, T] or the schedule is unknown.
    """
    if train_steps < 1:
        raise ValidationError(f"train_steps must be positive, got {train_steps}")
    if not 1 <= n_inference <= train_steps:
        raise ValidationError(
            f"n_inference must lie in [1, {train_steps}], got {n_inference}"
        )
    if beta_schedule == "linear":
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValidationError(f"invalid beta range [{beta_start}, {beta_end}]")
        betas = torch.linspace(beta_start, beta_end, train_steps, dtype=torch.float64)
    elif beta_schedule == "cosine":
        betas = _cosine_betas(train_steps)
    else:
        raise ValidationError(
            f"Unsupported beta schedule: {beta_schedule}. Only supports one of: {list(BETA_SCHEDULES)}"
        )
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    steps = torch.linspace(train_steps - 1, 0, n_inference, dtype=torch.float64).round().long()
    return DiffusionSchedule(betas, alpha_bars, tuple(int(s) for s in steps), beta_schedule)


def predict_x0(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: DiffusionSchedule
) -> torch.Tensor:
    """Clean sample implied by `x_t` and the predicted noise."""
    alpha_bar = float(sched.alpha_bar_at(t))
    return (x_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: DiffusionSchedule,
    clip_x0: bool = True,
) -> torch.Tensor:
    """One deterministic DDIM update from `t` to `t_prev` (`t_prev = -1` is the clean end).

    Args:
        x_t (torch.Tensor): Current sample.
        eps_hat (torch.Tensor): Predicted noise shaped like `x_t`.
        t (int): Current timestep.
        t_prev (int): Next, smaller timestep.
        sched (DiffusionSchedule): Schedule supplying the cumulative alphas.
        clip_x0 (bool, optional): Clamp the predicted clean sample to [-1, 1]. Defaults to True.

    Raises:
        ValidationError: If `t_prev >= t`.
    """
    t, t_prev = int(t), int(t_prev)
    if t_prev >= t:
        raise ValidationError(f"t_prev must be smaller than t, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(x_t, eps_hat, t, sched)
    if clip_x0:
        x0 = x0.clamp(-1.0, 1.0)
    alpha_prev = float(sched.alpha_bar_at(t_prev))
    return math.sqrt(alpha_prev) * x0 + math.sqrt(1.0 - alpha_prev) * eps_hat


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding `[B, dim]` of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / max(half, 1)
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ResBlock3D(nn.Module):
    """Two 3x3x3 convolutions with group norm, a timestep shift and a skip path."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, kernel_size=3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, kernel_size=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample3D(nn.Module):
    """Strided convolution halving height and width; frames are kept."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=(1, 2, 2), padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample3D(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest"))


class UNet3D(nn.Module):
    """Three-level residual 3D U-Net predicting the injected noise.

    The emotion vector `w_e` is added to the sinusoidal timestep embedding
    before its MLP. The identity vector `w_i` is viewed as a single-channel
    `identity_shape` map, average pooled to the bottleneck resolution and
    multiplied into the bottleneck latent.

    Args:
        channels (Sequence[int], optional): Widths of the three levels. Defaults to `(32, 64, 128)`.
        emotion_dim (int, optional): Width `D_e` of `w_e` and of the timestep sinusoid. Defaults to 64.
        identity_shape (Tuple[int, int], optional): Map shape of `w_i`. Defaults to `(32, 64)`.
        in_channels (int, optional): Image channels. Defaults to 3.
    """

    def __init__(
        self,
        channels: Sequence[int] = (32, 64, 128),
        emotion_dim: int = 64,
        identity_shape: Tuple[int, int] = IDENTITY_SHAPE,
        in_channels: int = 3,
    ):
        super().__init__()
        if len(channels) != 3:
            raise ValidationError(f"UNet3D expects three channel sizes, got {list(channels)}")
        c0, c1, c2 = channels
        temb_dim = 4 * c0
        self.channels = tuple(channels)
        self.emotion_dim = emotion_dim
        self.identity_shape = tuple(identity_shape)
        self.in_channels = in_channels

        self.time_mlp = nn.Sequential(
            nn.Linear(emotion_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.stem = nn.Conv3d(in_channels, c0, kernel_size=3, padding=1)
        self.enc0 = ResBlock3D(c0, c0, temb_dim)
        self.down0 = Downsample3D(c0, c1)
        self.enc1 = ResBlock3D(c1, c1, temb_dim)
        self.down1 = Downsample3D(c1, c2)
        self.enc2 = ResBlock3D(c2, c2, temb_dim)
        self.down2 = Downsample3D(c2, c2)
        self.mid = ResBlock3D(c2, c2, temb_dim)
        self.up2 = Upsample3D(c2, c2)
        self.dec2 = ResBlock3D(2 * c2, c2, temb_dim)
        self.up1 = Upsample3D(c2, c1)
        self.dec1 = ResBlock3D(2 * c1, c1, temb_dim)
        self.up0 = Upsample3D(c1, c0)
        self.dec0 = ResBlock3D(2 * c0, c0, temb_dim)
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out = nn.Conv3d(c0, in_channels, kernel_size=3, padding=1)

    @property
    def identity_dim(self) -> int:
        return self.identity_shape[0] * self.identity_shape[1]

    def embed(self, t: torch.Tensor, w_e: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Timestep embedding with the emotion vector added, before the MLP."""
        emb = timestep_embedding(t, self.emotion_dim)
        if w_e is not None:
            emb = emb + w_e.to(emb)
        return emb

    def identity_map(self, w_i: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        """`[B, 1, 1, h, w]` identity multiplier for a bottleneck of spatial `size`."""
        batch = w_i.shape[0]
        grid = w_i.reshape(batch, 1, *self.identity_shape)
        return F.adaptive_avg_pool2d(grid, size).unsqueeze(2)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        w_e: Optional[torch.Tensor] = None,
        w_i: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        # [B, F, H, W, C] -> [B, C, F, H, W]
        h = x.permute(0, 4, 1, 2, 3)
        temb = self.time_mlp(self.embed(t, w_e))

        h0 = self.enc0(self.stem(h), temb)
        h1 = self.enc1(self.down0(h0), temb)
        h2 = self.enc2(self.down1(h1), temb)
        hb = self.down2(h2)
        if w_i is not None:
            hb = hb * self.identity_map(w_i.to(hb), hb.shape[-2:])
        hb = self.mid(hb, temb)

        h = self.dec2(torch.cat([self.up2(hb), h2], dim=1), temb)
        h = self.dec1(torch.cat([self.up1(h), h1], dim=1), temb)
        h = self.dec0(torch.cat([self.up0(h), h0], dim=1), temb)
        h = self.out(F.silu(self.out_norm(h)))
        return h.permute(0, 2, 3, 4, 1)


class IdentityEncoder(nn.Module):
    """Small CNN stand-in for the pretrained identity network.

    Strided convolutions reduce the image to 4x4; the flattened map is
    projected to `out_dim`. No global pooling, so distinct images map to
    distinct vectors under random weights.
    """

    def __init__(self, out_dim: int = 2048, width: int = 32, image_size: int = 128):
        super().__init__()
        if image_size < 4 or image_size & (image_size - 1):
            raise ValidationError(f"identity image size must be a power of two >= 4, got {image_size}")
        layers: List[nn.Module] = []
        in_ch, ch, size = 3, width, image_size
        while size > 4:
            layers += [nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1), nn.SiLU()]
            in_ch, ch, size = ch, min(ch * 2, 128), size // 2
        if not layers:
            layers = [nn.Conv2d(3, width, kernel_size=3, padding=1), nn.SiLU()]
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(in_ch * 16, out_dim)
        self.out_dim = out_dim
        self.image_size = image_size

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # [B, H, W, 3] in [0, 1]
        h = self.features(image.permute(0, 3, 1, 2) * 2.0 - 1.0)
        return self.proj(h.flatten(1))


def identity_encode(image: torch.Tensor, encoder: IdentityEncoder) -> torch.Tensor:
    """Encodes an `[H, W, 3]` image (or `[B, H, W, 3]` batch) into `w_i`.

    Returns:
        torch.Tensor: `[2048]` (or `[B, 2048]`) identity vector.
    """
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    param = next(encoder.parameters())
    w_i = encoder(batch.to(device=param.device, dtype=param.dtype))
    return w_i[0] if single else w_i


class ConditioningBundle(NamedTuple):
    """Conditioning of the denoiser. Either field may be None to disable it.

    Args:
        w_e (Optional[torch.Tensor]): `[B, D_e]` emotion vector.
        w_i (Optional[torch.Tensor]): `[B, 2048]` identity vector, viewed as 32x64.
    """

    w_e: Optional[torch.Tensor] = None
    w_i: Optional[torch.Tensor] = None


def _check_frames(x: torch.Tensor, channels: int) -> None:
    if x.dim() != 5 or x.shape[-1] != channels:
        raise ContractError(f"frames must be [B, F, H, W, {channels}], got {tuple(x.shape)}")
    if x.shape[-2] % 8 or x.shape[-3] % 8:
        raise ContractError(f"frame height and width must be multiples of 8, got {tuple(x.shape)}")


def _check_cond(cond: Optional[ConditioningBundle], unet: UNet3D, batch: int) -> ConditioningBundle:
    if cond is None:
        raise ValidationError("conditioning bundle is missing")
    if cond.w_i is not None:
        if cond.w_i.shape != (batch, unet.identity_dim):
            raise ContractError(
                f"w_i must be [{batch}, {unet.identity_dim}], got {tuple(cond.w_i.shape)}"
            )
        if not torch.isfinite(cond.w_i).all():
            raise ValidationError("w_i contains non-finite values")
    if cond.w_e is not None and cond.w_e.shape != (batch, unet.emotion_dim):
        raise ContractError(f"w_e must be [{batch}, {unet.emotion_dim}], got {tuple(cond.w_e.shape)}")
    return cond


def unet_forward(
    model: UNet3D,
    x_t: torch.Tensor,
    t: Union[int, torch.Tensor],
    cond: Optional[ConditioningBundle],
) -> torch.Tensor:
    """Predicts the noise in `x_t` (`[B, F, H, W, 3]`).

    Raises:
        ValidationError: If `cond` is None.
        ContractError: If frames or conditioning vectors are mis-shaped.
    """
    _check_frames(x_t, model.in_channels)
    cond = _check_cond(cond, model, x_t.shape[0])
    t = torch.as_tensor(t, device=x_t.device, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    return model(x_t, t, cond.w_e, cond.w_i)


class DiffusionModel(nn.Module):
    """The denoiser together with the identity encoder that feeds it."""

    def __init__(
        self,
        channels: Sequence[int] = (32, 64, 128),
        emotion_dim: int = 64,
        identity_shape: Tuple[int, int] = IDENTITY_SHAPE,
        identity_width: int = 32,
        image_size: int = 128,
    ):
        super().__init__()
        self.unet = UNet3D(channels, emotion_dim, identity_shape)
        self.identity = IdentityEncoder(
            identity_shape[0] * identity_shape[1], identity_width, image_size
        )

    @classmethod
    def from_config(cls, config) -> "DiffusionModel":
        return cls(
            channels=tuple(config.diffusion.channels),
            emotion_dim=config.audio.emotion_width,
            identity_shape=tuple(config.diffusion.identity_shape),
            identity_width=config.diffusion.identity_width,
            image_size=config.data.image_size,
        )

    def condition(
        self, identity_image: torch.Tensor, w_e: Optional[torch.Tensor] = None
    ) -> ConditioningBundle:
        """Builds the bundle from `[B, H, W, 3]` identity images and an optional `w_e`."""
        return ConditioningBundle(w_e, identity_encode(identity_image, self.identity))

    def forward(
        self, x_t: torch.Tensor, t: Union[int, torch.Tensor], cond: ConditioningBundle
    ) -> torch.Tensor:
        return unet_forward(self.unet, x_t, t, cond)


@torch.no_grad()
def denoise_sequence(
    init: torch.Tensor,
    cond: ConditioningBundle,
    sched: DiffusionSchedule,
    model: nn.Module,
    clip_x0: bool = True,
) -> torch.Tensor:
    """Runs the strided DDIM chain from `init` and maps the result to [0, 1].

    Args:
        init (torch.Tensor): `[B, F, H, W, 3]` sample at `sched.inference_steps[0]`.
        cond (ConditioningBundle): Conditioning for every step.
        sched (DiffusionSchedule): Schedule and inference timesteps.
        model (nn.Module): `UNet3D` or `DiffusionModel`.

    Returns:
        torch.Tensor: Frames in [0, 1], shaped like `init`.
    """
    unet = model.unet if isinstance(model, DiffusionModel) else model
    x = init
    for t, t_prev in sched.step_pairs():
        eps_hat = unet_forward(unet, x, t, cond)
        x = ddim_step(x, eps_hat, t, t_prev, sched, clip_x0=clip_x0)
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def diffusion_loss(
    model: nn.Module,
    x0: torch.Tensor,
    fields: Union[NoiseField, torch.Tensor],
    cond: ConditioningBundle,
    sched: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    t: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """MSE between the predicted noise and the guided noise `clamp(I_hat) * eps` actually injected.

    Args:
        model (nn.Module): `UNet3D` or `DiffusionModel`.
        x0 (torch.Tensor): `[B, F, H, W, 3]` clean frames in [-1, 1].
        fields (Union[NoiseField, torch.Tensor]): `[B, F, H, W]` noise fields.
        cond (ConditioningBundle): Conditioning vectors.
        sched (DiffusionSchedule): Forward process schedule.
        generator (Optional[torch.Generator], optional): CPU generator for `t` and `eps`.
        t (Optional[torch.Tensor], optional): Fixed `[B]` timesteps instead of sampling.
    """
    unet = model.unet if isinstance(model, DiffusionModel) else model
    batch = x0.shape[0]
    if t is None:
        t = torch.randint(0, sched.train_steps, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    values = fields.values if isinstance(fields, NoiseField) else fields
    x_t = apply_guided_noise(x0, values, eps, t, sched)
    target = values.clamp(0.0, 1.0).unsqueeze(-1).to(x0) * eps
    prediction = unet_forward(unet, x_t, t.to(x0.device), cond)
    return F.mse_loss(prediction, target)
