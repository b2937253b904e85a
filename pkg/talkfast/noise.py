"""
Landmarks-guided noise: rasterize landmarks, Gaussian-blur the mask into a
guide, draw the uniform noise field with a floor and modulate the forward
diffusion noise with it.
"""
import logging
import pathlib
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError
from talkfast.utils import make_generator

logger = logging.getLogger(__name__)

IMAGE_SIZE = 128
KERNEL_SIZE = 13
SIGMA = 2.0
DELTA = 0.1


class GuideMask(NamedTuple):
    """Per-frame mask `[..., H, W]`. Raw masks are binary and carry no kernel parameters."""

    values: torch.Tensor
    kernel_size: Optional[int] = None
    sigma: Optional[float] = None


class NoiseField(NamedTuple):
    """Per-frame noise magnitude `delta + I' * eta`, `[..., H, W]`."""

    values: torch.Tensor
    delta: float


def rasterize_landmarks(
    points: torch.Tensor, size: int = IMAGE_SIZE, dtype: torch.dtype = torch.float32
) -> GuideMask:
    """Sets the pixel under every landmark to 1.

    A point `(x, y)` lands on row `round(y * (size - 1))`, column
    `round(x * (size - 1))`, rounding halves up. Leading dimensions of
    `points` (frames, batch) are kept.

    Args:
        points (torch.Tensor): `[..., P, 2]` coordinates in [0, 1].
        size (int, optional): Mask side length. Defaults to 128.

    Raises:
        ValidationError: If any coordinate lies outside [0, 1].

    Returns:
        GuideMask: Raw `{0, 1}` mask `[..., size, size]`.
    """
    points = torch.as_tensor(points)
    lead = points.shape[:-2]
    if points.shape[-1] != 2:
        raise ValidationError(f"landmarks must be (..., P, 2), got {tuple(points.shape)}")
    if points.numel() and (
        not torch.isfinite(points).all() or points.min() < 0 or points.max() > 1
    ):
        raise ValidationError("landmark coordinates must lie in [0, 1]")

    flat = points.reshape(-1, points.shape[-2], 2).detach().to(torch.float64).cpu()
    mask = torch.zeros(flat.shape[0], size * size, dtype=dtype)
    if flat.shape[1]:
        index = torch.floor(flat * (size - 1) + 0.5).long()
        linear = index[..., 1] * size + index[..., 0]
        mask.scatter_(1, linear, 1.0)
    mask = mask.view(*lead, size, size).to(points.device)
    return GuideMask(mask)


def _check_kernel(kernel_size: int, sigma: float) -> None:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValidationError(f"kernel size must be a positive odd number, got {kernel_size}")
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")


def gaussian_kernel1d(
    kernel_size: int, sigma: float, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """Normalized 1-D Gaussian taps over radius `(kernel_size - 1) / 2`."""
    _check_kernel(kernel_size, sigma)
    radius = (kernel_size - 1) // 2
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    taps = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return (taps / taps.sum()).to(dtype)


def gaussian_kernel(
    kernel_size: int, sigma: float, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """`k x k` Gaussian stencil renormalized to sum 1."""
    taps = gaussian_kernel1d(kernel_size, sigma, torch.float64)
    return torch.outer(taps, taps).to(dtype)


def gaussian_blur(
    mask: Union[GuideMask, torch.Tensor], kernel_size: int = KERNEL_SIZE, sigma: float = SIGMA
) -> GuideMask:
    """Blurs a raw mask with the normalized Gaussian kernel, zero padding the borders.

    The kernel is separable, so rows and columns are filtered in turn. Pixels
    farther than `(kernel_size - 1) / 2` (Chebyshev) from every landmark stay 0.

    Raises:
        ValidationError: If `kernel_size` is even or `sigma` is not positive.
    """
    _check_kernel(kernel_size, sigma)
    values = mask.values if isinstance(mask, GuideMask) else mask
    shape = values.shape
    radius = (kernel_size - 1) // 2
    taps = gaussian_kernel1d(kernel_size, sigma, values.dtype).to(values.device)

    x = values.reshape(-1, 1, shape[-2], shape[-1])
    x = F.conv2d(x, taps.view(1, 1, 1, kernel_size), padding=(0, radius))
    x = F.conv2d(x, taps.view(1, 1, kernel_size, 1), padding=(radius, 0))
    return GuideMask(x.reshape(shape).clamp(0.0, 1.0), kernel_size, sigma)


def make_noise_field(
    blurred: Union[GuideMask, torch.Tensor],
    delta: float = DELTA,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    eta: Optional[torch.Tensor] = None,
) -> NoiseField:
    """Draws `I_hat = delta + I' * eta` with `eta ~ U[0, 1]` per pixel and frame.

    Args:
        blurred (Union[GuideMask, torch.Tensor]): The guide `I'`.
        delta (float, optional): Noise floor in (0, 1). Defaults to 0.1.
        seed (Optional[int], optional): Seed for `eta` when no `generator` is given.
        generator (Optional[torch.Generator], optional): Source of `eta`.
        eta (Optional[torch.Tensor], optional): Fixed `eta` instead of sampling.

    Raises:
        ValidationError: If `delta` is outside (0, 1).
    """
    if not 0.0 < delta < 1.0:
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    values = blurred.values if isinstance(blurred, GuideMask) else blurred
    if eta is None:
        if generator is None:
            generator = make_generator(seed, values.device)
        eta = torch.rand(
            values.shape, generator=generator, dtype=values.dtype, device=values.device
        )
    elif eta.shape != values.shape:
        raise ContractError(f"eta {tuple(eta.shape)} does not match the guide {tuple(values.shape)}")
    return NoiseField(delta + values * eta, delta)


def landmark_noise_fields(
    points: torch.Tensor,
    kernel_size: int = KERNEL_SIZE,
    sigma: float = SIGMA,
    delta: float = DELTA,
    seed: Optional[int] = None,
    size: int = IMAGE_SIZE,
    generator: Optional[torch.Generator] = None,
) -> NoiseField:
    """Noise fields for every frame of `[..., F, P, 2]` landmarks, `[..., F, size, size]`."""
    raw = rasterize_landmarks(points, size)
    return make_noise_field(gaussian_blur(raw, kernel_size, sigma), delta, seed, generator)


def apply_guided_noise(
    frames: torch.Tensor,
    fields: Union[NoiseField, torch.Tensor],
    eps: torch.Tensor,
    t: Union[int, torch.Tensor],
    sched,
) -> torch.Tensor:
    """Forward diffusion with spatially modulated noise.

    `x_t = sqrt(a_t) * x_0 + sqrt(1 - a_t) * clamp(I_hat, 0, 1) * eps`

    Args:
        frames (torch.Tensor): `x_0`, `[B, F, H, W, C]` in [-1, 1].
        fields (Union[NoiseField, torch.Tensor]): `[B, F, H, W]` noise magnitudes.
        eps (torch.Tensor): Standard Gaussian noise shaped like `frames`.
        t (Union[int, torch.Tensor]): Timestep, scalar or `[B]`.
        sched (DiffusionSchedule): Supplies the cumulative alphas.

    Raises:
        ContractError: If the shapes of frames, fields and noise disagree.
    """
    values = fields.values if isinstance(fields, NoiseField) else fields
    if values.shape != frames.shape[:-1]:
        raise ContractError(
            f"noise fields {tuple(values.shape)} do not match frames {tuple(frames.shape)}"
        )
    if eps.shape != frames.shape:
        raise ContractError(f"noise {tuple(eps.shape)} does not match frames {tuple(frames.shape)}")
    alpha_bar = sched.alpha_bar_at(t, frames.shape[0]).to(frames)
    alpha_bar = alpha_bar.view(-1, *([1] * (frames.dim() - 1)))
    scale = values.clamp(0.0, 1.0).unsqueeze(-1).to(frames)
    return alpha_bar.sqrt() * frames + (1.0 - alpha_bar).sqrt() * scale * eps


def field_to_image(values: torch.Tensor) -> Image.Image:
    """Grayscale PNG-ready image of a single `[H, W]` field, values clipped to [0, 1]."""
    array = values.detach().cpu().clamp(0.0, 1.0).numpy()
    return Image.fromarray(np.round(array * 255.0).astype(np.uint8))


def render_fields(
    points: torch.Tensor,
    out_dir: Union[str, pathlib.Path],
    kernel_size: int = KERNEL_SIZE,
    sigma: float = SIGMA,
    delta: float = DELTA,
    seed: Optional[int] = 0,
    size: int = IMAGE_SIZE,
) -> List[pathlib.Path]:
    """Writes raw mask, blurred guide and noise field PNGs for each frame of `[F, P, 2]` landmarks."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = rasterize_landmarks(points, size)
    blurred = gaussian_blur(raw, kernel_size, sigma)
    field = make_noise_field(blurred, delta, seed)
    written = []
    for index in range(raw.values.shape[0]):
        for name, values in (("mask", raw.values), ("guide", blurred.values), ("field", field.values)):
            path = out_dir / f"{name}_{index:03d}.png"
            field_to_image(values[index]).save(path)
            written.append(path)
    logger.info("wrote %d images to %s", len(written), out_dir)
    return written
