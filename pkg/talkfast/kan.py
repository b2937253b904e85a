"""
Kolmogorov-Arnold network layers with cubic B-spline edge activations, and
the MLP head used as its ablation counterpart.
"""
import copy
import logging
from typing import Sequence
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

from talkfast.exceptions import ValidationError

logger = logging.getLogger(__name__)


def uniform_grid(
    grid_size: int,
    spline_order: int,
    grid_range: Tuple[float, float] = (-1.0, 1.0),
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Knot vector of `grid_size` uniform intervals over `grid_range`, extended by
    `spline_order` knots on each side (`grid_size + 2 * spline_order + 1` knots).
    """
    lo, hi = grid_range
    step = (hi - lo) / grid_size
    index = torch.arange(-spline_order, grid_size + spline_order + 1, dtype=dtype)
    return index * step + lo


def b_spline_bases(x: torch.Tensor, grid: torch.Tensor, spline_order: int) -> torch.Tensor:
    """Evaluates all B-spline bases with the Cox-de Boor recursion.

    Args:
        x (torch.Tensor): `[N, in_dim]` points, expected inside the grid range.
        grid (torch.Tensor): `[in_dim, n_knots]` knot vectors.
        spline_order (int): Polynomial degree of the bases.

    Returns:
        torch.Tensor: `[N, in_dim, n_knots - spline_order - 1]` basis values.
    """
    x = x.unsqueeze(-1)
    bases = ((x >= grid[:, :-1]) & (x < grid[:, 1:])).to(x.dtype)
    for k in range(1, spline_order + 1):
        left = (x - grid[:, : -(k + 1)]) / (grid[:, k:-1] - grid[:, : -(k + 1)])
        right = (grid[:, k + 1 :] - x) / (grid[:, k + 1 :] - grid[:, 1:-k])
        bases = left * bases[:, :, :-1] + right * bases[:, :, 1:]
    return bases


class KANLayer(nn.Module):
    """One KAN layer: `y[o] = sum_i base_weight[o, i] * silu(x[i]) + spline_{o, i}(x[i])`.

    Spline inputs are clamped to the grid range, so points outside it take
    the boundary value. The grid is static.

    Args:
        in_dim (int): Input features.
        out_dim (int): Output features.
        grid_size (int, optional): Uniform intervals over `grid_range`. Defaults to 8.
        spline_order (int, optional): B-spline degree. Defaults to 3.
        grid_range (Tuple[float, float], optional): Defaults to `(-1, 1)`.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        grid_size: int = 8,
        spline_order: int = 3,
        grid_range: Tuple[float, float] = (-1.0, 1.0),
    ):
        super().__init__()
        if spline_order != 3:
            raise ValidationError(f"spline_order must be 3, got {spline_order}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.grid_size = grid_size
        self.spline_order = spline_order
        self.grid_range = (float(grid_range[0]), float(grid_range[1]))

        grid = uniform_grid(grid_size, spline_order, self.grid_range)
        self.register_buffer("grid", grid.expand(in_dim, -1).contiguous())

        self.base_weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.coeffs = nn.Parameter(torch.empty(out_dim, in_dim, self.num_bases))
        nn.init.kaiming_uniform_(self.base_weight, a=5 ** 0.5)
        nn.init.normal_(self.coeffs, mean=0.0, std=0.1)

    @property
    def num_bases(self) -> int:
        return self.grid_size + self.spline_order

    def bases(self, x: torch.Tensor) -> torch.Tensor:
        """Basis values `[N, in_dim, num_bases]` at the clamped inputs."""
        lo, hi = self.grid_range
        return b_spline_bases(x.clamp(lo, hi), self.grid, self.spline_order)

    def spline(self, x: torch.Tensor) -> torch.Tensor:
        """Spline term only, `[N, out_dim]`."""
        return torch.einsum("nik,oik->no", self.bases(x), self.coeffs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        x = x.reshape(-1, self.in_dim)
        y = F.linear(F.silu(x), self.base_weight) + self.spline(x)
        return y.reshape(*shape[:-1], self.out_dim)


class KAN(nn.Module):
    """A stack of `KANLayer`s, e.g. `dims=[in, 64, out]`."""

    def __init__(self, dims: Sequence[int], grid_size: int = 8, spline_order: int = 3):
        super().__init__()
        self.layers = nn.ModuleList(
            KANLayer(a, b, grid_size=grid_size, spline_order=spline_order)
            for a, b in zip(dims, dims[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def kan_forward(layer: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Evaluates a KAN layer (or stack) on `[N, in_dim]` inputs.

    Raises:
        ValidationError: If `x` holds NaN or Inf values.
    """
    if not torch.isfinite(x).all():
        raise ValidationError("KAN input contains non-finite values")
    return layer(x)


def _relative_error(analytic: float, numeric: float) -> float:
    # Unit floor: gradients near zero are compared absolutely.
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def kan_gradient_check(
    layer: KANLayer, h: float = 1e-5, n_samples: int = 4, seed: int = 0
) -> float:
    """Compares autograd gradients against central finite differences.

    Works on a float64 copy of `layer`. The scalar checked is
    `sum(layer(x) * w)` for random in-range `x` and random weights `w`;
    gradients are taken with respect to the input, `base_weight` and `coeffs`.

    Args:
        layer (KANLayer): Layer to check, at most 8x8.
        h (float, optional): Finite difference step. Defaults to 1e-5.
        n_samples (int, optional): Rows of the check input. Defaults to 4.
        seed (int, optional): Seed of the check input. Defaults to 0.

    Returns:
        float: Maximum relative error over all checked entries.
    """
    if layer.in_dim > 8 or layer.out_dim > 8:
        raise ValidationError(
            f"gradient check is meant for layers up to 8x8, got {layer.out_dim}x{layer.in_dim}"
        )
    twin = copy.deepcopy(layer).double()
    generator = torch.Generator().manual_seed(seed)
    x = torch.rand(n_samples, twin.in_dim, generator=generator, dtype=torch.float64)
    x = (x * 1.8 - 0.9).requires_grad_(True)
    weights = torch.randn(n_samples, twin.out_dim, generator=generator, dtype=torch.float64)

    def objective() -> torch.Tensor:
        return (twin(x) * weights).sum()

    tensors = [x, twin.base_weight, twin.coeffs]
    analytic = torch.autograd.grad(objective(), tensors)

    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, analytic):
            flat = tensor.data.view(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = objective().item()
                flat[i] = original - h
                minus = objective().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, _relative_error(flat_grad[i].item(), numeric))
    logger.debug("KAN gradient check h=%g max relative error %.3e", h, worst)
    return worst


_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU}


class MLPHead(nn.Module):
    """Two-layer MLP with the same call contract as the KAN head."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, activation: str = "silu"):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValidationError(
                f"Unsupported activation: {activation}. Only supports one of: {sorted(_ACTIVATIONS)}"
            )
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = _ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))

    @torch.no_grad()
    def reset_identity(self) -> None:
        """Sets both layers to the identity map. Needs equal in, hidden and out widths."""
        for fc in (self.fc1, self.fc2):
            if fc.in_features != fc.out_features:
                raise ValidationError("identity initialisation needs square layers")
            fc.weight.copy_(torch.eye(fc.in_features))
            fc.bias.zero_()


def mlp_head(in_dim: int, out_dim: int, hidden: int = 64, activation: str = "silu") -> MLPHead:
    return MLPHead(in_dim, out_dim, hidden, activation)


def count_parameters(module: nn.Module) -> int:
    """Number of trainable parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def build_head(
    kind: str, in_dim: int, out_dim: int, hidden: int = 64, grid_size: int = 8
) -> nn.Module:
    """Builds the landmark prediction head, `"kan"` or `"mlp"`."""
    if kind == "kan":
        head = KAN([in_dim, hidden, out_dim], grid_size=grid_size)
    elif kind == "mlp":
        head = mlp_head(in_dim, out_dim, hidden)
    else:
        raise ValidationError(f"Unsupported head: {kind}. Only supports one of: ['kan', 'mlp']")
    logger.info("%s head %d -> %d -> %d: %d parameters", kind, in_dim, hidden, out_dim, count_parameters(head))
    return head
