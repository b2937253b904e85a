import random
from typing import Optional
from typing import Union

import numpy as np
import torch


def seed_everything(seed: int) -> None:
    """Seeds `random`, `numpy` and `torch` (all devices)."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def make_generator(
    seed: Optional[int], device: Union[str, torch.device] = "cpu"
) -> Optional[torch.Generator]:
    """Creates a seeded `torch.Generator`, or None if `seed` is None."""
    if seed is None:
        return None
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def resolve_device(device: str = "auto") -> torch.device:
    """Maps `"auto"` to cuda when available, otherwise passes `device` through."""
    if device == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(device)


def gradient_norm(module: torch.nn.Module) -> float:
    """L2 norm over all parameter gradients of `module`. Missing gradients count as zero."""
    total = 0.0
    for parameter in module.parameters():
        if parameter.grad is not None:
            total += float(parameter.grad.detach().pow(2).sum())
    return total ** 0.5
