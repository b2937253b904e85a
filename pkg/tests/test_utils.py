import random

import numpy as np
import pytest
import torch

from talkfast import utils


def test_seed_everything():
    utils.seed_everything(3)
    first = (random.random(), np.random.rand(), torch.rand(1).item())
    utils.seed_everything(3)
    assert (random.random(), np.random.rand(), torch.rand(1).item()) == first


def test_make_generator():
    assert utils.make_generator(None) is None
    a = torch.rand(3, generator=utils.make_generator(5))
    b = torch.rand(3, generator=utils.make_generator(5))
    assert torch.equal(a, b)


def test_resolve_device():
    assert utils.resolve_device("cpu") == torch.device("cpu")
    assert utils.resolve_device("auto").type in ("cpu", "cuda")


def test_gradient_norm():
    layer = torch.nn.Linear(2, 1, bias=False)
    assert utils.gradient_norm(layer) == 0.0
    with torch.no_grad():
        layer.weight.copy_(torch.tensor([[1.0, 1.0]]))
    layer(torch.tensor([[3.0, 4.0]])).sum().backward()
    assert utils.gradient_norm(layer) == pytest.approx(5.0)
