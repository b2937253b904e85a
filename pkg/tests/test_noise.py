import numpy as np
import pytest
import torch
from PIL import Image
from scipy import signal

from talkfast import noise
from talkfast.diffusion import build_schedule
from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError
from talkfast.landmarks import template_landmarks


def test_rasterize_single_point_rounds_half_up():
    mask = noise.rasterize_landmarks(torch.tensor([[0.5, 0.5]])).values
    assert mask.shape == (128, 128)
    assert float(mask.sum()) == 1.0
    assert float(mask[64, 64]) == 1.0


def test_rasterize_counts_and_duplicates():
    assert float(noise.rasterize_landmarks(torch.zeros(0, 2)).values.sum()) == 0.0
    points = template_landmarks()
    assert float(noise.rasterize_landmarks(points).values.sum()) == 68.0
    twice = torch.cat([points, points])
    assert torch.equal(noise.rasterize_landmarks(twice).values, noise.rasterize_landmarks(points).values)
    frames = noise.rasterize_landmarks(points.expand(3, -1, -1), size=32).values
    assert frames.shape == (3, 32, 32)


def test_rasterize_rejects_out_of_range():
    with pytest.raises(ValidationError):
        noise.rasterize_landmarks(torch.tensor([[1.2, 0.5]]))
    with pytest.raises(ValidationError):
        noise.rasterize_landmarks(torch.tensor([[-0.1, 0.5]]))


def test_kernel():
    kernel = noise.gaussian_kernel(5, 1.0)
    assert float(kernel.sum()) == pytest.approx(1.0, abs=1e-12)
    x = torch.arange(-2, 3, dtype=torch.float64)
    g = torch.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / 2.0)
    np.testing.assert_allclose(kernel.numpy(), (g / g.sum()).numpy(), atol=1e-12)
    with pytest.raises(ValidationError):
        noise.gaussian_kernel(4, 1.0)
    with pytest.raises(ValidationError):
        noise.gaussian_kernel(5, 0.0)


def test_blur_single_pixel_is_stencil():
    mask = torch.zeros(16, 16, dtype=torch.float64)
    mask[8, 8] = 1.0
    blurred = noise.gaussian_blur(mask, 5, 1.0).values
    np.testing.assert_allclose(blurred[6:11, 6:11].numpy(), noise.gaussian_kernel(5, 1.0).numpy(), atol=1e-12)
    assert float(blurred.sum()) == pytest.approx(1.0, abs=1e-12)
    assert torch.argmax(blurred) == 8 * 16 + 8
    # monotone decay along the row
    row = blurred[8, 8:11]
    assert row[0] >= row[1] >= row[2]


def test_blur_matches_brute_force_convolution():
    rng = np.random.default_rng(0)
    mask = (rng.random((16, 16)) > 0.9).astype(np.float64)
    ours = noise.gaussian_blur(torch.as_tensor(mask), 5, 1.3).values.numpy()
    kernel = noise.gaussian_kernel(5, 1.3).numpy()
    expected = np.clip(signal.convolve2d(mask, kernel, mode="same", boundary="fill"), 0.0, 1.0)
    np.testing.assert_allclose(ours, expected, atol=1e-6)


def test_blur_zero_and_mass():
    zero = noise.gaussian_blur(torch.zeros(8, 8)).values
    assert torch.all(zero == 0)
    mask = torch.zeros(32, 32, dtype=torch.float64)
    mask[10, 12] = mask[20, 16] = 1.0
    assert float(noise.gaussian_blur(mask, 13, 2.0).values.sum()) == pytest.approx(2.0, abs=1e-6)


def test_noise_field_floor_and_bounds():
    points = template_landmarks()
    field = noise.landmark_noise_fields(points.expand(2, -1, -1), seed=3)
    assert field.values.shape == (2, 128, 128)
    assert float(field.values.min()) >= noise.DELTA
    blurred = noise.gaussian_blur(noise.rasterize_landmarks(points.expand(2, -1, -1)))
    assert torch.all(field.values <= noise.DELTA + blurred.values + 1e-7)


def test_noise_field_locality():
    points = torch.tensor([[0.5, 0.5]])
    field = noise.landmark_noise_fields(points, 13, 2.0, 0.1, seed=0).values
    radius = 6
    far = torch.ones(128, 128, dtype=torch.bool)
    far[64 - radius : 64 + radius + 1, 64 - radius : 64 + radius + 1] = False
    assert torch.all(field[far] == 0.1)


def test_noise_field_edges():
    blurred = torch.zeros(4, 4)
    assert torch.all(noise.make_noise_field(blurred, 0.2, seed=0).values == 0.2)
    guide = torch.rand(4, 4)
    forced = noise.make_noise_field(guide, 0.1, eta=torch.ones(4, 4)).values
    assert torch.allclose(forced, 0.1 + guide)
    with pytest.raises(ValidationError):
        noise.make_noise_field(blurred, 1.0)
    with pytest.raises(ValidationError):
        noise.make_noise_field(blurred, 0.0)
    with pytest.raises(ContractError):
        noise.make_noise_field(blurred, 0.1, eta=torch.ones(2, 2))


def test_noise_field_is_deterministic():
    points = template_landmarks().expand(3, -1, -1)
    a = noise.landmark_noise_fields(points, seed=7).values
    b = noise.landmark_noise_fields(points, seed=7).values
    c = noise.landmark_noise_fields(points, seed=8).values
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_eta_is_uniform():
    field = noise.make_noise_field(torch.ones(1000, 1000, dtype=torch.float64), 0.1, seed=0).values
    assert float((field - 0.1).mean()) == pytest.approx(0.5, abs=0.003)


def test_apply_guided_noise():
    sched = build_schedule()
    x0 = torch.rand(1, 2, 8, 8, 3) * 2 - 1
    eps = torch.randn_like(x0)
    zeros = torch.zeros(1, 2, 8, 8)
    attenuated = noise.apply_guided_noise(x0, zeros, eps, 500, sched)
    assert torch.allclose(attenuated, sched.alpha_bar_at(500).sqrt().float() * x0)

    near = noise.apply_guided_noise(x0, torch.ones(1, 2, 8, 8), eps, 0, sched)
    assert torch.allclose(near, x0, atol=0.05)
    assert float((near - x0).abs().mean()) < 1e-2

    with pytest.raises(ContractError):
        noise.apply_guided_noise(x0, torch.zeros(1, 2, 4, 4), eps, 0, sched)
    with pytest.raises(ContractError):
        noise.apply_guided_noise(x0, zeros, eps[..., :2], 0, sched)


def test_guided_noise_variance_ratio():
    sched = build_schedule()
    torch.manual_seed(0)
    fields = torch.full((10000, 1, 1, 2), 0.1)
    fields[..., 0] = 0.8
    x0 = torch.zeros(10000, 1, 1, 2, 1)
    x_t = noise.apply_guided_noise(x0, fields, torch.randn_like(x0), 999, sched)
    ratio = float(x_t[..., 0, 0].var() / x_t[..., 1, 0].var())
    assert ratio == pytest.approx((0.8 / 0.1) ** 2, rel=0.1)


def test_render_fields(tmp_path):
    points = template_landmarks().expand(2, -1, -1)
    written = noise.render_fields(points, tmp_path, size=32)
    assert len(written) == 6
    with Image.open(tmp_path / "mask_000.png") as image:
        assert image.size == (32, 32)
        assert image.mode == "L"
