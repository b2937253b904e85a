import pytest
import torch

from talkfast import landmarks
from talkfast.audio import AudioClip
from talkfast.audio import AudioWave
from talkfast.config import with_overrides
from talkfast.exceptions import ContractError
from talkfast.exceptions import ValidationError
from talkfast.landmarks import LandmarkGenerator
from talkfast.utils import gradient_norm


def _generator(config, **kwargs):
    torch.manual_seed(0)
    config = with_overrides(config, {f"landmarks.{k}": v for k, v in kwargs.items()})
    return LandmarkGenerator.from_config(config)


def _mouth_height(points):
    return float(points[48:60, 1].max() - points[48:60, 1].min())


def test_template_landmarks():
    points = landmarks.template_landmarks()
    assert points.shape == (68, 2)
    assert points.min() >= 0 and points.max() <= 1
    closed = landmarks.template_landmarks(mouth_open=0.0)
    opened = landmarks.template_landmarks(mouth_open=1.0)
    assert _mouth_height(opened) > _mouth_height(closed)
    assert landmarks.template_landmarks(10).shape == (10, 2)


def test_validate_sequence():
    seq = landmarks.LandmarkSequence(landmarks.template_landmarks().expand(30, -1, -1))
    assert landmarks.validate_sequence(seq) is seq
    assert seq.mouth.shape == (30, 20, 2)
    with pytest.raises(ValidationError):
        landmarks.validate_sequence(landmarks.LandmarkSequence(torch.full((2, 68, 2), 1.5)))
    with pytest.raises(ValidationError):
        landmarks.validate_mouth_indices([48, 48], 68)
    with pytest.raises(ValidationError):
        landmarks.validate_mouth_indices([70], 68)


def test_generate_landmarks_shapes(tiny_config):
    generator = _generator(tiny_config).eval()
    identity = landmarks.template_landmarks()

    clip = AudioClip(AudioWave(torch.randn(4000).numpy(), 4000), 1.0, 6)
    single = landmarks.generate_landmarks(generator, clip, identity)
    assert single.points.shape == (6, 68, 2)
    assert single.points.min() >= 0 and single.points.max() <= 1

    batch = landmarks.generate_landmarks(generator, torch.zeros(3, 4000), identity)
    assert batch.points.shape == (3, 6, 68, 2)

    with pytest.raises(ValidationError):
        landmarks.generate_landmarks(generator, clip, identity + 2.0)


def test_generator_is_deterministic_in_eval(tiny_config):
    generator = _generator(tiny_config).eval()
    audio = torch.randn(2, 4000)
    identity = landmarks.template_landmarks().expand(2, -1, -1)
    with torch.no_grad():
        assert torch.equal(generator(audio, identity), generator(audio, identity))


def test_domain_wrappers(tiny_config):
    generator = _generator(tiny_config)
    v = landmarks.template_landmarks()
    audio = torch.zeros(1, 4000)
    g_f, g_m = landmarks.global_domain(generator, audio, v, generator.mouth_of(v.unsqueeze(0))[0])
    assert g_f.shape == (1, 6, 8) and g_m.shape == (1, 6, 8)
    with pytest.raises(ValidationError):
        landmarks.global_domain(generator, audio, v, v[:20])

    feature = generator.encoders(audio)
    c_f, c_m, c_ef = landmarks.context_domain(generator, feature, v)
    assert c_f.shape == c_ef.shape == (1, 6, 8)
    assert c_m.shape == (1, 6, 8)

    d = landmarks.DomainFeatures(g_f, g_m, c_f, c_m, c_ef)
    assert landmarks.kfusion(generator, d).points.shape == (1, 6, 68, 2)

    with pytest.raises(ContractError):
        landmarks.kfusion(generator, d._replace(g_f=torch.zeros(1, 6, 5)))


def test_mouth_insertion_only_touches_mouth_points():
    torch.manual_seed(0)
    fusion = landmarks.KFusion(6, 4, num_points=68, point_width=2, fusion_width=8, head="mlp", head_hidden=8)
    x_f = torch.randn(1, 5, 6)
    x_m = torch.randn(1, 5, 4, requires_grad=True)
    fused = fusion.fuse(x_f, x_m)
    mouth = list(fusion.mouth_indices)
    others = [i for i in range(68) if i not in mouth]

    grad = torch.autograd.grad(fused[:, :, others].sum(), x_m, allow_unused=True)[0]
    assert grad is None or torch.all(grad == 0)
    grad = torch.autograd.grad(fused[:, :, mouth].sum(), x_m)[0]
    assert grad.abs().sum() > 0

    without = fusion.fuse(x_f, x_m, write_mouth=False)
    assert torch.equal(without[:, :, others], fused[:, :, others])


def test_without_global_domain_has_no_gradient(tiny_config):
    generator = _generator(tiny_config, use_global=False)
    pred = generator(torch.randn(2, 4000), landmarks.template_landmarks().expand(2, -1, -1))
    pred.sum().backward()
    assert gradient_norm(generator.global_domain) == 0.0
    assert gradient_norm(generator.context_domain) > 0.0


def test_without_context_domain_has_no_gradient(tiny_config):
    generator = _generator(tiny_config, use_context=False)
    pred = generator(torch.randn(2, 4000), landmarks.template_landmarks().expand(2, -1, -1))
    pred.sum().backward()
    assert gradient_norm(generator.context_domain) == 0.0
    assert gradient_norm(generator.global_domain) > 0.0


def test_without_kfusion_and_mlp_head(tiny_config):
    generator = _generator(tiny_config, use_kfusion=False, head="mlp")
    assert not hasattr(generator.kfusion, "conv_face")
    out = generator(torch.zeros(1, 4000), landmarks.template_landmarks().unsqueeze(0))
    assert out.shape == (1, 6, 68, 2)


def test_conv_block_identity():
    block = landmarks.ConvBlock(4, 4, 4).identity_()
    x = torch.rand(2, 7, 4)
    assert torch.allclose(block(x), x)
    with pytest.raises(ValidationError):
        landmarks.ConvBlock(4, 8, 4).identity_()


def test_rconv_block_residual():
    block = landmarks.RConvBlock(4, 8, 4)
    with torch.no_grad():
        for conv in (block.conv1, block.conv2, block.conv3):
            conv.weight.zero_()
            conv.bias.zero_()
    x = torch.randn(1, 3, 4)
    assert torch.equal(block(x), x)


def test_resample_time():
    x = torch.arange(5.0).view(1, 5, 1)
    y = landmarks.resample_time(x, 9)
    assert y.shape == (1, 9, 1)
    assert float(y[0, 0, 0]) == 0.0 and float(y[0, -1, 0]) == 4.0
    assert landmarks.resample_time(x, 5) is x


@pytest.mark.slow
@pytest.mark.parametrize("head", ["kan", "mlp"])
def test_overfits_one_pair(tiny_config, head):
    generator = _generator(tiny_config, head=head)
    torch.manual_seed(1)
    audio = torch.randn(1, 4000) * 0.3
    identity = landmarks.template_landmarks().unsqueeze(0)
    target = torch.stack(
        [landmarks.template_landmarks(mouth_open=m) for m in torch.linspace(0, 1, 6).tolist()]
    ).unsqueeze(0)
    opt = torch.optim.Adam(generator.parameters(), lr=3e-3)
    for _ in range(600):
        loss = torch.nn.functional.mse_loss(generator(audio, identity), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 1e-3


def test_every_parameter_receives_gradient(tiny_config):
    generator = _generator(tiny_config)
    pred = generator(torch.randn(2, 4000), landmarks.template_landmarks().expand(2, -1, -1))
    pred.sum().backward()
    # The pooled emotion embedding and its classifier feed the emotion loss only.
    emotion_only = ("encoders.pool_proj", "encoders.emotion_head")
    for name, parameter in generator.named_parameters():
        if name.startswith(emotion_only):
            continue
        assert parameter.grad is not None, name
        assert parameter.grad.abs().sum() > 0, name


def test_batch_items_are_independent(tiny_config):
    generator = _generator(tiny_config).eval()
    torch.manual_seed(3)
    audio = torch.randn(2, 4000)
    identity = landmarks.template_landmarks().expand(2, -1, -1)
    perturbed = audio.clone()
    perturbed[0] = torch.randn(4000)
    with torch.no_grad():
        before = generator(audio, identity)
        after = generator(perturbed, identity)
    assert torch.allclose(before[1], after[1], atol=1e-6)
    assert not torch.allclose(before[0], after[0])


@pytest.mark.parametrize("head", ["kan", "mlp"])
def test_output_stays_in_unit_square(tiny_config, head):
    generator = _generator(tiny_config, head=head).eval()
    generator_rng = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for scale in (0.01, 1.0, 100.0):
            audio = torch.randn(3, 4000, generator=generator_rng) * scale
            identity = torch.rand(3, 68, 2, generator=generator_rng)
            out = generator(audio, identity)
            assert torch.isfinite(out).all()
            assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.slow
def test_loss_decreases_across_seeds(tiny_config):
    identity = landmarks.template_landmarks().unsqueeze(0)
    target = landmarks.template_landmarks(mouth_open=0.8).expand(1, 6, -1, -1)
    decreased = 0
    for seed in range(10):
        torch.manual_seed(seed)
        generator = LandmarkGenerator.from_config(tiny_config)
        audio = torch.randn(1, 4000) * 0.3
        opt = torch.optim.Adam(generator.parameters(), lr=1e-3)
        losses = []
        for _ in range(20):
            loss = torch.nn.functional.mse_loss(generator(audio, identity), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        decreased += losses[-1] < losses[0]
    assert decreased >= 9
