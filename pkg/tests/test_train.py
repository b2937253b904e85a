import math

import pytest
import torch

from talkfast import train
from talkfast.checkpoint import load_checkpoint
from talkfast.checkpoint import load_diffusion_model
from talkfast.checkpoint import load_landmark_generator
from talkfast.data import ClipDataset
from talkfast.data import DatasetManifest
from talkfast.data import make_loader
from talkfast.exceptions import NonFiniteLossError
from talkfast.exceptions import ValidationError
from talkfast.landmarks import LandmarkGenerator

from tests.conftest import make_tiny_config


def test_cosine_lr():
    assert train.cosine_lr(0, 101) == pytest.approx(1e-4)
    assert train.cosine_lr(100, 101) == pytest.approx(1e-6)
    assert train.cosine_lr(50, 101) == pytest.approx(5.05e-5)
    assert train.cosine_lr(500, 101) == pytest.approx(1e-6)
    assert train.cosine_lr(0, 1, lr=1e-3) == 1e-3
    lrs = [train.cosine_lr(e, 10) for e in range(10)]
    assert lrs == sorted(lrs, reverse=True)


def test_make_scheduler():
    parameter = torch.nn.Parameter(torch.zeros(1))
    optimizer = torch.optim.Adam([parameter], lr=1e-4)
    scheduler = train.make_scheduler(optimizer, 5, 1e-4, 1e-6)
    seen = []
    for _ in range(5):
        seen.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    assert seen == pytest.approx([train.cosine_lr(e, 5) for e in range(5)])


def test_landmark_loss(synthetic_data, tiny_config):
    root, manifest = synthetic_data
    dataset = ClipDataset(manifest, root, "train", sample_rate=4000)
    batch = next(iter(make_loader(dataset, 2, shuffle=False)))
    generator = LandmarkGenerator.from_config(tiny_config)
    loss = train.landmark_loss(generator, batch)
    assert loss.dim() == 0
    assert torch.isfinite(loss)
    weighted = train.landmark_loss(generator, batch, emotion_weight=1.0)
    assert float(weighted) > float(loss)


def test_fit_dumps_nan_batch(tmp_path, tiny_config):
    model = torch.nn.Linear(1, 1)
    loader = [{"x": torch.ones(2, 1)}]
    with pytest.raises(NonFiniteLossError) as exc:
        train.fit(
            "landmarks",
            model,
            lambda b: model(b["x"]).sum() * float("nan"),
            loader,
            tiny_config,
            tmp_path,
            torch.device("cpu"),
        )
    assert exc.value.dump_path == str(tmp_path / "nan_batch.pt")
    dumped = torch.load(exc.value.dump_path, weights_only=True)
    assert dumped["stage"] == "landmarks"
    assert (dumped["epoch"], dumped["step"]) == (0, 0)
    assert torch.equal(dumped["batch"]["x"], torch.ones(2, 1))
    assert not (tmp_path / "checkpoints").exists()


def test_fit_without_batches(tmp_path, tiny_config):
    model = torch.nn.Linear(1, 1)
    with pytest.raises(ValidationError):
        train.fit("landmarks", model, lambda b: b, [], tiny_config, tmp_path, torch.device("cpu"))


def test_unknown_stage(synthetic_data, tiny_config):
    root, manifest = synthetic_data
    with pytest.raises(ValidationError):
        train.train_stage("vocoder", manifest, tiny_config, root)


def test_empty_train_split(tmp_path, synthetic_data, tiny_config):
    root, manifest = synthetic_data
    held_out = DatasetManifest(manifest.split("test"), manifest.header)
    with pytest.raises(ValidationError):
        train.train_stage("landmarks", held_out, tiny_config, root, tmp_path)


@pytest.mark.slow
def test_train_both_stages(tmp_path, synthetic_data):
    root, manifest = synthetic_data
    config = make_tiny_config("train.epochs=2")
    result = train.train_stage("landmarks", manifest, config, root, tmp_path / "landmarks")
    assert result.checkpoint == tmp_path / "landmarks" / "checkpoints" / "landmarks_last.pt"
    assert (tmp_path / "landmarks" / "config.yaml").exists()
    assert len(result.losses) == 2
    assert all(math.isfinite(loss) for loss in result.losses)
    assert result.final_loss == result.losses[-1]
    assert load_checkpoint(result.checkpoint, "landmarks")["extra"]["epoch"] == 1
    load_landmark_generator(result.checkpoint, config)

    config = make_tiny_config(f"diffusion.landmark_checkpoint={result.checkpoint}")
    result = train.train_stage("diffusion", manifest, config, root, tmp_path / "diffusion")
    assert math.isfinite(result.final_loss)
    assert load_checkpoint(result.checkpoint, "diffusion")["extra"]["uses_emotion"]
    load_diffusion_model(result.checkpoint, config)


@pytest.mark.slow
def test_training_is_reproducible(tmp_path, synthetic_data):
    root, manifest = synthetic_data
    config = make_tiny_config()
    first = train.train_stage("landmarks", manifest, config, root, tmp_path / "a")
    second = train.train_stage("landmarks", manifest, config, root, tmp_path / "b")
    assert first.losses == second.losses
