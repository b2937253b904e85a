import pytest

from talkfast.config import load_config
from talkfast.data import ingest
from talkfast.data import write_synthetic_dataset

TINY = [
    "audio.sample_rate=4000",
    "audio.hop=160",
    "audio.context_width=8",
    "audio.emotion_width=8",
    "landmarks.decoder_width=8",
    "landmarks.face_width=8",
    "landmarks.mouth_width=8",
    "landmarks.recurrent_hidden=8",
    "landmarks.heads=2",
    "landmarks.layers=1",
    "landmarks.point_width=2",
    "landmarks.fusion_width=8",
    "landmarks.head_hidden=8",
    "landmarks.grid_size=4",
    "diffusion.train_steps=50",
    "diffusion.inference_steps=4",
    "diffusion.channels=[8,8,8]",
    "diffusion.identity_shape=[4,4]",
    "diffusion.identity_width=4",
    "train.epochs=1",
    "train.batch_size=2",
    "train.lr=1e-3",
    "train.lr_min=1e-5",
    "train.max_steps_per_epoch=2",
    "train.progress=false",
    "data.frames=6",
    "data.fps=6",
    "data.image_size=16",
    "data.test_fraction=0.25",
    "data.val_fraction=0.0",
    "data.ingest_workers=2",
    "device=cpu",
]


def make_tiny_config(*extra):
    return load_config(None, TINY + list(extra), environ={})


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope="session")
def synthetic_data(tmp_path_factory):
    """Four ingested two-second synthetic samples: `(root, manifest)`."""
    config = make_tiny_config()
    raw = tmp_path_factory.mktemp("raw")
    root = tmp_path_factory.mktemp("data")
    write_synthetic_dataset(raw, count=4, seed=0, seconds=2.0, image_size=16, fps=6)
    manifest = ingest(raw, root, config)
    return root, manifest
