"""
Landmark generator ablations: each variant disables one extractor domain,
the fusion block, or swaps the prediction head, and is trained and scored
under identical seeds and training settings.
"""
import logging
import pathlib
from collections import OrderedDict
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import torch
from omegaconf import DictConfig

from talkfast.checkpoint import load_landmark_generator
from talkfast.config.schema import save_config
from talkfast.config.schema import with_overrides
from talkfast.data import ClipDataset
from talkfast.data import DatasetManifest
from talkfast.data import make_loader
from talkfast.dtypes import AblationRow
from talkfast.exceptions import ValidationError
from talkfast.format import save_rows
from talkfast.kan import count_parameters
from talkfast.landmarks import LandmarkGenerator
from talkfast.metrics import lmd
from talkfast.metrics import m_lmd
from talkfast.train import train_landmarks
from talkfast.utils import resolve_device

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

VARIANTS: "OrderedDict[str, Dict[str, object]]" = OrderedDict(
    [
        ("w/o KFusion", {"landmarks.use_kfusion": False}),
        ("w/o Content Domain", {"landmarks.use_context": False}),
        ("w/o Global Domain", {"landmarks.use_global": False}),
        ("with MLP", {"landmarks.head": "mlp"}),
        ("with KAN", {"landmarks.head": "kan"}),
    ]
)
ALIASES = {"w/o Context Domain": "w/o Content Domain"}


def resolve_variant(name: str) -> str:
    """Canonical variant name.

    Raises:
        ValidationError: If `name` is not a known variant.
    """
    name = ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValidationError(f"Unknown variant: {name}. Only supports one of: {list(VARIANTS)}")
    return name


def variant_config(config: DictConfig, name: str) -> DictConfig:
    """`config` with the variant's toggles applied on top of the full model."""
    base = {
        "landmarks.use_global": True,
        "landmarks.use_context": True,
        "landmarks.use_kfusion": True,
        "landmarks.head": "kan",
    }
    base.update(VARIANTS[resolve_variant(name)])
    return with_overrides(config, base)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower()).strip("_")


@torch.no_grad()
def score_landmarks(
    generator: LandmarkGenerator,
    dataset: ClipDataset,
    config: DictConfig,
    device: torch.device,
) -> Dict[str, float]:
    """LMD and M-LMD of `generator` over `dataset`, averaged per clip."""
    generator.eval()
    loader = make_loader(dataset, config.train.batch_size, shuffle=False)
    scores_lmd, scores_mlmd = [], []
    for batch in loader:
        audio = batch["audio"].to(device)
        pred = generator(audio, batch["identity_landmarks"].to(device)).cpu().numpy()
        gt = batch["landmarks"].numpy()
        for p, g in zip(pred, gt):
            scores_lmd.append(lmd(p, g, image_size=config.data.image_size))
            scores_mlmd.append(m_lmd(p, g, generator.mouth_indices, config.data.image_size))
    return {"lmd": float(np.mean(scores_lmd)), "m_lmd": float(np.mean(scores_mlmd))}


def ablation(
    manifest: DatasetManifest,
    config: DictConfig,
    variants: Sequence[str] = tuple(VARIANTS),
    data_root: Optional[PathLike] = None,
    out_dir: Optional[PathLike] = None,
    split: Optional[str] = None,
) -> List[AblationRow]:
    """Trains and scores every variant, writing `ablation.{csv,json,md,png}` to `out_dir`.

    Scores come from the test split, or from `split` when given (the train
    split is used when the test split is empty). The KAN vs MLP ordering is
    logged, not enforced.

    Raises:
        ValidationError: On unknown variant names, before any training starts.
    """
    names = [resolve_variant(v) for v in variants]
    out_dir = pathlib.Path(out_dir or pathlib.Path(config.paths.output_dir) / "ablation")
    data_root = data_root or config.paths.data_root
    save_config(config, out_dir)
    if split is None:
        split = "test" if manifest.split("test") else "train"
    dataset = ClipDataset(manifest, data_root, split, config.audio.sample_rate)
    if not len(dataset):
        raise ValidationError(f"no clips in the {split} split to score the ablation on")
    device = resolve_device(config.device)

    rows = []
    for name in names:
        cfg = variant_config(config, name)
        logger.info("ablation variant %r", name)
        result = train_landmarks(manifest, cfg, data_root, out_dir / _slug(name))
        generator = load_landmark_generator(result.checkpoint, cfg, device)
        scores = score_landmarks(generator, dataset, cfg, device)
        rows.append(
            AblationRow(name, scores["lmd"], scores["m_lmd"], result.final_loss, count_parameters(generator))
        )
        logger.info("%s: LMD %.4f M-LMD %.4f", name, scores["lmd"], scores["m_lmd"])

    by_name = {row.variant: row for row in rows}
    if "with KAN" in by_name and "with MLP" in by_name:
        kan, mlp = by_name["with KAN"].lmd, by_name["with MLP"].lmd
        logger.info("KAN head LMD %.4f %s MLP head LMD %.4f", kan, "<=" if kan <= mlp else ">", mlp)

    save_rows(rows, out_dir, "ablation", ("csv", "json", "markdown", "plot"))
    return rows
