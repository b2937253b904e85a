import json
import math

import pytest

from talkfast import ablation
from talkfast.exceptions import ValidationError


def test_variants():
    assert list(ablation.VARIANTS) == [
        "w/o KFusion",
        "w/o Content Domain",
        "w/o Global Domain",
        "with MLP",
        "with KAN",
    ]


def test_resolve_variant():
    assert ablation.resolve_variant("with KAN") == "with KAN"
    assert ablation.resolve_variant("w/o Context Domain") == "w/o Content Domain"
    with pytest.raises(ValidationError) as exc:
        ablation.resolve_variant("w/o Audio")
    assert "Unknown variant" in str(exc.value)


def test_variant_config(tiny_config):
    cfg = ablation.variant_config(tiny_config, "w/o KFusion")
    assert not cfg.landmarks.use_kfusion
    assert cfg.landmarks.use_global and cfg.landmarks.use_context
    assert cfg.landmarks.head == "kan"

    cfg = ablation.variant_config(tiny_config, "w/o Context Domain")
    assert not cfg.landmarks.use_context

    mlp = ablation.variant_config(tiny_config, "with MLP")
    assert mlp.landmarks.head == "mlp"
    assert ablation.variant_config(mlp, "with KAN").landmarks.head == "kan"
    assert tiny_config.landmarks.head == "kan"


def test_slug():
    assert ablation._slug("w/o KFusion") == "w_o_kfusion"
    assert ablation._slug("with MLP") == "with_mlp"


def test_unknown_variant_before_training(tmp_path, synthetic_data, tiny_config):
    root, manifest = synthetic_data
    with pytest.raises(ValidationError):
        ablation.ablation(manifest, tiny_config, ["with KAN", "bogus"], root, tmp_path)
    assert not (tmp_path / "with_kan").exists()


@pytest.mark.slow
def test_ablation(tmp_path, synthetic_data, tiny_config):
    root, manifest = synthetic_data
    rows = ablation.ablation(manifest, tiny_config, tuple(ablation.VARIANTS), root, tmp_path)
    assert [row.variant for row in rows] == list(ablation.VARIANTS)
    for row in rows:
        assert math.isfinite(row.lmd) and row.lmd >= 0
        assert math.isfinite(row.m_lmd) and row.m_lmd >= 0
        assert math.isfinite(row.final_loss)
        assert row.parameters > 0
    by_name = {row.variant: row for row in rows}
    assert by_name["with KAN"].parameters != by_name["with MLP"].parameters
    assert by_name["w/o KFusion"].parameters != by_name["with KAN"].parameters
    for name in ablation.VARIANTS:
        assert (tmp_path / ablation._slug(name) / "checkpoints" / "landmarks_last.pt").exists()
    assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 6
    assert len(json.loads((tmp_path / "ablation.json").read_text())["rows"]) == 5
    assert (tmp_path / "ablation.md").exists()
