import json
import math

import pytest

from talkfast import dtypes
from talkfast import format
from talkfast.metrics import MetricReport


def _timing(label="Ours (step = 8)", seconds=0.5):
    return dtypes.TimingRecord(label, seconds, 30 / seconds, 8, 5, 30, std=0.01)


def _ablation():
    return [
        dtypes.AblationRow("with KAN", 1.5, 2.0, 0.01, 1000),
        dtypes.AblationRow("with MLP", 3.0, 4.0, 0.02, 900),
    ]


def _lines(text):
    return text.splitlines()


def test_format_to_enum():
    assert format.Format.to_enum("CSV") is format.Format.CSV
    assert format.Format.to_enum("markdown") is format.Format.MARKDOWN
    assert format.Format.to_enum(format.Format.JSON) is format.Format.JSON
    with pytest.raises(ValueError) as exc:
        format.Format.to_enum("xml")
    assert "Unsupported format" in str(exc.value)


def test_rows_validation():
    with pytest.raises(TypeError):
        format.CSV([1.0])
    with pytest.raises(TypeError):
        format.CSV([_timing(), _ablation()[0]])
    with pytest.raises(ValueError):
        format.CSV([])


def test_csv():
    csv = format.rows_as(_ablation(), "csv")
    assert isinstance(csv, format.CSV)
    header, *rows = _lines(csv.resource())
    assert header.split(",") == list(format._ABLATION_MAPPING)
    assert len(rows) == 2
    assert rows[0].split(",")[0] == "with KAN"
    assert len(_lines(csv.resource(append=True))) == 2


def test_markdown():
    markdown = format.rows_as(_timing(), "markdown")
    assert isinstance(markdown, format.Markdown)
    header, separator, row = _lines(markdown.resource())
    header_columns = [h.strip() for h in header.split("|")][1:-1]
    assert header_columns == list(format._TIMING_MAPPING)
    assert len([h.strip() for h in separator.split("|")][1:-1]) == len(header_columns)
    row_columns = [h.strip() for h in row.split("|")][1:-1]
    assert row_columns[0] == "Ours (step = 8)"
    assert row_columns[1] == "0.5000"
    assert len(_lines(markdown.resource(append=True))) == 1


def test_markdown_missing_values():
    report = MetricReport(20.0, 0.5)
    row = _lines(format.Markdown(report).resource())[2]
    assert [c.strip() for c in row.split("|")][1:-1][2] == "-"


def test_json():
    resource = format.rows_as(_timing(), "json").resource()
    assert list(resource) == ["rows"]
    assert resource["rows"][0]["steps"] == 8
    assert resource["rows"][0]["frames_per_clip"] == 30


def test_save_append(tmp_path):
    for style, suffix in (("csv", ".csv"), ("markdown", ".md")):
        path = tmp_path / f"timing{suffix}"
        format.rows_as(_timing(), style).save(path)
        format.rows_as(_timing("Ours (step = 4)"), style).save(path)
        assert len(path.read_text().splitlines()) == (3 if style == "csv" else 4)
        with pytest.raises(FileExistsError):
            format.rows_as(_timing(), style).save(path, append=False)

    path = tmp_path / "timing.json"
    format.JSON(_timing()).save(path)
    format.JSON(_timing("Ours (step = 4)")).save(path)
    data = json.loads(path.read_text())
    assert [r["label"] for r in data["rows"]] == ["Ours (step = 8)", "Ours (step = 4)"]


def test_save_rows_replaces(tmp_path):
    format.save_rows(_ablation(), tmp_path, "ablation", ("csv", "json", "markdown"))
    written = format.save_rows(_ablation()[:1], tmp_path, "ablation", ("csv", "json", "markdown"))
    assert sorted(p.name for p in written) == ["ablation.csv", "ablation.json", "ablation.md"]
    assert len(json.loads((tmp_path / "ablation.json").read_text())["rows"]) == 1
    assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 2


def test_plot(tmp_path):
    pytest.importorskip("matplotlib")
    plot = format.rows_as(_ablation(), "plot", column="LMD")
    assert isinstance(plot, format.Plot)
    plot.save(tmp_path / "ablation.png")
    assert (tmp_path / "ablation.png").stat().st_size > 0
    with pytest.raises(ValueError):
        format.Plot(_ablation(), column="Accuracy")


def test_plot_handles_nan(tmp_path):
    pytest.importorskip("matplotlib")
    rows = [dtypes.AblationRow("a", math.nan, 1.0)]
    format.save_rows(rows, tmp_path, "nan", ("plot",))
    assert (tmp_path / "nan.png").exists()
