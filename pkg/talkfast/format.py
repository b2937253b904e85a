import csv
import io
import json
import os
import pathlib
from abc import ABC
from abc import abstractmethod
from collections import OrderedDict
from enum import Enum
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

from talkfast import dtypes
from talkfast.metrics import MetricReport

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

_TIMING_MAPPING = OrderedDict(
    [
        ("Method", "label"),
        ("Seconds / Clip", "seconds_per_clip"),
        ("FPS", "fps"),
        ("Steps", "steps"),
        ("Clips", "clips"),
        ("Std", "std"),
        ("Device", "device"),
    ]
)  # Mapping of human readable name to dtypes.TimingRecord field

_METRIC_MAPPING = OrderedDict(
    [
        ("PSNR", "psnr"),
        ("SSIM", "ssim"),
        ("LMD", "lmd"),
        ("M-LMD", "m_lmd"),
        ("FID", "fid"),
        ("Samples", "samples"),
    ]
)  # Mapping of human readable name to metrics.MetricReport field

_ABLATION_MAPPING = OrderedDict(
    [
        ("Variant", "variant"),
        ("LMD", "lmd"),
        ("M-LMD", "m_lmd"),
        ("Final Loss", "final_loss"),
        ("Parameters", "parameters"),
    ]
)  # Mapping of human readable name to dtypes.AblationRow field

_MAPPINGS = {
    dtypes.TimingRecord: _TIMING_MAPPING,
    MetricReport: _METRIC_MAPPING,
    dtypes.AblationRow: _ABLATION_MAPPING,
}

Row = Union[dtypes.TimingRecord, MetricReport, dtypes.AblationRow]


class Format(Enum):
    """Enum of supported formatting types"""

    # Entries are duplicated to allow access by Format['markdown']
    # while retaining the upper case naming throughout the code.
    MARKDOWN = "markdown"
    markdown = "markdown"
    CSV = "csv"
    csv = "csv"
    JSON = "json"
    json = "json"
    PLOT = "plot"
    plot = "plot"

    @classmethod
    def to_enum(cls, str_or_format: Union[str, "Format"]) -> "Format":
        """Converts a `str` or `Format` to a `Format`.

        Raises:
            ValueError: If a string is passed that is not part of `Format`.
        """
        if isinstance(str_or_format, Format):
            return str_or_format
        elif any(f.value == str_or_format.lower() for f in Format):
            return Format[str_or_format.lower()]
        else:
            raise ValueError(
                f"Unsupported format: {str_or_format}. "
                f"Only supports Format or one of: {sorted({f.value for f in Format})}"
                " in UPPER or lower case."
            )


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class FormattedRows(ABC):
    """Base class for formatting result rows of one type.

    Args:
        rows (Union[Row, Sequence[Row]]): A `TimingRecord`, `MetricReport` or
            `AblationRow`, or a sequence of rows of one of these types.

    Raises:
        TypeError: If the rows are of an unsupported or mixed type.
    """

    def __init__(self, rows: Union[Row, Sequence[Row]]):
        if isinstance(rows, tuple(_MAPPINGS)):
            rows = [rows]
        rows = list(rows)
        if not rows:
            raise ValueError("nothing to format")
        kind = type(rows[0])
        if kind not in _MAPPINGS:
            raise TypeError(
                "rows have to be of type dtypes.TimingRecord, metrics.MetricReport or dtypes.AblationRow"
            )
        if any(type(r) is not kind for r in rows):
            raise TypeError("rows have to share one type")
        self._rows: List[Row] = rows
        self._mapping: "OrderedDict[str, str]" = _MAPPINGS[kind]

    @property
    def rows(self) -> List[Row]:
        return self._rows

    @property
    def header(self) -> List[str]:
        return list(self._mapping.keys())

    def values(self, row: Row) -> List[Any]:
        return [getattr(row, field) for field in self._mapping.values()]

    @abstractmethod
    def resource(self):
        """Returns a formatted version of `rows`."""
        pass

    @abstractmethod
    def save(self, file: Union[str, pathlib.Path]) -> None:
        """Saves `resource` to a file."""
        pass


def _open_mode(file: Union[str, pathlib.Path], append: bool):
    if not append and os.path.exists(file):
        raise FileExistsError(f"{file} already exists but 'append' is set to False")
    if append and os.path.exists(file):
        return "a", True
    return "w", False


class Markdown(FormattedRows):
    """Formats rows as a Markdown table."""

    def resource(self, append: bool = False) -> str:
        """Rows formatted as Markdown.

        Args:
            append (bool, optional): If True, the table rows come without a header.
                Defaults to False.
        """
        template = "| {} " * len(self._mapping) + "|"
        result = ""
        if not append:
            result += template.format(*self.header) + os.linesep
            result += "| --- " * len(self._mapping) + "|" + os.linesep
        for row in self.rows:
            result += template.format(*[_cell(v) for v in self.values(row)]) + os.linesep
        return result

    def save(self, file: Union[str, pathlib.Path], append: bool = True) -> None:
        """Saves the table, appending rows to an existing `file` if `append`.

        Raises:
            FileExistsError: If `append` is `False` but `file` already exists.
        """
        mode, append = _open_mode(file, append)
        with open(file, mode, newline="") as f:
            f.write(self.resource(append))


class CSV(FormattedRows):
    """Formats rows as CSV."""

    def resource(self, append: bool = False) -> str:
        csv_str = io.StringIO(newline="")
        writer = csv.writer(csv_str)
        if not append:
            writer.writerow(self.header)
        for row in self.rows:
            writer.writerow(["" if v is None else v for v in self.values(row)])
        return csv_str.getvalue()

    def save(self, file: Union[str, pathlib.Path], append: bool = True) -> None:
        """Saves the rows, appending to an existing `file` if `append`.

        Raises:
            FileExistsError: If `append` is `False` but `file` already exists.
        """
        mode, append = _open_mode(file, append)
        with open(file, mode, newline="") as f:
            f.write(self.resource(append))


class JSON(FormattedRows):
    """Formats rows as a JSON serializable dictionary `{"rows": [...]}`.

    Every row keeps all of its fields, not only the table columns.
    """

    def resource(self, append: bool = False) -> Union[Dict[str, Any], List[Dict[str, Any]]]:
        rows = [row.to_dict() for row in self.rows]
        return rows if append else {"rows": rows}

    def save(self, file: Union[str, pathlib.Path], append: bool = True) -> None:
        """Saves the rows, extending `rows` of an existing `file` if `append`.

        Raises:
            FileExistsError: If `append` is `False` but `file` already exists.
        """
        _, append = _open_mode(file, append)
        if append:
            with open(file, "r") as f:
                data = json.load(f)
            data["rows"].extend(self.resource(True))
        else:
            data = self.resource()
        with open(file, "w", newline="") as f:
            f.write(json.dumps(data, indent=2, sort_keys=True))


class Plot(FormattedRows):
    """Bar chart of one numeric column over the rows.

    Args:
        rows (Union[Row, Sequence[Row]]): Rows to plot.
        column (Optional[str], optional): Human readable column name. Defaults
            to the first numeric column.

    Raises:
        ImportError: If matplotlib is not installed.
    """

    def __init__(self, rows: Union[Row, Sequence[Row]], column: Optional[str] = None):
        if plt is None:
            raise ImportError(
                "Matplotlib is not installed. Cannot use plot backend! Run "
                '"pip install matplotlib" to use it.'
            )
        super().__init__(rows)
        label_column = self.header[0]
        if column is None:
            column = self.header[1]
        if column not in self._mapping:
            raise ValueError(f"Unknown column: {column}. Only supports one of: {self.header}")
        names = [_cell(getattr(r, self._mapping[label_column])) for r in self.rows]
        heights = [getattr(r, self._mapping[column]) for r in self.rows]
        heights = [float("nan") if h is None else float(h) for h in heights]

        self._fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 3.5))
        ax.bar(names, heights)
        ax.set_ylabel(column)
        ax.tick_params(axis="x", labelrotation=20)
        self._fig.tight_layout()

    def resource(self):
        return self._fig

    def save(self, file: Union[str, pathlib.Path]) -> None:
        self._fig.savefig(file)
        plt.close(self._fig)


def rows_as(rows: Union[Row, Sequence[Row]], style: Union[str, Format], **kwargs: Any) -> FormattedRows:
    """Formats `rows` in `style`, one of markdown, csv, json or plot."""
    style = Format.to_enum(style)
    if style is Format.CSV:
        return CSV(rows)
    elif style is Format.MARKDOWN:
        return Markdown(rows)
    elif style is Format.JSON:
        return JSON(rows)
    elif style is Format.PLOT:
        return Plot(rows, **kwargs)


def save_rows(
    rows: Union[Row, Sequence[Row]],
    out_dir: Union[str, pathlib.Path],
    stem: str,
    styles: Sequence[str] = ("csv", "json", "markdown"),
) -> List[pathlib.Path]:
    """Writes `rows` as `<stem>.csv`, `<stem>.json` and `<stem>.md` (and `<stem>.png`
    for `"plot"`, skipped without matplotlib), replacing existing files.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffixes = {Format.CSV: ".csv", Format.JSON: ".json", Format.MARKDOWN: ".md", Format.PLOT: ".png"}
    written = []
    for style in styles:
        style = Format.to_enum(style)
        if style is Format.PLOT and plt is None:
            continue
        path = out_dir / f"{stem}{suffixes[style]}"
        formatted = rows_as(rows, style)
        if style is Format.PLOT:
            formatted.save(path)
        else:
            path.unlink(missing_ok=True)
            formatted.save(path, append=False)
        written.append(path)
    return written
