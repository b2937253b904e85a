import logging
import math
import statistics
import time
from enum import Enum
from functools import cached_property
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional

logger = logging.getLogger(__name__)

DEFAULT_LABEL = "Ours (step = 8)"


class TimeUnit(Enum):
    """Unit of time, valued by its length in seconds."""

    MS = 1e-3
    S = 1.0
    M = 60.0


class Stats(object):
    """Per-clip wall times of a generation run.

    Every entry of `times` is the time it took to turn one clip of audio
    (one second, `frames_per_clip` frames) into frames.

    Has the following statistics:

        - times
        - repetitions
        - total
        - mean | seconds_per_clip
        - std
        - fps
        - throughput (clips per second)
        - minimum | percentile_0th
        - percentile_5th
        - median | percentile_50th
        - percentile_95th
        - maximum | percentile_100th

    Args:
        times (List[float]): Per-clip times in seconds, warmups first.
        label (str, optional): Row label in timing tables. Defaults to `"Ours (step = 8)"`.
        warmups (int, optional): Leading entries excluded from the statistics. Defaults to 0.
        frames_per_clip (int, optional): Frames produced per clip. Defaults to 30.
        steps (int, optional): Sampler steps per clip. Defaults to 8.
        timestamp (Optional[float], optional): Defaults to `time.time()`.
    """

    def __init__(
        self,
        times: List[float],
        label: str = DEFAULT_LABEL,
        warmups: int = 0,
        frames_per_clip: int = 30,
        steps: int = 8,
        timestamp: Optional[float] = None,
    ):
        if warmups >= len(times):
            raise ValueError(
                f"warmups >= len(times)={len(times)} ! No timing data will be available."
            )
        self._times = list(times)
        self._warmups = warmups
        self._label = label
        self._frames_per_clip = frames_per_clip
        self._steps = steps
        self._timestamp = time.time() if timestamp is None else timestamp
        self._unit = TimeUnit.S

    @property
    def raw_times(self) -> List[float]:
        """Times including the warmup runs."""
        return self._times

    @property
    def times(self) -> List[float]:
        """Times without the warmup runs. All statistics use these."""
        return self.raw_times[self.warmups :]

    @property
    def warmups(self) -> int:
        return self._warmups

    @property
    def label(self) -> str:
        return self._label

    @property
    def frames_per_clip(self) -> int:
        return self._frames_per_clip

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def timestamp(self) -> float:
        return self._timestamp

    @property
    def unit(self) -> TimeUnit:
        return self._unit

    @cached_property
    def minimum(self) -> float:
        return min(self.times)

    @cached_property
    def maximum(self) -> float:
        return max(self.times)

    @cached_property
    def mean(self) -> float:
        return statistics.mean(self.times)

    @cached_property
    def std(self) -> float:
        if self.repetitions < 2:
            return 0.0
        return statistics.stdev(self.times)

    @cached_property
    def median(self) -> float:
        return statistics.median(self.times)

    @cached_property
    def repetitions(self) -> int:
        return len(self.times)

    @cached_property
    def total(self) -> float:
        return sum(self.times)

    @property
    def seconds_per_clip(self) -> float:
        """Mean time per clip in `unit`."""
        return self.mean

    @cached_property
    def throughput(self) -> float:
        """Clips per `unit`. `math.nan` if `total == 0`."""
        if self.total == 0.0:
            return math.nan
        return self.repetitions / self.total

    @cached_property
    def fps(self) -> float:
        """Generated frames per second of wall time, independent of `unit`.

        Note: This is `math.nan` if no time was measured.
        """
        seconds = self.total * self.unit.value
        if seconds == 0.0:
            return math.nan
        return self.repetitions * self.frames_per_clip / seconds

    def percentile(self, p: float) -> float:
        """Linearly interpolated percentile, `p` in [0, 1]."""
        if not isinstance(p, float) or not (0.0 <= p <= 1.0):
            raise ValueError("p must be a float in the range [0.0; 1.0]")
        times = sorted(self.times)
        k = (len(times) - 1) * p
        f, c = int(math.floor(k)), int(math.ceil(k))
        if f == c:
            return times[f]
        return times[f] * (c - k) + times[c] * (k - f)

    @property
    def percentile_0th(self) -> float:
        return self.minimum

    @cached_property
    def percentile_5th(self) -> float:
        return self.percentile(0.05)

    @property
    def percentile_50th(self) -> float:
        return self.median

    @cached_property
    def percentile_95th(self) -> float:
        return self.percentile(0.95)

    @property
    def percentile_100th(self) -> float:
        return self.maximum

    def validate(self) -> List[str]:
        """Flags unstable timings: a standard deviation above 10% of the mean,
        or fewer than three measured clips. Warnings are logged and returned.
        """
        warnings = []
        if self.repetitions < 3:
            warnings.append(f"only {self.repetitions} clip(s) were timed")
        if self.repetitions >= 2 and self.mean > 0:
            percent = self.std * 100.0 / self.mean
            if percent >= 10.0:
                warnings.append(
                    f"the standard deviation ({self.std}) is {percent:.1f}% of the mean ({self.mean})"
                )
        for warning in warnings:
            logger.warning("timing of %r may be unstable: %s", self.label, warning)
        return warnings

    def to_unit(self, unit: TimeUnit) -> "Stats":
        """Converts the times to `unit` in place.

        Note: This invalidates all cached properties!
        """
        if unit != self.unit:
            self._invalidate_cache()
            factor = self.unit.value / unit.value
            self._times = [t * factor for t in self._times]
            self._unit = unit
        return self

    def to_milliseconds(self) -> "Stats":
        return self.to_unit(TimeUnit.MS)

    def to_seconds(self) -> "Stats":
        return self.to_unit(TimeUnit.S)

    def _invalidate_cache(self) -> None:
        for name, attr in vars(type(self)).items():
            if isinstance(attr, cached_property):
                self.__dict__.pop(name, None)


class TimingRecord(NamedTuple):
    """One row of a generation speed table.

    Args:
        label (str): Method label, e.g. `"Ours (step = 8)"`.
        seconds_per_clip (float): Mean wall seconds per one-second clip.
        fps (float): Generated frames per wall second.
        steps (int): Sampler steps per clip.
        clips (int): Timed clips.
        frames_per_clip (int): Frames per clip.
        std (float): Standard deviation of the per-clip seconds.
        device (str): Torch device the run used.
        system (Dict[str, Any]): Host statistics.
    """

    label: str
    seconds_per_clip: float
    fps: float
    steps: int
    clips: int
    frames_per_clip: int
    std: float = 0.0
    device: str = "cpu"
    system: Dict[str, Any] = {}

    @classmethod
    def from_stats(
        cls, stats: Stats, device: str = "cpu", system: Optional[Dict[str, Any]] = None
    ) -> "TimingRecord":
        stats.to_seconds()
        return cls(
            label=stats.label,
            seconds_per_clip=stats.seconds_per_clip,
            fps=stats.fps,
            steps=stats.steps,
            clips=stats.repetitions,
            frames_per_clip=stats.frames_per_clip,
            std=stats.std,
            device=str(device),
            system=dict(system or {}),
        )

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._asdict())


class AblationRow(NamedTuple):
    """Landmark accuracy of one trained generator variant.

    Args:
        variant (str): Variant name, e.g. `"w/o Global Domain"`.
        lmd (float): Mean landmark distance over all points, pixels.
        m_lmd (float): Mean landmark distance over the mouth points, pixels.
        final_loss (float): Training loss of the last epoch.
        parameters (int): Trainable parameters of the generator.
    """

    variant: str
    lmd: float
    m_lmd: float
    final_loss: float = float("nan")
    parameters: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._asdict())
