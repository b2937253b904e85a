import timeit
from typing import Any
from typing import Callable
from typing import Dict
from typing import Optional
from typing import Tuple

import torch

from talkfast.dtypes import DEFAULT_LABEL
from talkfast.dtypes import Stats


def _synchronized(fn: Callable, device: Optional[torch.device]) -> Callable:
    """Wraps `fn` so that queued CUDA work is finished before the timer stops."""
    if device is None or torch.device(device).type != "cuda":
        return fn

    def call():
        fn()
        torch.cuda.synchronize(device)

    return call


def _wrap(fn: Callable, args: Tuple[Any, ...] = (), kwargs: Optional[Dict[str, Any]] = None) -> Callable:
    if args or kwargs:
        return lambda: fn(*args, **(kwargs or {}))
    return fn


def benchit(
    fn: Callable,
    repetitions: int,
    warmups: int = 1,
    fn_args: Tuple[Any, ...] = (),
    fn_kwargs: Optional[Dict[str, Any]] = None,
    label: str = DEFAULT_LABEL,
    frames_per_clip: int = 30,
    steps: int = 8,
    device: Optional[torch.device] = None,
) -> Stats:
    """Times `repetitions` calls of `fn`, each generating one clip, after `warmups` discarded calls.

    **Note**: `timeit` turns off garbage collection while timing. On CUDA
    devices every call is followed by a synchronization so the measured
    time covers the kernels it launched.

    Args:
        fn (Callable): Generates one clip per call.
        repetitions (int): Number of timed calls.
        warmups (int, optional): Untimed calls before measuring. Defaults to 1.
        fn_args (Tuple[Any, ...], optional): Positional arguments passed to `fn`.
        fn_kwargs (Optional[Dict[str, Any]], optional): Keyword arguments passed to `fn`.
        label (str, optional): Row label. Defaults to `"Ours (step = 8)"`.
        frames_per_clip (int, optional): Frames produced per call. Defaults to 30.
        steps (int, optional): Sampler steps per call. Defaults to 8.
        device (Optional[torch.device], optional): Device to synchronize.

    Returns:
        dtypes.Stats: Per-clip times in seconds.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be positive, got {repetitions}")
    call = _synchronized(_wrap(fn, fn_args, fn_kwargs), device)
    timer = timeit.Timer(stmt=call)
    times = timer.repeat(repetitions + warmups, 1)
    return Stats(times, label, warmups, frames_per_clip=frames_per_clip, steps=steps)


def single_shot(fn: Callable, **kwargs) -> Stats:
    """Times one cold call of `fn`: no warmup, one repetition."""
    kwargs.setdefault("warmups", 0)
    return benchit(fn, 1, **kwargs)


def throughput(
    fn: Callable,
    min_repetitions: int = 1,
    min_seconds: float = 1.0,
    warmups: int = 1,
    fn_args: Tuple[Any, ...] = (),
    fn_kwargs: Optional[Dict[str, Any]] = None,
    label: str = DEFAULT_LABEL,
    frames_per_clip: int = 30,
    steps: int = 8,
    device: Optional[torch.device] = None,
) -> Stats:
    """Like `benchit`, but keeps calling `fn` until at least `min_repetitions`
    calls and `min_seconds` of measured time have accumulated.
    """
    call = _synchronized(_wrap(fn, fn_args, fn_kwargs), device)
    timer = timeit.Timer(stmt=call)
    times = []
    total, repetitions = 0.0, 0
    while total < min_seconds or repetitions < min_repetitions:
        elapsed = timer.timeit(1)
        times.append(elapsed)
        if len(times) <= warmups:
            continue
        total += elapsed
        repetitions += 1
    return Stats(times, label, warmups, frames_per_clip=frames_per_clip, steps=steps)


def time_call(fn: Callable, *args, device: Optional[torch.device] = None, **kwargs):
    """Runs `fn(*args, **kwargs)` once and returns `(result, seconds)`."""
    start = timeit.default_timer()
    result = fn(*args, **kwargs)
    if device is not None and torch.device(device).type == "cuda":
        torch.cuda.synchronize(device)
    return result, timeit.default_timer() - start
