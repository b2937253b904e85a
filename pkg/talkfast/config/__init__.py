"""
configuration and command line options
"""
import logging
import pathlib
import sys
from typing import List
from typing import Optional

from talkfast.config.argument_parser import build_parser
from talkfast.config.schema import RunConfig
from talkfast.config.schema import default_config
from talkfast.config.schema import load_config
from talkfast.config.schema import load_snapshot
from talkfast.config.schema import save_config
from talkfast.config.schema import validate_config
from talkfast.config.schema import with_overrides
from talkfast.exceptions import ValidationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


def _synth(args, config) -> None:
    from talkfast.data import write_synthetic_dataset

    write_synthetic_dataset(
        args.out_root,
        args.count,
        config.seed,
        args.seconds,
        config.data.image_size,
        config.data.fps,
        config.audio.num_emotions,
    )


def _ingest(args, config) -> None:
    from talkfast.data import ingest

    manifest = ingest(args.raw_root, args.out_root or config.paths.data_root, config)
    print(manifest.sample_counts())


def _train(stage):
    def run(args, config) -> None:
        from talkfast.data import load_manifest
        from talkfast.train import train_stage

        data_root = args.data or config.paths.data_root
        result = train_stage(stage, load_manifest(data_root), config, data_root, args.run_dir)
        print(result.checkpoint)

    return run


def _infer(args, config) -> None:
    from talkfast.data import mux_video
    from talkfast.format import save_rows
    from talkfast.infer import benchmark_inference
    from talkfast.infer import infer
    from talkfast.infer import load_identity_image
    from talkfast.infer import load_pipeline

    result = infer(
        args.audio,
        args.identity,
        args.landmark_checkpoint,
        args.diffusion_checkpoint,
        config,
        args.out,
        args.identity_landmarks,
    )
    if args.mux:
        mux_video(result.frame_dir, args.audio, pathlib.Path(args.out) / "video.mp4", config.data.fps)
    if args.benchmark:
        pipeline = load_pipeline(args.landmark_checkpoint, args.diffusion_checkpoint, config)
        image = load_identity_image(args.identity, config.data.image_size)
        record = benchmark_inference(pipeline, image, repetitions=args.benchmark)
        save_rows(record, args.out, "benchmark", ("json", "markdown"))
        print(f"{record.label}: {record.seconds_per_clip:.4f} s/clip, {record.fps:.2f} FPS")
    print(f"{result.frame_count} frames in {result.frame_dir}")


def _evaluate(args, config) -> None:
    from talkfast.format import save_rows
    from talkfast.metrics import evaluate_dirs

    features = None if args.features == "none" else args.features
    report = evaluate_dirs(
        args.pred,
        args.gt,
        args.landmarks,
        config.landmarks.mouth_indices,
        config.data.image_size,
        features,
    )
    out = args.out or args.pred
    save_rows(report, out, "metrics", ("json", "csv"))
    print(report.to_dict())


def _ablate(args, config) -> None:
    from talkfast.ablation import VARIANTS
    from talkfast.ablation import ablation
    from talkfast.data import load_manifest

    data_root = args.data or config.paths.data_root
    rows = ablation(load_manifest(data_root), config, args.variants or list(VARIANTS), data_root, args.out)
    for row in rows:
        print(f"{row.variant}: LMD {row.lmd:.4f} M-LMD {row.m_lmd:.4f}")


def _render_mask(args, config) -> None:
    import numpy as np
    import torch

    from talkfast.noise import render_fields

    points = torch.as_tensor(np.load(args.landmarks), dtype=torch.float32)
    if points.dim() == 2:
        points = points.unsqueeze(0)
    render_fields(
        points,
        args.out_dir,
        config.noise.kernel_size,
        config.noise.sigma,
        config.noise.delta,
        args.seed,
        config.data.image_size,
    )


_COMMANDS = {
    "synth": _synth,
    "ingest": _ingest,
    "train-landmarks": _train("landmarks"),
    "train-diffusion": _train("diffusion"),
    "infer": _infer,
    "evaluate": _evaluate,
    "ablate": _ablate,
    "render-mask": _render_mask,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Application entry point of the `talkfast` command."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        config = load_config(args.config, args.overrides)
        _COMMANDS[args.command](args, config)
    except (ValidationError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


__all__ = [
    "RunConfig",
    "default_config",
    "load_config",
    "load_snapshot",
    "save_config",
    "validate_config",
    "with_overrides",
    "main",
]


if __name__ == "__main__":
    sys.exit(main())
