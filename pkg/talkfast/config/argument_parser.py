import argparse
from typing import List
from typing import Optional
from typing import Sequence


class Parser(object):
    """Command line of `talkfast`: global options plus one sub-command per pipeline step."""

    def __init__(self, prog: Optional[str] = "talkfast", usage: Optional[str] = None):
        self._parser = TalkfastParser(prog=prog, usage=usage)
        self._parser.add_argument("--config", help="YAML run configuration")
        self._parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry, e.g. --set train.epochs=5 (repeatable)",
        )
        self._parser.add_argument(
            "--log-level",
            default="INFO",
            choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        )
        self._commands = self._parser.add_subparsers(dest="command", metavar="command")
        self._commands.required = True

    def add_command(self, name: str, help: str) -> argparse.ArgumentParser:
        return self._commands.add_parser(name, help=help, description=help)

    def parse_args(self, args: Optional[Sequence[str]] = None) -> argparse.Namespace:
        return self._parser.parse_args(args)

    def error(self, message: str) -> None:
        self._parser.error(message)


class TalkfastParser(argparse.ArgumentParser):
    def __init__(self, prog=None, usage=None, **kwargs):
        super().__init__(prog=prog, usage=usage, allow_abbrev=False, **kwargs)


def build_parser() -> Parser:
    parser = Parser()

    cmd = parser.add_command("synth", "write a procedural synthetic raw dataset")
    cmd.add_argument("out_root")
    cmd.add_argument("--count", type=int, default=8)
    cmd.add_argument("--seconds", type=float, default=2.0)

    cmd = parser.add_command("ingest", "cut raw samples into clips and write the manifest")
    cmd.add_argument("raw_root")
    cmd.add_argument("out_root", nargs="?", help="defaults to paths.data_root")

    for stage in ("landmarks", "diffusion"):
        cmd = parser.add_command(f"train-{stage}", f"train the {stage} stage")
        cmd.add_argument("--data", help="ingested dataset root, defaults to paths.data_root")
        cmd.add_argument("--run-dir", help=f"defaults to <paths.output_dir>/{stage}")

    cmd = parser.add_command("infer", "generate frames from audio and an identity image")
    cmd.add_argument("--audio", required=True)
    cmd.add_argument("--identity", required=True, help="identity image")
    cmd.add_argument("--landmark-checkpoint", required=True)
    cmd.add_argument("--diffusion-checkpoint", required=True)
    cmd.add_argument("--identity-landmarks", help=".npy [P, 2] landmarks of the identity image")
    cmd.add_argument("--out", required=True)
    cmd.add_argument("--mux", action="store_true", help="also encode video.mp4 with ffmpeg")
    cmd.add_argument("--benchmark", type=int, default=0, metavar="N", help="time N extra clips")

    cmd = parser.add_command("evaluate", "score generated frames against ground truth")
    cmd.add_argument("--pred", required=True)
    cmd.add_argument("--gt", required=True)
    cmd.add_argument("--landmarks", help=".npz with 'pred' and 'gt' landmark arrays")
    cmd.add_argument("--features", default="pixels", help="FID feature extractor, 'none' to skip")
    cmd.add_argument("--out", help="directory for metrics.json and metrics.csv")

    cmd = parser.add_command("ablate", "train and score landmark generator variants")
    cmd.add_argument("--data", help="ingested dataset root, defaults to paths.data_root")
    cmd.add_argument("--variants", nargs="+", default=None)
    cmd.add_argument("--out")

    cmd = parser.add_command("render-mask", "write guide mask and noise field images for landmarks")
    cmd.add_argument("landmarks", help=".npy [F, P, 2] landmarks")
    cmd.add_argument("out_dir")
    cmd.add_argument("--seed", type=int, default=0)
    return parser


def parse(args: Optional[List[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(args)
