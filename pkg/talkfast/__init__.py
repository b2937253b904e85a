"""
talkfast: audio-driven talking-head generation with landmark-guided diffusion
"""
from talkfast import dtypes
from talkfast import exceptions
from talkfast.config import load_config
from talkfast.config import main


try:
    from talkfast._version import version as __version__
except ImportError:
    # broken installation, we don't even try
    __version__ = "unknown"

__all__ = [
    "dtypes",
    "exceptions",
    "load_config",
    "main",
    "__version__",
]
