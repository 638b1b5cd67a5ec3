"""Import external transformer checkpoints into the pruning tool's bundle format."""

from .convert import LLAMA_LIKE, PROFILES, NameMap, Truncation, convert
from .reader import CheckpointError, CheckpointReader, SafetensorsFile
from .writer import write_bundle

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CheckpointReader",
    "LLAMA_LIKE",
    "NameMap",
    "PROFILES",
    "SafetensorsFile",
    "Truncation",
    "convert",
    "write_bundle",
]
