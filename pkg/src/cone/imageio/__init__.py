"""Image codecs, dataset scanning and checkpoint files."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import Dataset, DatasetError, Entry, scan_dataset
from .images import (
    ImageFormatError,
    ImageU8,
    from_tensor,
    load_image,
    quantize,
    save_image,
    to_tensor,
    write_image,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "Dataset",
    "DatasetError",
    "Entry",
    "ImageFormatError",
    "ImageU8",
    "from_tensor",
    "load_checkpoint",
    "load_image",
    "quantize",
    "save_checkpoint",
    "save_image",
    "scan_dataset",
    "to_tensor",
    "write_image",
]
