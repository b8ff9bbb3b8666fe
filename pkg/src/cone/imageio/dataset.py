"""Dataset layout: ``root/{train,test}/low`` plus optional ``root/test/high``.

Low and reference images are paired by file stem. Entries are ordered by
the raw bytes of their file names so ordering is platform independent.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .images import is_image_file, load_image, to_tensor

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """Missing or malformed dataset directory."""


@dataclass(frozen=True)
class Entry:
    name: str
    low: Path
    high: Path | None = None

    def load_low(self):
        return to_tensor(load_image(self.low))

    def load_high(self):
        if self.high is None:
            raise DatasetError(f"{self.name}: no reference image")
        return to_tensor(load_image(self.high))


@dataclass(frozen=True)
class Dataset:
    root: Path
    split: str
    entries: tuple[Entry, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def has_references(self) -> bool:
        return any(e.high is not None for e in self.entries)

    def paired(self) -> tuple[Entry, ...]:
        return tuple(e for e in self.entries if e.high is not None)


def _listing(directory: Path) -> dict[str, Path]:
    files = sorted((p for p in directory.iterdir() if p.is_file() and is_image_file(p)),
                   key=lambda p: os.fsencode(p.name))
    out: dict[str, Path] = {}
    for p in files:
        if p.stem in out:
            raise DatasetError(f"{directory}: duplicate stem {p.stem!r}")
        out[p.stem] = p
    return out


def scan_dataset(root, split: str) -> Dataset:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    low_dir = root / split / "low"
    if not low_dir.is_dir():
        raise DatasetError(f"missing low-light directory {low_dir}")
    lows = _listing(low_dir)
    highs: dict[str, Path] = {}
    high_dir = root / split / "high"
    # references are never read for training
    if split == "test" and high_dir.is_dir():
        highs = _listing(high_dir)
        for stem in highs.keys() - lows.keys():
            logger.warning("reference %s has no low-light partner; skipped", highs[stem])
    entries = tuple(Entry(stem, path, highs.get(stem)) for stem, path in lows.items())
    return Dataset(root, split, entries)
