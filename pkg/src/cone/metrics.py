"""Full-reference quality metrics, error maps and dataset reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio.images import ImageU8, quantize, write_image
from .ndgrad import ShapeError, Tensor

PSNR_TABLE_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_CONVENTION = (
    "SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, data range 1, "
    "valid window positions only, computed per RGB channel and averaged")


def _array(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)


def _pair(y, ref) -> tuple[np.ndarray, np.ndarray]:
    y, ref = _array(y), _array(ref)
    if y.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {y.shape} vs {ref.shape}")
    return np.clip(y, 0.0, 1.0), np.clip(ref, 0.0, 1.0)


def psnr(y, ref) -> float:
    """PSNR in dB for data range 1; ``math.inf`` when the images are identical."""
    y, ref = _pair(y, ref)
    mse = float(np.mean((y - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def _ssim_channel(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> float:
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(y, ref) -> float:
    y, ref = _pair(y, ref)
    if y.ndim == 2:
        y, ref = y[None], ref[None]
    if min(y.shape[1:]) < SSIM_WINDOW:
        raise ShapeError(
            f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {y.shape[1]}x{y.shape[2]}")
    g = gaussian_window()
    return float(np.mean([_ssim_channel(y[c], ref[c], g) for c in range(y.shape[0])]))


def error_map(y, ref, max_err: float = 0.5) -> ImageU8:
    """Channel-mean absolute error; 0 is black, ``max_err`` and above white."""
    y, ref = _pair(y, ref)
    err = np.abs(y - ref).mean(axis=0)
    return ImageU8(quantize(err / max_err)[:, :, None])


@dataclass
class ImageScore:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    method: str
    dataset: str
    rows: list[ImageScore] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        """Mean PSNR with infinite values capped at ``PSNR_TABLE_CAP``."""
        vals = [min(r.psnr_db, PSNR_TABLE_CAP) for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "convention": SSIM_CONVENTION,
            "images": [{"name": r.name,
                        "psnr_db": None if math.isinf(r.psnr_db) else r.psnr_db,
                        "ssim": r.ssim} for r in self.rows],
            "aggregate": {"count": len(self.rows), "psnr_db": self.mean_psnr,
                          "ssim": self.mean_ssim, "psnr_cap_db": PSNR_TABLE_CAP},
        }

    def write(self, out) -> tuple[Path, Path]:
        """Write ``<out>.csv`` and ``<out>.json``; returns both paths."""
        out = Path(out)
        base = out.with_suffix("") if out.suffix.lower() in (".csv", ".json") else out
        csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r.name, "inf" if math.isinf(r.psnr_db) else repr(r.psnr_db),
                            repr(r.ssim)])
        json_path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return csv_path, json_path


def eval_dataset(checkpoint, dataset, error_map_dir=None, max_err: float = 0.5,
                 method: str | None = None) -> EvalReport:
    """Enhance every paired test image with the checkpoint and score it."""
    from . import iem
    from .optim import enhance
    from .imageio.dataset import DatasetError

    entries = dataset.paired()
    if not entries:
        raise DatasetError(f"{dataset.root}: no reference images; full-reference metrics need test/high")
    label = method or f"{checkpoint.mode}:{checkpoint.variant.value}"
    report = EvalReport(label, str(dataset.root))
    if error_map_dir is not None:
        Path(error_map_dir).mkdir(parents=True, exist_ok=True)
    for e in entries:
        x, ref = e.load_low(), e.load_high()
        t = iem.infer_illumination(x, checkpoint.enh)
        y = enhance(x, t, checkpoint.crf, checkpoint.mode)
        report.rows.append(ImageScore(e.name, psnr(y, ref), ssim(y, ref)))
        if error_map_dir is not None:
            write_image(error_map(y, ref, max_err), Path(error_map_dir) / f"{e.name}_err.png")
    return report
