"""Palette scoring and dataset filtering.

A training pair is scored by the spread of intensities inside its mask: the
score is the fraction of masked pixels whose intensity lies strictly within
one (population) standard deviation of the masked-region mean. Flat regions
score 0 and pairs are kept only when score > eta_p, which biases the kept set
toward informative, approximately normal appearance distributions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import check_image, check_mask

DEFAULT_ETA_P = 0.68
# thresholds matching mean +/- {0.5, 1, 1.5} std mass of a normal distribution
ETA_P_PRESETS = (0.38, 0.68, 0.86)

# Rec.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def intensity_map(img: np.ndarray) -> np.ndarray:
    """Scalar intensity in [0, 1] per pixel (Rec.601 luma)."""
    arr = check_image(img)
    return (arr.astype(np.float64) @ _LUMA).astype(np.float32)


@dataclass(frozen=True)
class PaletteRecord:
    pair_id: str
    score: float
    masked_pixel_count: int
    mean: float
    std: float
    degenerate: bool = False


def palette_score(intensity: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked pixels strictly within one std of the masked mean.

    An empty mask or a constant masked region scores 0 (the strict inequality
    is vacuously false when std is 0).
    """
    intensity = np.asarray(intensity, dtype=np.float64)
    mask = check_mask(mask)
    if intensity.shape != mask.shape:
        raise ValueError(f"intensity shape {intensity.shape} does not match mask shape {mask.shape}")
    values = intensity[mask]
    if values.size == 0:
        return 0.0
    mean = values.mean()
    std = values.std()  # population std: the mask is the whole population
    if std == 0.0:
        return 0.0
    return float(np.count_nonzero(np.abs(values - mean) < std) / values.size)


def score_pair(pair_id: str, img: np.ndarray, mask: np.ndarray) -> PaletteRecord:
    """Score one image/mask pair and capture the masked-region statistics."""
    values = intensity_map(img).astype(np.float64)[check_mask(mask)]
    count = int(values.size)
    mean = float(values.mean()) if count else 0.0
    std = float(values.std()) if count else 0.0
    degenerate = count == 0 or std == 0.0
    score = 0.0 if degenerate else float(np.count_nonzero(np.abs(values - mean) < std) / count)
    return PaletteRecord(pair_id=pair_id, score=score, masked_pixel_count=count,
                         mean=mean, std=std, degenerate=degenerate)


def filter_dataset(records: list[PaletteRecord], eta_p: float = DEFAULT_ETA_P) -> list[str]:
    """Keep pair ids whose score strictly exceeds eta_p, preserving order."""
    return [r.pair_id for r in records if r.score > eta_p]


def write_records_csv(records: list[PaletteRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["pair_id", "score", "masked_pixel_count", "mean", "std", "degenerate"])
        for r in records:
            writer.writerow([r.pair_id, f"{r.score:.9g}", r.masked_pixel_count,
                             f"{r.mean:.9g}", f"{r.std:.9g}", int(r.degenerate)])


def read_records_csv(path: str | Path) -> list[PaletteRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            records.append(PaletteRecord(
                pair_id=row["pair_id"], score=float(row["score"]),
                masked_pixel_count=int(row["masked_pixel_count"]),
                mean=float(row["mean"]), std=float(row["std"]),
                degenerate=bool(int(row["degenerate"])),
            ))
    return records
