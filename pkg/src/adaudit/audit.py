"""Descriptive exposure audit: coverage and intensity per demographic level.

The unit of analysis is the active user-week: a (user, 7-day window) pair
with at least three ads of any category.  Windows are counted from midnight
UTC of the earliest impression in the dataset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .categories import ATTRIBUTES, LEVELS, PREFER_NOT_TO_SAY

WEEK_SECONDS = 7 * 24 * 3600
ACTIVE_MIN_ADS = 3
DEFAULT_TARGETS = ("Gambling", "Politics", "Alcohol", "Education and Careers")
REPORT_COLUMNS = ("attribute", "level", "category", "coverage", "avg_intensity", "n_active_user_weeks")


def window_index(timestamp: int, epoch: int) -> int:
    if timestamp < epoch:
        raise ValueError(f"timestamp {timestamp} precedes epoch {epoch}")
    return (int(timestamp) - int(epoch)) // WEEK_SECONDS


def dataset_epoch(impressions) -> int:
    """Midnight UTC of the earliest impression."""
    first = min(imp.timestamp for imp in impressions)
    return first - first % 86400


@dataclass
class ExposureCell:
    user_id: str
    week_index: int
    total_ads: int = 0
    category_counts: dict[str, int] = field(default_factory=dict)

    @property
    def active(self) -> bool:
        return self.total_ads >= ACTIVE_MIN_ADS

    def count(self, category: str) -> int:
        return self.category_counts.get(category, 0)

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "week_index": self.week_index,
            "total_ads": self.total_ads,
            "category_counts": dict(sorted(self.category_counts.items())),
        }

    @classmethod
    def from_json(cls, obj) -> "ExposureCell":
        return cls(obj["user_id"], int(obj["week_index"]), int(obj["total_ads"]),
                   {k: int(v) for k, v in obj["category_counts"].items()})


def build_cells(impressions, features, epoch: int | None = None) -> list[ExposureCell]:
    """One cell per (user, week) with at least one impression, sorted.

    ``features`` maps ad_id to an object with ``iab_categories``.  Ads without
    features count toward ``total_ads`` only.
    """
    impressions = list(impressions)
    if not impressions:
        return []
    if epoch is None:
        epoch = dataset_epoch(impressions)
    cells: dict[tuple[str, int], ExposureCell] = {}
    for imp in impressions:
        key = (imp.user_id, window_index(imp.timestamp, epoch))
        cell = cells.get(key)
        if cell is None:
            cell = cells[key] = ExposureCell(*key)
        cell.total_ads += 1
        f = features.get(imp.ad_id)
        if f is not None:
            for cat in f.iab_categories:
                cell.category_counts[cat] = cell.category_counts.get(cat, 0) + 1
    return [cells[k] for k in sorted(cells)]


@dataclass(frozen=True)
class ExposureSummary:
    attribute: str
    level: str
    category: str
    coverage: float
    avg_intensity: float
    n_active_user_weeks: int

    @property
    def empty(self) -> bool:
        return self.n_active_user_weeks == 0

    def row(self) -> dict:
        fmt = (lambda v: "" if math.isnan(v) else f"{v:.6f}")
        return {
            "attribute": self.attribute,
            "level": self.level,
            "category": self.category,
            "coverage": fmt(self.coverage),
            "avg_intensity": fmt(self.avg_intensity),
            "n_active_user_weeks": self.n_active_user_weeks,
        }


def coverage(cells, attribute: str, level: str, category: str, profiles) -> ExposureSummary:
    """Coverage and mean intensity over active user-weeks in one level.

    An empty level (no active user-weeks) gives NaN metrics; check ``empty``.
    """
    if attribute not in LEVELS:
        raise KeyError(f"unknown attribute {attribute!r}")
    if level not in LEVELS[attribute]:
        raise KeyError(f"unknown level {level!r} for {attribute}")
    n = hits = total = 0
    for cell in cells:
        if not cell.active:
            continue
        prof = profiles.get(cell.user_id)
        if prof is None or prof.get(attribute) != level:
            continue
        c = cell.count(category)
        n += 1
        total += c
        hits += c >= 1
    if n == 0:
        return ExposureSummary(attribute, level, category, math.nan, math.nan, 0)
    return ExposureSummary(attribute, level, category, hits / n, total / n, n)


def summarize(cells, profiles, categories=DEFAULT_TARGETS, include_pnts: bool = True) -> list[ExposureSummary]:
    """Every (attribute, level, category) summary in canonical order."""
    out = []
    for attr in ATTRIBUTES:
        for level in LEVELS[attr]:
            if level == PREFER_NOT_TO_SAY and not include_pnts:
                continue
            for cat in categories:
                out.append(coverage(cells, attr, level, cat, profiles))
    return out


def write_report(path, summaries) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in summaries:
            w.writerow(s.row())


def write_cells(path, cells) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for c in cells:
            fh.write(json.dumps(c.to_json(), sort_keys=True) + "\n")


def read_cells(path) -> list[ExposureCell]:
    with Path(path).open(encoding="utf-8") as fh:
        return [ExposureCell.from_json(json.loads(line)) for line in fh if line.strip()]
