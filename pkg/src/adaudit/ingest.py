"""Parsing, cleaning and filtering of impression logs and profile files."""

from __future__ import annotations

import csv
import html
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .categories import ATTRIBUTES, PROFILE_COLUMNS, canonical


class IngestError(ValueError):
    """Base class for input-file problems."""


class SchemaError(IngestError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class MalformedRowError(IngestError):
    def __init__(self, message: str, row: int):
        self.row = row
        super().__init__(f"row {row}: {message}")


class UnknownCategoryError(IngestError):
    def __init__(self, field_name: str, row: int, value: str):
        self.field = field_name
        self.row = row
        self.value = value
        super().__init__(f"row {row}: unknown {field_name} value {value!r}")


class DuplicateUserError(IngestError):
    def __init__(self, user_id: str, row: int):
        self.user_id = user_id
        self.row = row
        super().__init__(f"row {row}: duplicate user_id {user_id!r}")


@dataclass(frozen=True)
class AdImpression:
    user_id: str
    timestamp: int
    ad_id: str
    source: str
    title: str = ""
    body: str = ""
    image_refs: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "timestamp": self.timestamp,
            "ad_id": self.ad_id,
            "source": self.source,
            "title": self.title,
            "body": self.body,
            "image_refs": list(self.image_refs),
        }


@dataclass(frozen=True)
class DemographicProfile:
    user_id: str
    gender: str
    age: str
    income: str
    education: str
    employment: str
    party: str

    def get(self, attribute: str) -> str:
        return getattr(self, attribute)

    def to_row(self) -> dict:
        return {"user_id": self.user_id, **{PROFILE_COLUMNS[a]: self.get(a) for a in ATTRIBUTES}}


@dataclass
class CohortDataset:
    impressions: list[AdImpression]
    profiles: dict[str, DemographicProfile]
    counts: dict[str, int] = field(default_factory=dict)

    def by_user(self) -> dict[str, list[AdImpression]]:
        out: dict[str, list[AdImpression]] = {}
        for imp in self.impressions:
            out.setdefault(imp.user_id, []).append(imp)
        return out


_TAG = re.compile(r"<!--.*?-->|<[A-Za-z/!?][^<>]*>", re.S)
_WS = re.compile(r"\s+")


def strip_html(text: str) -> str:
    """Remove tags, decode entities and collapse whitespace.

    Decoding can surface new tag-like text (``&lt;b&gt;``), so the scan
    repeats until the string stops changing; that makes the function
    idempotent.
    """
    prev = None
    out = text
    while out != prev:
        prev = out
        out = _TAG.sub(" ", out)
        out = html.unescape(out)
        out = _WS.sub(" ", out).strip()
    return out


_MANDATORY = ("user_id", "timestamp", "source")


def parse_timestamp(value) -> int:
    """UTC seconds since epoch, sub-second part truncated."""
    if isinstance(value, bool):
        raise ValueError("boolean is not a timestamp")
    if isinstance(value, (int, float)):
        ts = float(value)
    else:
        text = str(value).strip()
        try:
            ts = float(text)
        except ValueError:
            if text.endswith(("Z", "z")):
                text = text[:-1] + "+00:00"
            dt = datetime.fromisoformat(text)
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            ts = dt.timestamp()
    if not (ts == ts) or ts in (float("inf"), float("-inf")):
        raise ValueError("timestamp is not finite")
    if ts < 0:
        raise ValueError("timestamp is negative")
    return int(ts)


def _image_refs(value) -> tuple[str, ...]:
    if value is None or value == "":
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    text = str(value).strip()
    if text.startswith("["):
        return tuple(str(v) for v in json.loads(text))
    return tuple(part for part in text.split("|") if part)


def _record(row: dict, rownum: int) -> AdImpression:
    for key in _MANDATORY:
        if key not in row:
            raise SchemaError(f"missing mandatory column {key!r}", rownum)
        if row[key] is None or str(row[key]).strip() == "":
            raise MalformedRowError(f"empty {key}", rownum)
    try:
        ts = parse_timestamp(row["timestamp"])
        refs = _image_refs(row.get("image_refs"))
    except (ValueError, TypeError) as exc:
        raise MalformedRowError(str(exc), rownum) from exc
    user = str(row["user_id"]).strip()
    ad_id = str(row.get("ad_id") or "").strip() or f"{user}:{ts}:{rownum}"
    return AdImpression(
        user_id=user,
        timestamp=ts,
        ad_id=ad_id,
        source=str(row["source"]).strip(),
        title=strip_html(str(row.get("title") or "")),
        body=strip_html(str(row.get("body") or "")),
        image_refs=refs,
    )


def parse_impressions(path, format: str | None = None) -> list[AdImpression]:
    """Read impressions from JSONL or CSV, in file order.

    ``format`` defaults to the file suffix.  Rows are numbered from 1
    (data rows only, the CSV header is not counted).
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    out: list[AdImpression] = []
    if fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            rownum = 0
            for line in fh:
                if not line.strip():
                    continue
                rownum += 1
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRowError(f"invalid JSON ({exc.msg})", rownum) from exc
                if not isinstance(row, dict):
                    raise MalformedRowError("expected a JSON object", rownum)
                out.append(_record(row, rownum))
    elif fmt == "csv":
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return out
            missing = [k for k in _MANDATORY if k not in reader.fieldnames]
            if missing:
                raise SchemaError(f"missing mandatory column(s) {missing}")
            for rownum, row in enumerate(reader, start=1):
                if None in row:
                    raise MalformedRowError("too many fields", rownum)
                out.append(_record(row, rownum))
    else:
        raise ValueError(f"unsupported impressions format {fmt!r}")
    return out


def filter_source(impressions, keep: str) -> list[AdImpression]:
    if not keep:
        raise ValueError("keep must be a non-empty platform tag")
    k = keep.casefold()
    return [imp for imp in impressions if imp.source.casefold() == k]


def load_profiles(path) -> dict[str, DemographicProfile]:
    path = Path(path)
    profiles: dict[str, DemographicProfile] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        needed = ["user_id"] + [PROFILE_COLUMNS[a] for a in ATTRIBUTES]
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"profiles file missing column(s) {missing}")
        for rownum, row in enumerate(reader, start=1):
            user = (row["user_id"] or "").strip()
            if not user:
                raise MalformedRowError("empty user_id", rownum)
            if user in profiles:
                raise DuplicateUserError(user, rownum)
            values = {}
            for attr in ATTRIBUTES:
                raw = row[PROFILE_COLUMNS[attr]] or ""
                label = canonical(attr, raw)
                if label is None:
                    raise UnknownCategoryError(attr, rownum, raw)
                values[attr] = label
            profiles[user] = DemographicProfile(user_id=user, **values)
    return profiles


def write_profiles(path, profiles) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, ["user_id"] + [PROFILE_COLUMNS[a] for a in ATTRIBUTES])
        writer.writeheader()
        for user in sorted(profiles):
            writer.writerow(profiles[user].to_row())


def write_impressions(path, impressions) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for imp in impressions:
            fh.write(json.dumps(imp.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def build_cohort(impressions, profiles, keep_source: str = "facebook") -> CohortDataset:
    """Source-filter, drop users without a profile, and sort per user.

    Sorting is stable on (user_id, timestamp) so equal timestamps keep file
    order.
    """
    kept = filter_source(impressions, keep_source)
    with_profile = [imp for imp in kept if imp.user_id in profiles]
    ordered = sorted(with_profile, key=lambda imp: (imp.user_id, imp.timestamp))
    users = {imp.user_id for imp in ordered}
    counts = {
        "impressions_raw": len(impressions),
        "impressions_after_source_filter": len(kept),
        "impressions_without_profile": len(kept) - len(with_profile),
        "users_with_impressions": len(users),
    }
    return CohortDataset(
        impressions=ordered,
        profiles={u: profiles[u] for u in sorted(users)},
        counts=counts,
    )
