"""Structured per-ad features extracted by a model backend.

Each ad is turned into a caption, free-form style labels, one or more IAB
tier-1 categories from a closed taxonomy, and key entities.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .ingest import AdImpression
from .llm_client import EXTRACTION_SETTINGS, BackendRequest, LLMClient, parse_json_payload
from .prompts import Template, load_template

log = logging.getLogger(__name__)

DEFAULT_TAXONOMY_PATH = "<bundled>"
TAXONOMY_SIZE = 45


class FeatureValidationError(ValueError):
    def __init__(self, message: str, raw: str = ""):
        self.raw = raw
        super().__init__(message)


@dataclass(frozen=True)
class IabTaxonomy:
    entries: tuple[str, ...]
    version: str = ""

    def __post_init__(self):
        if len(self.entries) != TAXONOMY_SIZE:
            raise ValueError(f"taxonomy must have {TAXONOMY_SIZE} entries, got {len(self.entries)}")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("taxonomy entries must be unique")

    def __contains__(self, name) -> bool:
        return name in self.entries

    def resolve(self, label: str) -> str | None:
        """Map a model-produced label onto the taxonomy.

        Case-insensitive exact match first, then a unique prefix match in
        either direction ("Retailing" -> "Retail").  Anything else is None.
        """
        key = label.strip().casefold()
        if not key:
            return None
        for e in self.entries:
            if e.casefold() == key:
                return e
        hits = [e for e in self.entries if e.casefold().startswith(key) or key.startswith(e.casefold())]
        return hits[0] if len(hits) == 1 else None


def load_taxonomy(path=DEFAULT_TAXONOMY_PATH) -> IabTaxonomy:
    if path == DEFAULT_TAXONOMY_PATH:
        text = resources.files("adaudit").joinpath("data", "iab_tier1.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    version = ""
    entries = []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("#"):
            if line.lstrip("# ").startswith("version:"):
                version = line.split(":", 1)[1].strip()
            continue
        if line:
            entries.append(line)
    return IabTaxonomy(tuple(entries), version)


def _dedup(items) -> tuple[str, ...]:
    seen = []
    for x in items:
        if x not in seen:
            seen.append(x)
    return tuple(seen)


@dataclass(frozen=True)
class AdFeatures:
    ad_id: str
    caption: str
    descriptive_categories: tuple[str, ...]
    iab_categories: tuple[str, ...]
    key_entities: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "ad_id": self.ad_id,
            "caption": self.caption,
            "descriptive_category": list(self.descriptive_categories),
            "iab_category_tier_1": list(self.iab_categories),
            "key_entities_in_images_and_slogan": list(self.key_entities),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AdFeatures":
        return cls(
            ad_id=obj["ad_id"],
            caption=obj["caption"],
            descriptive_categories=tuple(obj["descriptive_category"]),
            iab_categories=tuple(obj["iab_category_tier_1"]),
            key_entities=tuple(obj["key_entities_in_images_and_slogan"]),
        )


def _str_list(obj, key, raw) -> list[str]:
    v = obj.get(key)
    if isinstance(v, str):
        v = [p for p in (s.strip() for s in v.split(",")) if p]
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise FeatureValidationError(f"{key} must be a list of strings", raw)
    return [x.strip() for x in v if x.strip()]


def validate_features(raw: str, taxonomy: IabTaxonomy, ad_id: str = "") -> AdFeatures:
    try:
        obj = parse_json_payload(raw)
    except (ValueError, json.JSONDecodeError) as exc:
        raise FeatureValidationError(f"unparseable structured output: {exc}", raw) from exc
    caption = obj.get("caption")
    if not isinstance(caption, str) or not caption.strip():
        raise FeatureValidationError("empty caption", raw)
    entities = _str_list(obj, "key_entities_in_images_and_slogan", raw)
    if not entities:
        raise FeatureValidationError("empty key_entities_in_images_and_slogan", raw)
    styles = _str_list(obj, "descriptive_category", raw) if "descriptive_category" in obj else []
    labels = _str_list(obj, "iab_category_tier_1", raw)
    if not labels:
        raise FeatureValidationError("empty iab_category_tier_1", raw)
    mapped = []
    for lab in labels:
        m = taxonomy.resolve(lab)
        if m is None:
            log.info("dropping out-of-taxonomy IAB label %r", lab)
        else:
            mapped.append(m)
    if not mapped:
        raise FeatureValidationError(f"no IAB label maps onto the taxonomy: {labels}", raw)
    return AdFeatures(
        ad_id=ad_id,
        caption=caption.strip(),
        descriptive_categories=_dedup(styles),
        iab_categories=_dedup(mapped),
        key_entities=_dedup(entities),
    )


REASK_SUFFIX = (
    "\n\nYour previous answer was rejected ({error}). "
    "Return only the JSON object described above, with a non-empty caption, "
    "non-empty key entities, and IAB categories taken from the list."
)


def render_feature_prompt(ad: AdImpression, taxonomy: IabTaxonomy, template: Template) -> str:
    images = " ".join(f"[image {k + 1}]" for k in range(len(ad.image_refs))) or "[no image]"
    return template.render(
        {
            "image(s)": images,
            "title": ad.title,
            "upper_texts_str": ad.body,
            "iab_list": "; ".join(taxonomy.entries),
        }
    )


def extract_features(ad: AdImpression, taxonomy: IabTaxonomy, client: LLMClient,
                     template: Template | None = None, settings=None) -> AdFeatures:
    """Extract, validate and (through the client cache) memoise ad features.

    One re-ask is made on a malformed or invalid response.
    """
    template = template or load_template("features")
    settings = dict(settings or EXTRACTION_SETTINGS)
    prompt = render_feature_prompt(ad, taxonomy, template)
    req = BackendRequest("features", prompt, tuple(ad.image_refs), settings)
    resp = client.call(req)
    try:
        return validate_features(resp.text, taxonomy, ad.ad_id)
    except FeatureValidationError as first:
        retry = BackendRequest("features", prompt + REASK_SUFFIX.format(error=first),
                               tuple(ad.image_refs), settings)
        resp2 = client.call(retry)
        try:
            return validate_features(resp2.text, taxonomy, ad.ad_id)
        except FeatureValidationError as second:
            raise FeatureValidationError(f"invalid after re-ask: {second}", resp2.text) from second


def extract_corpus(ads, taxonomy: IabTaxonomy, client: LLMClient, jobs: int = 1,
                   template: Template | None = None, settings=None) -> dict[str, AdFeatures]:
    """Features for every distinct ad_id; output is keyed and sorted by ad_id."""
    template = template or load_template("features")
    unique: dict[str, AdImpression] = {}
    for ad in ads:
        unique.setdefault(ad.ad_id, ad)
    ids = sorted(unique)

    def one(ad_id):
        return extract_features(unique[ad_id], taxonomy, client, template, settings)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(i) for i in ids]
    return dict(zip(ids, results))


def write_features(path, features: dict[str, AdFeatures]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ad_id in sorted(features):
            fh.write(json.dumps(features[ad_id].to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_features(path) -> dict[str, AdFeatures]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                f = AdFeatures.from_json(json.loads(line))
                out[f.ad_id] = f
    return out
