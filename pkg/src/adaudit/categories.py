"""Closed demographic category sets shared by every stage.

Each attribute has an ordered tuple of canonical labels (questionnaire
wording, ASCII hyphens) and a parallel tuple of short codes.  Input files
may use either form; everything downstream sees canonical labels only.
"""

from __future__ import annotations

import unicodedata

PREFER_NOT_TO_SAY = "Prefer not to say"
ABSTAIN = "<abstain>"

ATTRIBUTES: tuple[str, ...] = ("gender", "age", "income", "education", "employment", "party")

LEVELS: dict[str, tuple[str, ...]] = {
    "gender": ("Male", "Female", "Other", PREFER_NOT_TO_SAY),
    "age": (
        "18-24",
        "25-34",
        "35-44",
        "45-54",
        "55-64",
        "65-74",
        "75 and over",
        PREFER_NOT_TO_SAY,
    ),
    "income": (
        "$1-$15,599",
        "$15,600-$20,799",
        "$20,800-$25,999",
        "$26,000-$33,799",
        "$33,800-$41,599",
        "$41,600-$51,999",
        "$52,000-$64,999",
        "$65,000-$77,999",
        "$78,000-$90,999",
        "$91,000-$103,999",
        "$104,000-$155,999",
        "$156,000 or more",
        PREFER_NOT_TO_SAY,
    ),
    "education": (
        "Postgraduate degree level",
        "Bachelor degree level",
        "Year 12 or equivalent",
        "Less than year 12 or equivalent",
        PREFER_NOT_TO_SAY,
    ),
    "employment": (
        "Employed full time",
        "Employed part time",
        "Unemployed and looking for work",
        "Unemployed and not looking for work",
        "Retired",
        PREFER_NOT_TO_SAY,
    ),
    "party": ("Labor", "Liberal (National Coalition)", "Greens", "None", "Other"),
}

CODES: dict[str, tuple[str, ...]] = {
    "gender": ("Male", "Female", "Other", "PreferNotToSay"),
    "age": ("18–24", "25–34", "35–44", "45–54", "55–64", "65–74", "75+", "PreferNotToSay"),
    "income": (
        "$1–$15,599",
        "$15,600–$20,799",
        "$20,800–$25,999",
        "$26,000–$33,799",
        "$33,800–$41,599",
        "$41,600–$51,999",
        "$52,000–$64,999",
        "$65,000–$77,999",
        "$78,000–$90,999",
        "$91,000–$103,999",
        "$104,000–$155,999",
        "$156,000+",
        "PreferNotToSay",
    ),
    "education": ("Postgraduate", "Bachelor", "Year12", "LessThanYear12", "PreferNotToSay"),
    "employment": (
        "FullTime",
        "PartTime",
        "UnemployedLooking",
        "UnemployedNotLooking",
        "Retired",
        "PreferNotToSay",
    ),
    "party": ("Labor", "Liberal", "Greens", "None", "Other"),
}

# Column header used for each attribute in the profiles CSV.
PROFILE_COLUMNS: dict[str, str] = {
    "gender": "gender",
    "age": "age",
    "income": "income",
    "education": "education",
    "employment": "employment",
    "party": "party",
}

ORDINAL_ATTRIBUTES = ("age", "income")

# Classes a model is asked to choose between; also the universe of the
# random-guessing baseline (1/K).
PREDICTION_CLASSES: dict[str, tuple[str, ...]] = {
    "gender": ("Male", "Female"),
    "age": LEVELS["age"][:-1],
    "income": LEVELS["income"][:-1],
    "education": LEVELS["education"][:-1],
    "employment": LEVELS["employment"][:-1],
    "party": LEVELS["party"],
}

_LOOKUP: dict[str, dict[str, str]] = {}
for _attr in ATTRIBUTES:
    table = {}
    for label, code in zip(LEVELS[_attr], CODES[_attr]):
        table[label] = label
        table[code] = label
    _LOOKUP[_attr] = table


def normalize_literal(text: str) -> str:
    return unicodedata.normalize("NFC", text.strip())


def canonical(attribute: str, literal: str) -> str | None:
    """Map a label or code to the canonical label; None if not in the set."""
    if attribute not in _LOOKUP:
        raise KeyError(f"unknown attribute {attribute!r}")
    return _LOOKUP[attribute].get(normalize_literal(literal))


def level_index(attribute: str, label: str) -> int:
    return LEVELS[attribute].index(label)


def reference_defaults() -> dict[str, str]:
    return {
        "gender": "Female",
        "age": "25-34",
        "income": "$156,000 or more",
        "education": "Bachelor degree level",
        "employment": "Employed full time",
        "party": "None",
    }
