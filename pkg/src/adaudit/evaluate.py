"""Scoring of demographic predictions and census-based baselines.

Accuracy and macro-F1 are reported in percent.  Macro-F1 averages per-class
F1 over the classes present in the truth of the slice being scored.  An
abstention is wrong and predicts no class.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .categories import (ABSTAIN, ATTRIBUTES, LEVELS, ORDINAL_ATTRIBUTES, PREDICTION_CLASSES,
                         PREFER_NOT_TO_SAY)

NO_DEGREE = "No Degree"
UNEMPLOYED = "Unemployed"
EXCLUDE = "EXCLUDE"
DEFAULT_PRIOR = "<bundled>"
REPORT_COLUMNS = ("scope", "condition", "method", "attribute", "criterion", "accuracy", "macro_f1", "n",
                  "n_abstain", "accuracy_std", "macro_f1_std")
LENIENT_COLUMNS = ("scope", "condition", "method", "attribute", "exact_accuracy", "lenient_accuracy",
                   "accuracy_gain_pct", "exact_macro_f1", "lenient_macro_f1", "macro_f1_gain_pct")


# ---------------------------------------------------------------------------
# Harmonization


@dataclass(frozen=True)
class HarmonizationRules:
    education_merge: dict = field(default_factory=lambda: {
        "Year 12 or equivalent": NO_DEGREE,
        "Less than year 12 or equivalent": NO_DEGREE,
    })
    employment_merge: dict = field(default_factory=lambda: {
        "Unemployed and looking for work": UNEMPLOYED,
        "Unemployed and not looking for work": UNEMPLOYED,
    })
    income_annualization: int = 52
    excluded: dict = field(default_factory=lambda: {
        "gender": ("Other",),
        "employment": ("Retired",),
    })

    def categories(self, attribute: str) -> tuple[str, ...]:
        """Harmonized category set, in canonical order."""
        out = []
        for lv in LEVELS[attribute]:
            h = self.apply(attribute, lv)
            if h is not None and h not in out:
                out.append(h)
        return tuple(out)

    def apply(self, attribute: str, value: str) -> str | None:
        if value in (PREFER_NOT_TO_SAY, ABSTAIN) or value in self.excluded.get(attribute, ()):
            return None
        if attribute == "education":
            return self.education_merge.get(value, value)
        if attribute == "employment":
            return self.employment_merge.get(value, value)
        return value


DEFAULT_RULES = HarmonizationRules()


def harmonize(value: str, attribute: str, rules: HarmonizationRules = DEFAULT_RULES) -> str | None:
    """Harmonized category, or None when the value is excluded."""
    return rules.apply(attribute, value)


def eligible_truth(attribute: str, value: str) -> bool:
    """Truth values scored in unharmonized evaluation."""
    return value != PREFER_NOT_TO_SAY and not (attribute == "gender" and value == "Other")


# ---------------------------------------------------------------------------
# Scores


@dataclass(frozen=True)
class Score:
    accuracy: float
    macro_f1: float
    n: int
    n_abstain: int = 0


def _check(preds, truths):
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not preds:
        raise ValueError("nothing to score")
    return preds, truths


def macro_f1(preds, truths) -> float:
    classes = sorted(set(truths))
    f1s = []
    for c in classes:
        tp = sum(p == c and t == c for p, t in zip(preds, truths))
        fp = sum(p == c and t != c for p, t in zip(preds, truths))
        fn = sum(t == c and p != c for p, t in zip(preds, truths))
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return 100.0 * math.fsum(f1s) / len(f1s)


def score_exact(preds, truths) -> Score:
    preds, truths = _check(preds, truths)
    acc = 100.0 * sum(p == t for p, t in zip(preds, truths)) / len(truths)
    return Score(acc, macro_f1(preds, truths), len(truths), sum(p == ABSTAIN for p in preds))


def adjacent(attribute: str, a: str, b: str) -> bool:
    order = PREDICTION_CLASSES[attribute]
    if a not in order or b not in order:
        return False
    return abs(order.index(a) - order.index(b)) <= 1


def lenient_relabel(attribute: str, preds, truths) -> list[str]:
    """Predictions with every credited (equal or adjacent) one set to the truth."""
    if attribute not in ORDINAL_ATTRIBUTES:
        raise ValueError(f"lenient scoring needs an ordinal attribute, got {attribute!r}")
    return [t if adjacent(attribute, p, t) else p for p, t in zip(preds, truths)]


def score_lenient(preds, truths, attribute: str) -> Score:
    preds, truths = _check(preds, truths)
    return score_exact(lenient_relabel(attribute, preds, truths), truths)


# ---------------------------------------------------------------------------
# Baselines


def baseline_random(attribute: str) -> float:
    """Expected accuracy (percent) of uniform guessing over the closed set."""
    return 100.0 / len(PREDICTION_CLASSES[attribute])


def baseline_random_f1(attribute: str, truths, runs: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo mean and std of macro-F1 under uniform guessing."""
    classes = PREDICTION_CLASSES[attribute]
    truths = list(truths)
    vals = []
    for ss in np.random.SeedSequence(seed).spawn(runs):
        rng = np.random.default_rng(ss)
        preds = [classes[k] for k in rng.integers(len(classes), size=len(truths))]
        vals.append(macro_f1(preds, truths))
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if runs > 1 else 0.0


@dataclass(frozen=True)
class ModeResult:
    prediction: str
    tie: bool
    score: Score


def prior_mode(dist: dict) -> tuple[str, bool]:
    top = max(dist.values())
    winners = sorted(c for c, p in dist.items() if p == top)
    return winners[0], len(winners) > 1


def baseline_prior_mode(dist: dict, truths) -> ModeResult:
    pick, tie = prior_mode(dist)
    truths = list(truths)
    return ModeResult(pick, tie, score_exact([pick] * len(truths), truths))


@dataclass(frozen=True)
class SamplingResult:
    accuracy_mean: float
    accuracy_std: float
    macro_f1_mean: float
    macro_f1_std: float
    runs: int
    single_run: bool = False


def baseline_prior_sampling(dist: dict, truths, runs: int = 1000, seed: int = 0) -> SamplingResult:
    """i.i.d. predictions from the prior; one derived seed per run."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    truths = list(truths)
    cats = sorted(dist)
    p = np.array([dist[c] for c in cats], dtype=np.float64)
    p = p / p.sum()
    accs, f1s = [], []
    for ss in np.random.SeedSequence(seed).spawn(runs):
        rng = np.random.default_rng(ss)
        preds = [cats[k] for k in rng.choice(len(cats), size=len(truths), p=p)]
        s = score_exact(preds, truths)
        accs.append(s.accuracy)
        f1s.append(s.macro_f1)
    if runs == 1:
        return SamplingResult(accs[0], 0.0, f1s[0], 0.0, 1, True)
    return SamplingResult(float(np.mean(accs)), float(np.std(accs, ddof=1)),
                          float(np.mean(f1s)), float(np.std(f1s, ddof=1)), runs)


def expected_sampling_accuracy(dist: dict, truths) -> float:
    """Analytic mean accuracy of prior sampling: sum_k prior_k * truthfreq_k."""
    truths = list(truths)
    total = sum(dist.values())
    return 100.0 * math.fsum(dist.get(t, 0.0) / total for t in truths) / len(truths)


# ---------------------------------------------------------------------------
# Census prior


@dataclass
class CensusPrior:
    dist: dict[str, dict[str, float]]
    provenance: str = ""

    def __post_init__(self):
        for a, d in self.dist.items():
            s = math.fsum(d.values())
            if abs(s - 1.0) > 1e-9:
                raise ValueError(f"prior for {a} sums to {s}")


_MONEY = re.compile(r"\$?([\d,]+)")


def _weekly_range(label: str) -> tuple[int, float]:
    nums = [int(m.replace(",", "")) for m in _MONEY.findall(label)]
    if "or more" in label and len(nums) == 1:
        return nums[0], math.inf
    if len(nums) == 2:
        return nums[0], nums[1]
    raise ValueError(f"cannot parse income bracket {label!r}")


def _annual_bracket(label: str):
    if label.endswith("or more"):
        return _weekly_range(label)[0], math.inf
    lo, hi = _weekly_range(label)
    return lo, hi + 1


def annualize(weekly_label: str, factor: int = 52) -> str:
    """Profile income bracket containing an annualized weekly census bracket."""
    lo, hi = _weekly_range(weekly_label)
    a_lo, a_hi = lo * factor, (hi + 1) * factor if hi != math.inf else math.inf
    hits = []
    for lv in PREDICTION_CLASSES["income"]:
        b_lo, b_hi = _annual_bracket(lv)
        # half-open ranges; the census bracket must sit inside one profile bracket
        if b_lo <= a_lo and a_hi <= b_hi:
            hits.append(lv)
    if len(hits) != 1:
        raise ValueError(f"weekly bracket {weekly_label!r} does not match one income bracket")
    return hits[0]


def build_census_prior(raw_path, rules: HarmonizationRules = DEFAULT_RULES) -> CensusPrior:
    """Aggregate raw census counts into harmonized probabilities.

    Raw columns: attribute, census_category, count, maps_to.  ``maps_to`` is
    a harmonized category, EXCLUDE for residual rows, or empty for income
    rows resolved by annualization.  Anything else is an error.
    """
    counts: dict[str, dict[str, float]] = {}
    with Path(raw_path).open(encoding="utf-8", newline="") as fh:
        for rownum, row in enumerate(csv.DictReader(fh), start=1):
            attr = row["attribute"].strip()
            target = (row.get("maps_to") or "").strip()
            if target == EXCLUDE:
                continue
            if attr == "income" and not target:
                target = annualize(row["census_category"], rules.income_annualization)
            allowed = rules.categories(attr)
            if target not in allowed:
                raise ValueError(f"row {rownum}: census category {row['census_category']!r} "
                                 f"does not map to a {attr} category (got {target!r})")
            d = counts.setdefault(attr, {})
            d[target] = d.get(target, 0.0) + float(row["count"].replace(",", ""))
    dist = {}
    for attr, d in counts.items():
        total = math.fsum(d.values())
        dist[attr] = {c: d[c] / total for c in rules.categories(attr) if c in d}
    return CensusPrior(dist, provenance=Path(raw_path).name)


def write_prior(path, prior: CensusPrior) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute", "category", "probability"])
        for attr in ATTRIBUTES:
            for c, p in prior.dist.get(attr, {}).items():
                w.writerow([attr, c, repr(p)])


def load_prior(path=DEFAULT_PRIOR) -> CensusPrior:
    if path == DEFAULT_PRIOR:
        text = resources.files("adaudit").joinpath("data", "census_prior.csv").read_text(encoding="utf-8")
        name = "census_prior.csv"
    else:
        text = Path(path).read_text(encoding="utf-8")
        name = Path(path).name
    dist: dict[str, dict[str, float]] = {}
    for row in csv.DictReader(text.splitlines()):
        dist.setdefault(row["attribute"], {})[row["category"]] = float(row["probability"])
    return CensusPrior(dist, provenance=name)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class EvalRow:
    scope: str
    condition: str
    method: str
    attribute: str
    criterion: str
    accuracy: float
    macro_f1: float
    n: int
    n_abstain: int = 0
    accuracy_std: float | None = None
    macro_f1_std: float | None = None

    def row(self) -> dict:
        f = (lambda v: "" if v is None else f"{v:.2f}")
        return {
            "scope": self.scope, "condition": self.condition, "method": self.method,
            "attribute": self.attribute, "criterion": self.criterion,
            "accuracy": f(self.accuracy), "macro_f1": f(self.macro_f1), "n": self.n,
            "n_abstain": self.n_abstain, "accuracy_std": f(self.accuracy_std),
            "macro_f1_std": f(self.macro_f1_std),
        }


def aligned_pairs(predictions: dict, truths: dict, attribute: str, harmonized: bool = False,
                  rules: HarmonizationRules = DEFAULT_RULES):
    """(preds, truths) for one attribute over sorted keys.

    ``predictions`` maps key -> {attribute: label}; ``truths`` maps key -> a
    profile.  Ineligible truths are skipped; a prediction that harmonizes
    to nothing counts as an abstention.
    """
    ps, ts = [], []
    for key in sorted(predictions):
        t = truths[key].get(attribute)
        p = predictions[key][attribute]
        if harmonized:
            t = rules.apply(attribute, t)
            if t is None:
                continue
            p = rules.apply(attribute, p) or ABSTAIN
        elif not eligible_truth(attribute, t):
            continue
        ps.append(p)
        ts.append(t)
    return ps, ts


def evaluate_predictions(predictions, truths, scope: str, condition: str, method: str = "model",
                         harmonized: bool = False) -> list[EvalRow]:
    rows = []
    for attr in ATTRIBUTES:
        ps, ts = aligned_pairs(predictions, truths, attr, harmonized)
        if not ts:
            continue
        s = score_exact(ps, ts)
        rows.append(EvalRow(scope, condition, method, attr, "exact", s.accuracy, s.macro_f1, s.n, s.n_abstain))
        if attr in ORDINAL_ATTRIBUTES:
            s = score_lenient(ps, ts, attr)
            rows.append(EvalRow(scope, condition, method, attr, "lenient", s.accuracy, s.macro_f1, s.n,
                                s.n_abstain))
    return rows


def baseline_rows(truths: dict, prior: CensusPrior, runs: int = 1000, seed: int = 0,
                  rules: HarmonizationRules = DEFAULT_RULES) -> list[EvalRow]:
    """Random, prior-mode and prior-sampling rows on the harmonized user slice."""
    rows = []
    users = sorted(truths)
    for k, attr in enumerate(ATTRIBUTES):
        raw = [truths[u].get(attr) for u in users if eligible_truth(attr, truths[u].get(attr))]
        if raw:
            f1, f1_sd = baseline_random_f1(attr, raw, runs, seed + k)
            rows.append(EvalRow("user", "baseline", "random", attr, "exact", baseline_random(attr), f1,
                                len(raw), 0, None, f1_sd))
        ts = [h for h in (rules.apply(attr, truths[u].get(attr)) for u in users) if h is not None]
        if not ts or attr not in prior.dist:
            continue
        m = baseline_prior_mode(prior.dist[attr], ts)
        rows.append(EvalRow("user", "harmonized", "prior_mode", attr, "exact", m.score.accuracy,
                            m.score.macro_f1, m.score.n))
        s = baseline_prior_sampling(prior.dist[attr], ts, runs, seed + k)
        rows.append(EvalRow("user", "harmonized", "prior_sampling", attr, "exact", s.accuracy_mean,
                            s.macro_f1_mean, len(ts), 0, s.accuracy_std, s.macro_f1_std))
    return rows


def lenient_table(rows: list[EvalRow]) -> list[dict]:
    """Exact vs lenient with relative improvement (percent) per slice."""
    exact = {(r.scope, r.condition, r.method, r.attribute): r for r in rows if r.criterion == "exact"}
    out = []
    for r in rows:
        if r.criterion != "lenient":
            continue
        e = exact[(r.scope, r.condition, r.method, r.attribute)]
        gain = (lambda a, b: "" if a == 0 else f"{100.0 * (b - a) / a:.2f}")
        out.append({
            "scope": r.scope, "condition": r.condition, "method": r.method, "attribute": r.attribute,
            "exact_accuracy": f"{e.accuracy:.2f}", "lenient_accuracy": f"{r.accuracy:.2f}",
            "accuracy_gain_pct": gain(e.accuracy, r.accuracy),
            "exact_macro_f1": f"{e.macro_f1:.2f}", "lenient_macro_f1": f"{r.macro_f1:.2f}",
            "macro_f1_gain_pct": gain(e.macro_f1, r.macro_f1),
        })
    return out


def write_csv(path, columns, rows) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r if isinstance(r, dict) else r.row())
