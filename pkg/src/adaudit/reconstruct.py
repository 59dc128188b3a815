"""Two-stage demographic reconstruction from ad sessions.

Stage one asks the backend for a per-session prediction plus a short
neutral summary of the ads.  Stage two feeds a user's session summaries,
in order, to a user-level prompt.  A shuffled control permutes ads within
sessions and summaries within users; an Australian-context variant swaps
the user-level template.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .categories import (ABSTAIN, ATTRIBUTES, CODES, LEVELS, PREDICTION_CLASSES,
                         normalize_literal)
from .llm_client import RECONSTRUCTION_SETTINGS, BackendRequest, LLMClient, parse_json_payload
from .prompts import Template, load_template

log = logging.getLogger(__name__)

CONDITIONS = ("sequential", "shuffled", "sequential_au")
USER_TEMPLATES = {"sequential": "user_sequential", "shuffled": "user_shuffled", "sequential_au": "user_au"}
AU_PARTY_CHOICES = ("Labor", "Greens", "Liberal", "National", "None", "Other")
NO_SUMMARY = "No summary was returned for this session."

COALITION = "Liberal (National Coalition)"
ALIASES = {
    "party": {
        "labour": "Labor",
        "alp": "Labor",
        "labor party": "Labor",
        "liberal": COALITION,
        "national": COALITION,
        "nationals": COALITION,
        "coalition": COALITION,
        "liberal national": COALITION,
        "liberal/national coalition": COALITION,
        "the greens": "Greens",
        "green": "Greens",
        "none": "None",
        "no party": "None",
    },
}


class ReconstructionError(RuntimeError):
    pass


class MissingFeaturesError(ReconstructionError):
    def __init__(self, ad_ids):
        self.ad_ids = sorted(set(ad_ids))
        super().__init__(f"no features for ad(s): {', '.join(self.ad_ids)}")


# ---------------------------------------------------------------------------
# Literal normalization


def _key(text: str) -> str:
    t = normalize_literal(text).casefold()
    t = t.replace("\u2013", "-").replace("\u2014", "-")
    t = re.sub(r"\s*-\s*", "-", t)
    return re.sub(r"\s+", " ", t).strip(" .\"'")


_LOOKUP = {
    a: {**{_key(lv): lv for lv in LEVELS[a]},
        **{_key(c): lv for lv, c in zip(LEVELS[a], CODES[a])},
        **{_key(k): v for k, v in ALIASES.get(a, {}).items()}}
    for a in ATTRIBUTES
}


def normalize_prediction(attribute: str, literal) -> str | None:
    """Closed-set label for a model literal, or None if it does not map."""
    if not isinstance(literal, str):
        return None
    label = _LOOKUP[attribute].get(_key(literal))
    if label is None or label not in PREDICTION_CLASSES[attribute]:
        return None
    return label


def answer_format(session_level: bool, au: bool = False) -> str:
    lines = ["Respond with a single JSON object with these keys and values:"]
    for a in ATTRIBUTES:
        choices = AU_PARTY_CHOICES if (au and a == "party") else PREDICTION_CLASSES[a]
        lines.append(f'- "{a}": one of ' + ", ".join(f'"{c}"' for c in choices))
    if session_level:
        lines.append('- "summary": a 3-5 sentence description of the ads in this session')
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class SessionPrediction:
    session_id: str
    user_id: str
    predictions: dict
    summary: str
    condition: str

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "user_id": self.user_id,
            "condition": self.condition,
            "predictions": {a: self.predictions[a] for a in ATTRIBUTES},
            "summary": self.summary,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["session_id"], obj["user_id"], dict(obj["predictions"]),
                   obj["summary"], obj["condition"])


@dataclass(frozen=True)
class UserPrediction:
    user_id: str
    predictions: dict
    condition: str
    n_sessions_used: int

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "condition": self.condition,
            "predictions": {a: self.predictions[a] for a in ATTRIBUTES},
            "n_sessions_used": self.n_sessions_used,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["user_id"], dict(obj["predictions"]), obj["condition"],
                   int(obj["n_sessions_used"]))


# ---------------------------------------------------------------------------
# Prompt rendering


def permutation(seed: int, key: str, n: int) -> np.ndarray:
    """Seeded permutation of range(n), derived from (seed, key)."""
    digest = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), digest]))
    return rng.permutation(n)


def session_items(session, features, condition: str = "sequential", seed: int = 0) -> list[dict]:
    """Template block values for each ad, in temporal or shuffled order."""
    missing = [imp.ad_id for imp in session.impressions if imp.ad_id not in features]
    if missing:
        raise MissingFeaturesError(missing)
    feats = [features[imp.ad_id] for imp in session.impressions]
    if condition == "shuffled":
        feats = [feats[k] for k in permutation(seed, session.session_id, len(feats))]
    return [
        {
            "i": k + 1,
            "caption": f.caption,
            "iab_category_tier_1": ", ".join(f.iab_categories),
            "descriptive_category": ", ".join(f.descriptive_categories),
            "key_entities_in_images_and_slogan": ", ".join(f.key_entities),
        }
        for k, f in enumerate(feats)
    ]


def render_session_prompt(session, features, template: Template | None = None,
                          condition: str = "sequential", seed: int = 0) -> str:
    template = template or load_template("session")
    items = session_items(session, features, condition, seed)
    return template.render({"answer_format": answer_format(True)}, items)


def render_user_prompt(summaries, variant: str, template: Template | None = None) -> str:
    template = template or load_template(USER_TEMPLATES[variant])
    items = [{"i": k + 1, "summary": s} for k, s in enumerate(summaries)]
    return template.render({"answer_format": answer_format(False, au=variant == "sequential_au")}, items)


# ---------------------------------------------------------------------------
# Backend calls


def _parse(text: str, want_summary: bool):
    """Return (normalized predictions with None for bad, raw literals, summary)."""
    try:
        obj = parse_json_payload(text)
    except ValueError:
        return {a: None for a in ATTRIBUTES}, {}, ""
    preds = {a: normalize_prediction(a, obj.get(a)) for a in ATTRIBUTES}
    raw = {a: obj.get(a) for a in ATTRIBUTES}
    summary = obj.get("summary") if want_summary else ""
    return preds, raw, summary.strip() if isinstance(summary, str) else ""


def _reask_suffix(bad, raw, au: bool, want_summary: bool) -> str:
    lines = ["", "", "Your previous answer could not be used."]
    for a in bad:
        choices = AU_PARTY_CHOICES if (au and a == "party") else PREDICTION_CLASSES[a]
        lines.append(f'"{a}" was {raw.get(a)!r}; it must be exactly one of: ' + ", ".join(choices) + ".")
    if want_summary:
        lines.append('Include a non-empty "summary".')
    lines.append("Return only the JSON object.")
    return "\n".join(lines)


def _ask(client: LLMClient, template_id: str, prompt: str, subject: str, settings,
         want_summary: bool, au: bool = False):
    resp = client.call(BackendRequest(template_id, prompt, (), dict(settings), subject))
    preds, raw, summary = _parse(resp.text, want_summary)
    bad = [a for a in ATTRIBUTES if preds[a] is None]
    if bad or (want_summary and not summary):
        retry = prompt + _reask_suffix(bad, raw, au, want_summary)
        resp = client.call(BackendRequest(template_id, retry, (), dict(settings), subject))
        preds2, _, summary2 = _parse(resp.text, want_summary)
        for a in bad:
            preds[a] = preds2[a]
        summary = summary or summary2
    for a in ATTRIBUTES:
        if preds[a] is None:
            preds[a] = ABSTAIN
    return preds, summary


def predict_session(session, features, client: LLMClient, condition: str = "sequential",
                    seed: int = 0, template: Template | None = None,
                    settings=RECONSTRUCTION_SETTINGS) -> SessionPrediction:
    prompt = render_session_prompt(session, features, template, condition, seed)
    preds, summary = _ask(client, "session", prompt, f"{session.user_id}#{session.session_id}",
                          settings, want_summary=True)
    if not summary:
        log.warning("session %s: no summary after re-ask", session.session_id)
        summary = NO_SUMMARY
    return SessionPrediction(session.session_id, session.user_id, preds, summary, condition)


def predict_user(user_id: str, session_predictions, client: LLMClient, variant: str = "sequential",
                 seed: int = 0, template: Template | None = None,
                 settings=RECONSTRUCTION_SETTINGS) -> UserPrediction:
    """User-level prediction from session summaries given in chronological order."""
    if variant not in USER_TEMPLATES:
        raise ValueError(f"unknown variant {variant!r}")
    summaries = [sp.summary for sp in session_predictions]
    if len(summaries) < 3:
        raise ReconstructionError(f"user {user_id}: need at least 3 session summaries")
    if variant == "shuffled":
        summaries = [summaries[k] for k in permutation(seed, user_id, len(summaries))]
    prompt = render_user_prompt(summaries, variant, template)
    preds, _ = _ask(client, USER_TEMPLATES[variant], prompt, user_id, settings,
                    want_summary=False, au=variant == "sequential_au")
    return UserPrediction(user_id, preds, variant, len(summaries))


@dataclass
class ReconstructionResult:
    sessions: dict[str, list[SessionPrediction]]
    users: dict[str, list[UserPrediction]]


def run_reconstruction(sessions_by_user, features, client: LLMClient,
                       conditions=CONDITIONS, seed: int = 0, jobs: int = 1) -> ReconstructionResult:
    """All session and user predictions for the requested conditions.

    Session calls run on a pool; each user call waits for that user's
    sessions.  Output order is sorted by user, then session order, so it
    does not depend on ``jobs``.
    """
    users = sorted(sessions_by_user)
    session_conds = sorted({"shuffled" if c == "shuffled" else "sequential" for c in conditions})
    tasks = [(c, s) for c in session_conds for u in users for s in sessions_by_user[u]]

    def do_session(task):
        c, s = task
        return predict_session(s, features, client, c, seed)

    def run(fn, items):
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    done = run(do_session, tasks)
    sess: dict[str, list[SessionPrediction]] = {c: [] for c in session_conds}
    for (c, _), sp in zip(tasks, done):
        sess[c].append(sp)

    by_user = {c: {} for c in session_conds}
    for c in session_conds:
        for sp in sess[c]:
            by_user[c].setdefault(sp.user_id, []).append(sp)

    user_tasks = [(v, u) for v in conditions for u in users]

    def do_user(task):
        v, u = task
        src = "shuffled" if v == "shuffled" else "sequential"
        return predict_user(u, by_user[src][u], client, v, seed)

    out_users = {v: [] for v in conditions}
    for (v, _), up in zip(user_tasks, run(do_user, user_tasks)):
        out_users[v].append(up)
    return ReconstructionResult(sess, out_users)


def write_jsonl(path, records) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_session_predictions(path) -> list[SessionPrediction]:
    with Path(path).open(encoding="utf-8") as fh:
        return [SessionPrediction.from_json(json.loads(x)) for x in fh if x.strip()]


def read_user_predictions(path) -> list[UserPrediction]:
    with Path(path).open(encoding="utf-8") as fh:
        return [UserPrediction.from_json(json.loads(x)) for x in fh if x.strip()]
