"""Synthetic cohorts with known generating parameters.

Used as oracles in tests and to build the bundled 5-user fixture.
"""

from __future__ import annotations

import math

import numpy as np

from .categories import ATTRIBUTES, LEVELS, PREFER_NOT_TO_SAY
from .ingest import AdImpression, DemographicProfile
from .nbr import PanelRow


def bimodal_deltas(n_low=50, n_high=50, low=2.0, high=8.0, sd=0.2, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(low, sd, n_low), rng.normal(high, sd, n_high)])


def timestamps_from_deltas(deltas, start: int = 1_600_000_000) -> np.ndarray:
    gaps = np.maximum(1, np.rint(np.exp(np.asarray(deltas))).astype(np.int64))
    return start + np.concatenate([[0], np.cumsum(gaps)])


def bimodal_gap_cohort(n_users=20, sessions_per_user=(4, 9), ads_per_session=(3, 12),
                       low=2.0, high=8.0, sd=0.2, seed=0) -> dict[str, np.ndarray]:
    """Per-user timestamps whose log-gaps cluster at ``low`` (within
    sessions) and ``high`` (between sessions)."""
    rng = np.random.default_rng(seed)
    out = {}
    for u in range(n_users):
        n_sess = int(rng.integers(*sessions_per_user, endpoint=True))
        deltas = []
        for s in range(n_sess):
            if s:
                deltas.append(rng.normal(high, sd))
            k = int(rng.integers(*ads_per_session, endpoint=True))
            deltas.extend(rng.normal(low, sd, k - 1))
        out[f"u{u:03d}"] = timestamps_from_deltas(deltas, 1_600_000_000 + 1000 * u)
    return out


def random_profile(user_id: str, rng, allow_pnts: bool = False) -> DemographicProfile:
    vals = {}
    for a in ATTRIBUTES:
        levels = [lv for lv in LEVELS[a] if allow_pnts or lv != PREFER_NOT_TO_SAY]
        if a == "gender":
            levels = [lv for lv in levels if lv != "Other"]
        vals[a] = levels[int(rng.integers(len(levels)))]
    return DemographicProfile(user_id=user_id, **vals)


def nb_panel(n_users=500, n_weeks=20, gender_irr=2.0, alpha=0.5, base_rate=0.05,
             exposure_mean=40.0, seed=0) -> list[PanelRow]:
    """Gender-only NB2 panel: y ~ NB2(mu, alpha), mu = rate * IRR^male * exposure.

    Draws are gamma-Poisson mixtures so Var(y) = mu + alpha mu^2 exactly.
    """
    rng = np.random.default_rng(seed)
    rows = []
    male = rng.random(n_users) < 0.5
    for u in range(n_users):
        expo = 1 + rng.poisson(exposure_mean, n_weeks)
        mu = base_rate * (gender_irr if male[u] else 1.0) * expo
        lam = rng.gamma(1.0 / alpha, alpha * mu)
        y = rng.poisson(lam)
        g = "Male" if male[u] else "Female"
        for w in range(n_weeks):
            rows.append(PanelRow(f"u{u:04d}", w, int(y[w]), int(expo[w]), {"gender": g}))
    return rows


# ---------------------------------------------------------------------------
# Bundled fixture

_AD_POOL = (
    ("Spin the wheel tonight", "Gambling", "Lucky Star Casino bonus spins for new members"),
    ("Place your bets", "Gambling", "Racing odds boosted at Punters Club"),
    ("Craft beer delivered", "Alcohol", "Brewhouse Alcohol bundles, order online"),
    ("Wine club offer", "Alcohol", "Cellar Door Alcohol tasting packs"),
    ("Vote this Saturday", "Politics", "Your local candidate on Politics that matter"),
    ("Study nursing online", "Education and Careers", "Northbridge Institute enrolments open"),
    ("Upgrade your phone", "Consumer Electronics", "Nimbus smartphone trade-in deal"),
    ("Weekend sale", "Retail", "Harbour Retail outlet prices on footwear"),
    ("Fresh recipes weekly", "Food and Drink", "Kitchen Box meal kits with free delivery"),
    ("Holiday deals", "Travel and Tourism", "Coral Coast Travel and Tourism packages for families"),
    ("Home loan rates", "Financial Services", "Summit Bank fixed rates"),
    ("New SUV test drive", "Automotive", "Ridgeway Motors hybrid range"),
    ("Fitness challenge", "Sports and Fitness", "Pulse Gym eight week plan"),
    ("Career switch", "Education and Careers", "Pathway Academy coding bootcamp, Software and Apps jobs"),
    ("Pub trivia and pints", "Alcohol", "Corner Hotel Food and Drink specials"),
)

FIXTURE_PROFILES = (
    ("user01", "Male", "25-34", "$104,000-$155,999", "Bachelor degree level", "Employed full time", "Labor"),
    ("user02", "Female", "45-54", "$52,000-$64,999", "Year 12 or equivalent", "Employed part time", "Liberal (National Coalition)"),
    ("user03", "Male", "18-24", "$1-$15,599", "Less than year 12 or equivalent", "Unemployed and looking for work", "Greens"),
    ("user04", "Female", "65-74", "$26,000-$33,799", "Postgraduate degree level", "Retired", "None"),
    ("user05", "Male", "35-44", PREFER_NOT_TO_SAY, "Bachelor degree level", "Employed full time", "Other"),
)


def fixture_cohort(seed: int = 7):
    """The bundled 5-user cohort: (impressions in file order, profiles).

    Every user gets 6 to 9 sessions of 3 to 10 ads spread over several
    weeks, with within-session log-gaps near 2.5 and between-session gaps
    near 9.5.  A few non-facebook rows and HTML fragments exercise ingest.
    """
    rng = np.random.default_rng(seed)
    profiles = {p[0]: DemographicProfile(*p) for p in FIXTURE_PROFILES}
    impressions = []
    for u, user in enumerate(sorted(profiles)):
        t = 1_700_000_000 + 3600 * u
        n_sess = int(rng.integers(6, 10))
        for s in range(n_sess):
            if s:
                t += int(math.exp(rng.normal(9.5, 0.5)))
                # occasional multi-day gap so users span several weeks
                if rng.random() < 0.4:
                    t += int(rng.integers(2, 6)) * 86400
            k = int(rng.integers(3, 11))
            for i in range(k):
                if i:
                    t += max(1, int(math.exp(rng.normal(2.5, 0.4))))
                j = int(rng.integers(len(_AD_POOL)))
                title, _, body = _AD_POOL[j]
                body_html = f"<p>{body}</p>" if (i + s) % 4 == 0 else body
                impressions.append(AdImpression(
                    user_id=user, timestamp=t, ad_id=f"ad{j:03d}", source="facebook",
                    title=title + " - " + _AD_POOL[j][1], body=body_html,
                    image_refs=(f"img/ad{j:03d}.jpg",),
                ))
            if s == 2:
                impressions.append(AdImpression(user, t + 5, f"g{u}", "google", "Search ad", "", ()))
    return impressions, profiles
