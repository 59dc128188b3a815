"""Session segmentation from inter-impression gaps.

Per user, gaps between consecutive impressions are log-transformed and
smoothed with a Gaussian KDE; the threshold is the geometric midpoint
between the first density peak and the first trough after it.  Per-user
thresholds are averaged into one global threshold that is then applied to
every user.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .ingest import AdImpression, CohortDataset

log = logging.getLogger(__name__)

MIN_SESSION_ADS = 3
MAX_SESSION_ADS = 50
MIN_USER_SESSIONS = 3


class UnsortedTimestampsError(ValueError):
    pass


class NoThresholdError(ValueError):
    pass


@dataclass(frozen=True)
class SessionizerConfig:
    kde_bandwidth_rule: str = "silverman"  # or "fixed"
    bandwidth: float | None = None  # used when rule == "fixed"
    grid_points: int = 512
    fallback_theta: float = 389.0
    min_gaps_for_kde: int = 10

    def __post_init__(self):
        if self.grid_points < 64:
            raise ValueError("grid_points must be >= 64")
        if self.fallback_theta <= 0:
            raise ValueError("fallback_theta must be positive")
        if self.kde_bandwidth_rule not in ("silverman", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.kde_bandwidth_rule!r}")
        if self.kde_bandwidth_rule == "fixed" and not (self.bandwidth and self.bandwidth > 0):
            raise ValueError("fixed bandwidth rule needs a positive bandwidth")


@dataclass
class GapDistribution:
    user_id: str
    deltas: np.ndarray
    delta_max: float | None = None
    delta_min: float | None = None
    theta_user: float | None = None


@dataclass
class Session:
    session_id: str
    user_id: str
    impressions: list[AdImpression]

    @property
    def start(self) -> int:
        return self.impressions[0].timestamp

    @property
    def end(self) -> int:
        return self.impressions[-1].timestamp

    def __len__(self) -> int:
        return len(self.impressions)

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "user_id": self.user_id,
            "start": self.start,
            "end": self.end,
            "ad_ids": [imp.ad_id for imp in self.impressions],
        }


@dataclass
class FilterReport:
    sessions_in: int = 0
    sessions_dropped_short: int = 0
    sessions_dropped_long: int = 0
    users_in: int = 0
    users_dropped: int = 0
    sessions_dropped_with_users: int = 0
    per_user_pre: dict[str, int] = field(default_factory=dict)
    per_user_post: dict[str, int] = field(default_factory=dict)

    def as_counts(self) -> dict[str, int]:
        return {
            "sessions_pre_filter": self.sessions_in,
            "sessions_dropped_short": self.sessions_dropped_short,
            "sessions_dropped_long": self.sessions_dropped_long,
            "users_pre_filter": self.users_in,
            "users_dropped_few_sessions": self.users_dropped,
            "sessions_dropped_with_users": self.sessions_dropped_with_users,
        }


def compute_gaps(timestamps) -> np.ndarray:
    """Natural-log gaps between consecutive timestamps.

    Zero gaps (duplicate timestamps) are clamped to one second, giving 0.
    """
    t = np.asarray(timestamps, dtype=np.float64)
    if t.shape[0] < 2:
        raise ValueError("need at least two timestamps")
    dt = np.diff(t)
    if np.any(dt < 0):
        raise UnsortedTimestampsError("timestamps must be sorted ascending")
    return np.log(np.maximum(dt, 1.0))


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    sigma = np.std(x, ddof=1) if x.shape[0] > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sigma, (q75 - q25) / 1.34)
    if spread <= 0:
        # degenerate IQR (heavy ties); fall back to whichever is positive
        spread = max(sigma, (q75 - q25) / 1.34)
    return 0.9 * spread * x.shape[0] ** (-0.2)


def _bandwidth(deltas, config: SessionizerConfig) -> float:
    if config.kde_bandwidth_rule == "fixed":
        return float(config.bandwidth)
    return silverman_bandwidth(deltas)


def kde_extrema(deltas, config: SessionizerConfig = SessionizerConfig()):
    """Return (grid, density, delta_max, delta_min); extrema may be None."""
    d = np.sort(np.asarray(deltas, dtype=np.float64))
    h = _bandwidth(d, config)
    if not (h > 0 and math.isfinite(h)):
        return None, None, None, None
    grid = np.linspace(d[0] - 3 * h, d[-1] + 3 * h, config.grid_points)
    density = kernels.kde_grid(d, grid, h)
    i_max, i_min = kernels.first_max_then_min(density)
    dmax = float(grid[i_max]) if i_max >= 0 else None
    dmin = float(grid[i_min]) if i_min >= 0 else None
    return grid, density, dmax, dmin


def kde_threshold(deltas, config: SessionizerConfig = SessionizerConfig()) -> float | None:
    """Per-user gap threshold in seconds, or None when it cannot be derived.

    None means too few gaps, a degenerate bandwidth, or a unimodal density
    with no trough after the first peak.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape[0] < config.min_gaps_for_kde:
        return None
    _, _, dmax, dmin = kde_extrema(deltas, config)
    if dmax is None or dmin is None:
        return None
    return math.exp((dmax + dmin) / 2.0)


def gap_distribution(user_id: str, timestamps, config: SessionizerConfig) -> GapDistribution:
    if len(timestamps) < 2:
        return GapDistribution(user_id, np.zeros(0))
    deltas = compute_gaps(timestamps)
    gd = GapDistribution(user_id, deltas)
    if deltas.shape[0] >= config.min_gaps_for_kde:
        _, _, dmax, dmin = kde_extrema(deltas, config)
        gd.delta_max, gd.delta_min = dmax, dmin
        if dmax is not None and dmin is not None:
            gd.theta_user = math.exp((dmax + dmin) / 2.0)
    return gd


def global_threshold(per_user) -> float:
    """Arithmetic mean of the thresholds that exist."""
    present = [float(t) for t in per_user if t is not None]
    if not present:
        raise NoThresholdError(
            "no user produced a KDE threshold; set sessionize.fallback_theta explicitly"
        )
    return math.fsum(present) / len(present)


def segment(timestamps, theta: float) -> list[list[int]]:
    """Index lists of sessions; a new session starts where gap > theta."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    t = np.asarray(timestamps, dtype=np.float64)
    n = t.shape[0]
    if n == 0:
        return []
    starts = kernels.session_starts(t, float(theta))
    bounds = list(starts) + [n]
    return [list(range(bounds[k], bounds[k + 1])) for k in range(len(starts))]


def segment_user(user_id: str, impressions: list[AdImpression], theta: float) -> list[Session]:
    ranges = segment([imp.timestamp for imp in impressions], theta)
    return [
        Session(f"{user_id}-s{k:04d}", user_id, [impressions[i] for i in r])
        for k, r in enumerate(ranges)
    ]


def apply_filters(sessions_by_user: dict[str, list[Session]], profiles=None):
    """Length-filter sessions, then drop users left with too few sessions.

    Returns (kept sessions by user, filtered CohortDataset or None, report).
    A cohort is only built when ``profiles`` is given.
    """
    report = FilterReport()
    kept: dict[str, list[Session]] = {}
    for user in sorted(sessions_by_user):
        sessions = sessions_by_user[user]
        report.users_in += 1
        report.sessions_in += len(sessions)
        report.per_user_pre[user] = len(sessions)
        ok = []
        for s in sessions:
            if len(s) < MIN_SESSION_ADS:
                report.sessions_dropped_short += 1
            elif len(s) > MAX_SESSION_ADS:
                report.sessions_dropped_long += 1
            else:
                ok.append(s)
        if len(ok) < MIN_USER_SESSIONS:
            report.users_dropped += 1
            report.sessions_dropped_with_users += len(ok)
            report.per_user_post[user] = 0
            continue
        report.per_user_post[user] = len(ok)
        kept[user] = ok
    cohort = None
    if profiles is not None:
        imps = [imp for user in kept for s in kept[user] for imp in s.impressions]
        cohort = CohortDataset(
            impressions=imps,
            profiles={u: profiles[u] for u in kept},
            counts=report.as_counts(),
        )
    return kept, cohort, report


@dataclass
class SessionizeResult:
    theta: float
    theta_source: str
    gaps: dict[str, GapDistribution]
    sessions: dict[str, list[Session]]
    cohort: CohortDataset
    report: FilterReport
    n_impressions: dict[str, int]

    def report_rows(self) -> list[dict]:
        rows = []
        for user in sorted(self.gaps):
            gd = self.gaps[user]
            rows.append(
                {
                    "user_id": user,
                    "n_impressions": self.n_impressions[user],
                    "n_gaps": int(gd.deltas.shape[0]),
                    "theta_user": "" if gd.theta_user is None else f"{gd.theta_user:.6f}",
                    "n_sessions_pre_filter": self.report.per_user_pre.get(user, 0),
                    "n_sessions_post_filter": self.report.per_user_post.get(user, 0),
                }
            )
        return rows


def sessionize_cohort(
    cohort: CohortDataset,
    config: SessionizerConfig = SessionizerConfig(),
    theta: float | None = None,
    jobs: int = 1,
) -> SessionizeResult:
    """Run the full per-user KDE, global threshold, segmentation and filters.

    ``theta`` overrides the derived threshold.  Per-user work may run on a
    thread pool; users are reduced in sorted order so the result does not
    depend on ``jobs``.
    """
    by_user = cohort.by_user()
    users = sorted(by_user)

    def one(user):
        return gap_distribution(user, [imp.timestamp for imp in by_user[user]], config)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            gds = list(pool.map(one, users))
    else:
        gds = [one(u) for u in users]
    gaps = dict(zip(users, gds))

    if theta is not None:
        source = "override"
    else:
        try:
            theta = global_threshold([gaps[u].theta_user for u in users])
            source = "kde"
        except NoThresholdError:
            log.warning("no per-user KDE threshold; using fallback %.1f s", config.fallback_theta)
            theta = config.fallback_theta
            source = "fallback"

    sessions = {u: segment_user(u, by_user[u], theta) for u in users}
    kept, filtered, report = apply_filters(sessions, cohort.profiles)
    filtered.counts = {**cohort.counts, **filtered.counts}
    return SessionizeResult(
        theta=theta,
        theta_source=source,
        gaps=gaps,
        sessions=kept,
        cohort=filtered,
        report=report,
        n_impressions={u: len(by_user[u]) for u in users},
    )
