"""Negative binomial (NB2) regression of weekly target-ad counts.

Model: log E[y] = X beta + log(exposure), Var(y) = mu + alpha mu^2.  The fit
alternates Newton steps on beta (alpha fixed) with a one-dimensional Newton
step on log(alpha) (beta fixed).  alpha is allowed to reach the boundary 0,
where the model is Poisson.  Inference uses a cluster-robust (CR0) sandwich
on the beta block with alpha held at its estimate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from . import kernels
from .categories import ATTRIBUTES, LEVELS, PREFER_NOT_TO_SAY, reference_defaults

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_OUTER = 200
SEPARATION_BOUND = 20.0
ALPHA_FLOOR = 1e-6
Z95 = 1.959963984540054
IRR_COLUMNS = ("attribute", "target", "reference", "IRR", "CI_low", "CI_high", "p")

_ETA_CAP = 700.0


# ---------------------------------------------------------------------------
# Panel and design


@dataclass(frozen=True)
class PanelRow:
    user_id: str
    week_index: int
    y: int
    exposure: int
    covariates: dict


def build_panel(cells, profiles, category: str, attributes=ATTRIBUTES) -> list[PanelRow]:
    """One row per user-week cell; users with "Prefer not to say" on any
    modeled attribute are left out."""
    rows = []
    for cell in cells:
        prof = profiles.get(cell.user_id)
        if prof is None:
            continue
        cov = {a: prof.get(a) for a in attributes}
        if PREFER_NOT_TO_SAY in cov.values():
            continue
        rows.append(PanelRow(cell.user_id, cell.week_index, cell.count(category), cell.total_ads, cov))
    return rows


@dataclass(frozen=True)
class ModelSpec:
    attributes: tuple[str, ...] = ATTRIBUTES
    references: dict = field(default_factory=reference_defaults)
    interactions: tuple[tuple[str, str], ...] = ()
    screen_threshold: float = 0.10

    def __post_init__(self):
        for a in self.attributes:
            if a not in LEVELS:
                raise ValueError(f"unknown attribute {a!r}")
            ref = self.references.get(a)
            if ref not in LEVELS[a] or ref == PREFER_NOT_TO_SAY:
                raise ValueError(f"reference {ref!r} is not a level of {a}")
        for a, b in self.interactions:
            if a == b:
                raise ValueError(f"attribute {a!r} cannot interact with itself")
            if a not in self.attributes or b not in self.attributes:
                raise ValueError(f"interaction ({a}, {b}) uses an unmodeled attribute")

    def levels(self, attribute: str) -> list[str]:
        """Non-reference levels in canonical order."""
        ref = self.references[attribute]
        return [lv for lv in LEVELS[attribute] if lv not in (ref, PREFER_NOT_TO_SAY)]

    def ordered_interactions(self) -> list[tuple[str, str]]:
        out = []
        for a, b in self.interactions:
            if ATTRIBUTES.index(a) > ATTRIBUTES.index(b):
                a, b = b, a
            if (a, b) not in out:
                out.append((a, b))
        return sorted(out, key=lambda p: (ATTRIBUTES.index(p[0]), ATTRIBUTES.index(p[1])))


@dataclass(frozen=True)
class Column:
    name: str
    attribute: str | None = None
    level: str | None = None
    attribute2: str | None = None
    level2: str | None = None

    @property
    def is_interaction(self) -> bool:
        return self.attribute2 is not None


def design_columns(spec: ModelSpec) -> list[Column]:
    cols = [Column("Intercept")]
    attrs = [a for a in ATTRIBUTES if a in spec.attributes]
    for a in attrs:
        for lv in spec.levels(a):
            cols.append(Column(f"{a}={lv}", a, lv))
    for a, b in spec.ordered_interactions():
        for la in spec.levels(a):
            for lb in spec.levels(b):
                cols.append(Column(f"{a}={la}:{b}={lb}", a, la, b, lb))
    return cols


def design_matrix(rows, spec: ModelSpec):
    """Return (X, columns, all-zero column names) in canonical column order."""
    cols = design_columns(spec)
    X = np.zeros((len(rows), len(cols)))
    X[:, 0] = 1.0
    for i, r in enumerate(rows):
        cov = r.covariates
        for k, c in enumerate(cols[1:], start=1):
            hit = cov.get(c.attribute) == c.level
            if c.is_interaction:
                hit = hit and cov.get(c.attribute2) == c.level2
            if hit:
                X[i, k] = 1.0
    zero = [c.name for k, c in enumerate(cols) if not X[:, k].any()]
    return X, cols, zero


def panel_arrays(rows):
    y = np.array([r.y for r in rows], dtype=np.float64)
    offset = np.log(np.array([r.exposure for r in rows], dtype=np.float64))
    clusters = [r.user_id for r in rows]
    return y, offset, clusters


# ---------------------------------------------------------------------------
# NB2 likelihood pieces


def _F(x):
    """(log1p(x) - x/(1+x)) / x^2, stable near 0 (limit 1/2)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    acc = np.zeros_like(xs)
    for k in range(13, 1, -1):
        acc = acc * xs + (-1) ** k * (k - 1) / k
    out[small] = acc
    xb = x[~small]
    out[~small] = (np.log1p(xb) - xb / (1.0 + xb)) / (xb * xb)
    return out


def _G(x):
    """(x^2/(1+x)^2 - 2(log1p(x) - x/(1+x))) / x^3, stable near 0 (limit -2/3)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    acc = np.zeros_like(xs)
    for k in range(14, 2, -1):
        acc = acc * xs + (-1) ** k * (k - 1) * (k - 2) / k
    out[small] = acc
    xb = x[~small]
    out[~small] = (xb * xb / (1.0 + xb) ** 2 - 2.0 * (np.log1p(xb) - xb / (1.0 + xb))) / xb**3
    return out


def _mu(X, beta, offset):
    return np.exp(np.clip(X @ beta + offset, -_ETA_CAP, _ETA_CAP))


def nb2_loglik(y, mu, alpha: float) -> float:
    y = np.asarray(y, dtype=np.float64)
    base = y * np.log(np.where(mu > 0, mu, 1.0)) - special.gammaln(y + 1.0)
    if alpha == 0.0:
        return float(np.sum(base - mu))
    x = alpha * mu
    l0, _, _ = kernels.nb_alpha_sums(y, mu, float(alpha))
    return float(np.sum(l0 + base - y * np.log1p(x) - np.log1p(x) / alpha))


def alpha_score(y, mu, alpha: float) -> tuple[float, float]:
    """d loglik / d alpha and its derivative, both finite at alpha = 0."""
    y = np.asarray(y, dtype=np.float64)
    x = alpha * mu
    _, s1, s2 = kernels.nb_alpha_sums(y, mu, float(alpha))
    s = mu * mu * _F(x) + s1 / (1.0 + x)
    h = mu**3 * _G(x) - mu * s1 / (1.0 + x) ** 2 - s2 / (1.0 + x)
    return float(s.sum()), float(h.sum())


def beta_score_info(X, y, mu, alpha: float):
    x = alpha * mu
    u = (y - mu) / (1.0 + x)
    w = mu * (1.0 + alpha * y) / (1.0 + x) ** 2
    return X.T @ u, (X * w[:, None]).T @ X


# ---------------------------------------------------------------------------
# Fitting


@dataclass
class FitResult:
    beta: np.ndarray
    alpha: float
    cov: np.ndarray
    loglik: float
    n_obs: int
    converged: bool
    iterations: int
    grad_norm: float
    names: list[str]
    kept: list[int]
    dropped: list[str] = field(default_factory=list)
    alpha_fixed: bool = False
    separation: bool = False
    estimable: bool = True
    cov_cluster: np.ndarray | None = None
    n_clusters: int = 0

    def se(self, robust: bool = True) -> np.ndarray:
        c = self.cov_cluster if robust and self.cov_cluster is not None else self.cov
        return np.sqrt(np.clip(np.diag(c), 0.0, None))


def independent_columns(X, tol: float = 1e-9) -> list[int]:
    """Greedy left-to-right selection of linearly independent, non-zero columns."""
    kept: list[int] = []
    for k in range(X.shape[1]):
        col = X[:, k]
        norm = np.linalg.norm(col)
        if norm == 0.0:
            continue
        if kept:
            Q = X[:, kept]
            coef, *_ = np.linalg.lstsq(Q, col, rcond=None)
            if np.linalg.norm(col - Q @ coef) <= tol * norm:
                continue
        kept.append(k)
    return kept


def _beta_newton(X, y, offset, beta, alpha, max_iter=100, tol=GRAD_TOL * 1e-2):
    ll = nb2_loglik(y, _mu(X, beta, offset), alpha)
    for _ in range(max_iter):
        mu = _mu(X, beta, offset)
        g, info = beta_score_info(X, y, mu, alpha)
        if np.linalg.norm(g) < tol:
            break
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, g, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new = nb2_loglik(y, _mu(X, cand, offset), alpha)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(t * step)) < 1e-14:
            break
    return beta, ll


def _alpha_newton(y, mu, alpha, max_iter=50):
    """Maximize the NB2 log-likelihood over alpha >= 0 with mu fixed."""
    s0, h0 = alpha_score(y, mu, 0.0)
    if alpha == 0.0:
        if s0 <= 0.0:
            return 0.0
        alpha = s0 / -h0 if h0 < 0 else 1e-3
    theta = math.log(alpha)
    ll = nb2_loglik(y, mu, alpha)
    for _ in range(max_iter):
        s, h = alpha_score(y, mu, alpha)
        g = alpha * s
        hh = alpha * s + alpha * alpha * h
        if abs(s) < GRAD_TOL * 1e-2:
            break
        step = -g / hh if hh < 0 else math.copysign(1.0, g)
        step = max(-5.0, min(5.0, step))
        t = 1.0
        for _ in range(40):
            a_new = math.exp(theta + t * step)
            ll_new = nb2_loglik(y, mu, a_new)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        theta += t * step
        alpha, ll = a_new, ll_new
        if alpha < 1e-10 and s0 <= 0.0:
            return 0.0
        if abs(t * step) < 1e-15:
            break
    return alpha


def _grad_norm(X, y, offset, beta, alpha, alpha_free):
    mu = _mu(X, beta, offset)
    g, _ = beta_score_info(X, y, mu, alpha)
    parts = [g]
    if alpha_free:
        s, _ = alpha_score(y, mu, alpha)
        parts.append([max(s, 0.0) if alpha == 0.0 else s])
    return float(np.linalg.norm(np.concatenate([np.ravel(p) for p in parts])))


def fit_nb2(X, y, offset=None, names=None, alpha: float | None = None,
            max_outer: int = MAX_OUTER, tol: float = GRAD_TOL) -> FitResult:
    """Maximum-likelihood NB2 fit.

    ``alpha`` fixes the dispersion (0 gives Poisson); by default it is
    estimated.  All-zero and linearly dependent columns are dropped with a
    warning and reported in ``dropped``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p_all = X.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    names = list(names) if names is not None else [f"x{k}" for k in range(p_all)]
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must be non-negative integers")
    if alpha is not None and alpha < 0:
        raise ValueError("alpha must be >= 0")
    kept = independent_columns(X)
    dropped = [names[k] for k in range(p_all) if k not in kept]
    if dropped:
        log.warning("dropping degenerate design columns: %s", dropped)
    Xk = X[:, kept]
    kept_names = [names[k] for k in kept]
    p = len(kept)

    if not y.any():
        log.warning("all counts are zero; model is not estimable")
        return FitResult(np.full(p, np.nan), math.nan, np.full((p, p), np.nan), math.nan, n,
                         False, 0, math.nan, kept_names, kept, dropped,
                         alpha_fixed=alpha is not None, estimable=False)

    # least-squares start on the log-rate scale, then Poisson
    z = np.log((y + 0.5)) - offset
    beta = np.linalg.lstsq(Xk, z, rcond=None)[0]
    beta, _ = _beta_newton(Xk, y, offset, beta, 0.0)
    alpha_free = alpha is None
    if alpha_free:
        mu = _mu(Xk, beta, offset)
        a = float(np.sum((y - mu) ** 2 - mu) / np.sum(mu * mu))
        a = max(ALPHA_FLOOR, a)
    else:
        a = float(alpha)

    converged = False
    it = 0
    gnorm = math.inf
    for it in range(1, max_outer + 1):
        beta, _ = _beta_newton(Xk, y, offset, beta, a)
        if alpha_free:
            a = _alpha_newton(y, _mu(Xk, beta, offset), a)
        gnorm = _grad_norm(Xk, y, offset, beta, a, alpha_free)
        if gnorm < tol:
            converged = True
            break

    mu = _mu(Xk, beta, offset)
    _, info = beta_score_info(Xk, y, mu, a)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    separation = bool(np.any(np.abs(beta) > SEPARATION_BOUND))
    if separation:
        log.warning("possible separation: |beta| > %g", SEPARATION_BOUND)
    if not converged:
        log.warning("NB2 fit did not converge (gradient norm %.3g)", gnorm)
    return FitResult(beta, a, cov, nb2_loglik(y, mu, a), n, converged, it, gnorm,
                     kept_names, kept, dropped, alpha_fixed=not alpha_free,
                     separation=separation)


# ---------------------------------------------------------------------------
# Cluster-robust covariance


def cluster_robust_cov(fit: FitResult, X, y, offset, clusters) -> np.ndarray:
    """CR0 sandwich A^-1 B A^-1 for beta with alpha held at its estimate.

    ``X`` may be the full design (the fit's dropped columns are removed) or
    already reduced to the kept columns.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != len(fit.kept):
        X = X[:, fit.kept]
    y = np.asarray(y, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    _, codes = np.unique(np.asarray(clusters), return_inverse=True)
    n_clusters = int(codes.max()) + 1 if codes.size else 0
    if n_clusters < 2:
        raise ValueError("cluster-robust covariance needs at least 2 clusters")
    mu = _mu(X, fit.beta, offset)
    a = fit.alpha
    _, A = beta_score_info(X, y, mu, a)
    scores = X * ((y - mu) / (1.0 + a * mu))[:, None]
    S = kernels.cluster_sums(scores, codes.astype(np.int64), n_clusters)
    B = S.T @ S
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv
    return 0.5 * (V + V.T)


def fit_panel(rows, spec: ModelSpec, alpha: float | None = None) -> tuple[FitResult, list[Column]]:
    """Design, fit and cluster-robust covariance for a panel."""
    X, cols, _ = design_matrix(rows, spec)
    y, offset, clusters = panel_arrays(rows)
    fit = fit_nb2(X, y, offset, [c.name for c in cols], alpha=alpha)
    if fit.estimable:
        fit.n_clusters = len(set(clusters))
        if fit.n_clusters <= len(fit.kept):
            log.warning("only %d clusters for %d coefficients; cluster-robust SEs are degenerate",
                        fit.n_clusters, len(fit.kept))
        fit.cov_cluster = cluster_robust_cov(fit, X, y, offset, clusters)
    return fit, cols


# ---------------------------------------------------------------------------
# IRR reporting


@dataclass(frozen=True)
class IrrRow:
    attribute: str
    target: str
    reference: str
    irr: float
    ci_low: float
    ci_high: float
    p: float
    beta: float
    se: float
    name: str = ""

    @property
    def significant(self) -> bool:
        return self.p < 0.05

    def row(self) -> dict:
        return {
            "attribute": self.attribute,
            "target": self.target,
            "reference": self.reference,
            "IRR": f"{self.irr:.3f}",
            "CI_low": f"{self.ci_low:.3f}",
            "CI_high": f"{self.ci_high:.3f}",
            "p": f"{self.p:.3f}",
        }


def wald(beta: float, se: float) -> tuple[float, float, float, float]:
    """(irr, ci_low, ci_high, two-sided p) for a log-scale estimate."""
    irr = math.exp(beta)
    lo, hi = math.exp(beta - Z95 * se), math.exp(beta + Z95 * se)
    if se > 0:
        p = float(2.0 * stats.norm.sf(abs(beta) / se))
    else:
        p = 1.0 if beta == 0 else 0.0
    return irr, lo, hi, p


def _title(attribute: str) -> str:
    return attribute.capitalize()


def _label(col: Column, spec: ModelSpec) -> tuple[str, str, str]:
    refs = spec.references
    pairs = spec.ordered_interactions()
    if col.is_interaction:
        a, b = col.attribute, col.attribute2
        a_desc = _title(a) if len(spec.levels(a)) == 1 else f"{_title(a)} ({col.level})"
        return (f"{_title(a)} x {_title(b)}", f"{a_desc} effect in {col.level2}",
                f"{a_desc} effect in {refs[b]}")
    a = col.attribute
    partners = [(q if p == a else p) for p, q in pairs if a in (p, q)]
    attr = _title(a)
    if partners:
        first = ATTRIBUTES.index(a) < ATTRIBUTES.index(partners[0])
        at = ", ".join(refs[o] for o in partners)
        attr = f"{attr} (at {at})" if first else f"{attr} (for {at})"
    return attr, col.level, refs[a]


def irr_table(fit: FitResult, cov, spec: ModelSpec, columns: list[Column] | None = None,
              significant_only: bool = False) -> list[IrrRow]:
    """One row per non-intercept kept coefficient, sorted by p ascending."""
    columns = columns or design_columns(spec)
    by_name = {c.name: c for c in columns}
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    out = []
    for k, name in enumerate(fit.names):
        col = by_name.get(name)
        if col is None or col.attribute is None:
            continue
        irr, lo, hi, p = wald(float(fit.beta[k]), float(se[k]))
        attr, target, ref = _label(col, spec)
        out.append(IrrRow(attr, target, ref, irr, lo, hi, p, float(fit.beta[k]), float(se[k]), name))
    out.sort(key=lambda r: r.p)
    if significant_only:
        out = [r for r in out if r.significant]
    return out


def implied_contrast(fit: FitResult, cov, names) -> tuple[float, float, float, float]:
    """IRR of a sum of coefficients, e.g. a conditional effect times an
    interaction ratio, with a delta-method standard error.

    Returns (irr, ci_low, ci_high, p).
    """
    w = np.zeros(len(fit.names))
    for nm in names:
        w[fit.names.index(nm)] += 1.0
    b = float(w @ fit.beta)
    se = float(math.sqrt(max(w @ np.asarray(cov) @ w, 0.0)))
    return wald(b, se)


def implied_irr(conditional: float, ratio: float) -> float:
    """Effect implied in a non-reference stratum: conditional IRR x ratio."""
    return conditional * ratio


def screen_interactions(main_rows: list[IrrRow], candidates, threshold: float = 0.10) -> list[tuple[str, str]]:
    """Keep a pair iff each parent attribute has some level with p < threshold."""
    best: dict[str, float] = {}
    for r in main_rows:
        attr = r.name.split("=", 1)[0] if r.name else r.attribute.lower()
        best[attr] = min(best.get(attr, 1.0), r.p)
    return [(a, b) for a, b in candidates
            if best.get(a, 1.0) < threshold and best.get(b, 1.0) < threshold]


def write_irr_csv(path, rows) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, IRR_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
