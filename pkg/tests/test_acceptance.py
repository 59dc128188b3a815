"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records its outcome; a PASS/FAIL line per criterion is printed
as the test runs and again in the terminal summary.
"""

from __future__ import annotations

import csv
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import sympy as sp
import yaml
from conftest import ACCEPTANCE

from adaudit import cli, synth
from adaudit.audit import build_cells, coverage, dataset_epoch, WEEK_SECONDS
from adaudit.categories import ATTRIBUTES, LEVELS, PREDICTION_CLASSES, PREFER_NOT_TO_SAY
from adaudit.evaluate import (adjacent, baseline_prior_sampling, baseline_random, load_prior, prior_mode,
                              score_exact, score_lenient)
from adaudit.features import AdFeatures, extract_corpus
from adaudit.ingest import AdImpression
from adaudit.llm_client import LLMClient, MemoryCache, mock_backend
from adaudit.nbr import (ModelSpec, cluster_robust_cov, fit_nb2, fit_panel, implied_irr,
                         irr_table, wald)
from adaudit.reconstruct import run_reconstruction, session_items
from adaudit.sessionize import (compute_gaps, global_threshold, kde_extrema, kde_threshold, segment,
                                sessionize_cohort)


def record(k: int, ok: bool, detail: str) -> None:
    prev_ok, prev = ACCEPTANCE.get(k, (True, ""))
    ACCEPTANCE[k] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def brute_force_split(timestamps, theta):
    sessions, cur = [], [0]
    for i in range(1, len(timestamps)):
        if timestamps[i] - timestamps[i - 1] > theta:
            sessions.append(cur)
            cur = []
        cur.append(i)
    sessions.append(cur)
    return sessions


# ---------------------------------------------------------------------------
# 1. Sessionization oracle


class TestCriterion1:
    @pytest.mark.xfail(strict=True, reason="KDE midpoint rule gives exp((2+5)/2) ~ 33 s, not e^5; see ledger")
    def test_threshold_near_e5(self):
        deltas = synth.bimodal_deltas(50, 50, 2.0, 8.0, 0.2, seed=0)
        theta = kde_threshold(deltas)
        target = math.exp(5.0)
        ok = theta is not None and abs(theta - target) <= 0.15 * target
        record(1, ok, f"theta={theta:.1f}s vs e^5={target:.1f}s (+-15%)")
        assert ok

    def test_segmentation_matches_brute_force(self):
        t0 = time.perf_counter()
        deltas = synth.bimodal_deltas(50, 50, 2.0, 8.0, 0.2, seed=0)
        theta = kde_threshold(deltas)
        ts = synth.timestamps_from_deltas(synth.bimodal_deltas(200, 40, 2.0, 8.0, 0.2, seed=1)[
            np.random.default_rng(2).permutation(240)])
        got = segment(ts, theta)
        elapsed = time.perf_counter() - t0
        ok = got == brute_force_split(ts, theta) and elapsed < 5.0
        record(1, ok, f"segmentation == brute force, {elapsed:.2f}s < 5s")
        assert ok


# ---------------------------------------------------------------------------
# 2. Threshold arithmetic


class TestCriterion2:
    def test_theta_arithmetic(self):
        ts = [0, 0, 1, 3, 10, 1000]
        d = compute_gaps(ts)
        ok_gaps = list(d) == [0.0, 0.0, math.log(2), math.log(7), math.log(990)]

        deltas = synth.bimodal_deltas(30, 30, 2.0, 7.0, 0.3, seed=3)
        grid, dens, dmax, dmin = kde_extrema(deltas)
        # brute-force first strict max, then first strict min after it
        i_max = next(i for i in range(1, len(dens) - 1) if dens[i - 1] < dens[i] > dens[i + 1])
        i_min = next(i for i in range(i_max + 1, len(dens) - 1) if dens[i - 1] > dens[i] < dens[i + 1])
        ok_ext = (dmax, dmin) == (grid[i_max], grid[i_min])
        ok_theta = kde_threshold(deltas) == math.exp((grid[i_max] + grid[i_min]) / 2.0)
        ok_mean = global_threshold([10.0, None, 20.0, 40.0]) == 70.0 / 3.0

        ok = ok_gaps and ok_ext and ok_theta and ok_mean
        record(2, ok, "log-gaps, KDE extrema, per-user midpoint and global mean exact")
        assert ok

    def test_strict_inequality_boundary(self):
        ts = [0, 100, 200, 301, 401]
        got = segment(ts, 100.0)
        ok = got == [[0, 1, 2], [3, 4]] and segment([0, 100], 99.999) == [[0], [1]]
        record(2, ok, "gap == theta stays in session, gap > theta splits")
        assert ok


# ---------------------------------------------------------------------------
# 3. NB2 correctness


def _poisson_irls(X, y, offset, iters=100):
    """Textbook IRLS for a Poisson log-link GLM."""
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean() / np.exp(offset).mean())
    for _ in range(iters):
        eta = X @ beta + offset
        mu = np.exp(eta)
        z = eta - offset + (y - mu) / mu
        W = mu
        new = np.linalg.solve(X.T @ (W[:, None] * X), X.T @ (W * z))
        if np.max(np.abs(new - beta)) < 1e-14:
            beta = new
            break
        beta = new
    return beta


class TestCriterion3:
    def test_a_intercept_only(self):
        rng = np.random.default_rng(11)
        e = 37.0
        y = rng.negative_binomial(2, 2 / (2 + 0.1 * e), size=400).astype(float)
        fit = fit_nb2(np.ones((400, 1)), y, np.full(400, math.log(e)))
        err = abs(fit.beta[0] - math.log(y.mean() / e))
        ok = fit.converged and err < 1e-8
        record(3, ok, f"(a) intercept error {err:.1e} < 1e-8")
        assert ok

    def test_b_poisson_limit(self):
        rng = np.random.default_rng(12)
        n = 300
        X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.normal(size=n)])
        offset = np.log(rng.integers(5, 60, n).astype(float))
        y = rng.poisson(np.exp(X @ np.array([-2.0, 0.5, 0.3]) + offset)).astype(float)
        fit = fit_nb2(X, y, offset, alpha=0.0)
        ref = _poisson_irls(X, y, offset)
        err = float(np.max(np.abs(fit.beta - ref)))
        ok = err < 1e-6
        record(3, ok, f"(b) alpha=0 vs Poisson IRLS max|diff| {err:.1e} < 1e-6")
        assert ok

    def test_c_exposure_scaling(self):
        rows = synth.nb_panel(n_users=120, n_weeks=6, seed=5)
        spec = ModelSpec(attributes=("gender",))
        f1, _ = fit_panel(rows, spec)
        c = 7.0
        scaled = [type(r)(r.user_id, r.week_index, r.y, r.exposure * 7, r.covariates) for r in rows]
        f2, _ = fit_panel(scaled, spec)
        d0 = abs((f2.beta[0] - f1.beta[0]) + math.log(c))
        d1 = float(np.max(np.abs(f2.beta[1:] - f1.beta[1:])))
        ok = d0 < 1e-6 and d1 < 1e-6
        record(3, ok, f"(c) intercept shift err {d0:.1e}, slope diff {d1:.1e}")
        assert ok

    def test_d_monte_carlo_coverage(self):
        t0 = time.perf_counter()
        spec = ModelSpec(attributes=("gender",))
        covered = 0
        for rep in range(50):
            rows = synth.nb_panel(500, 20, gender_irr=2.0, alpha=0.5, seed=1000 + rep)
            fit, cols = fit_panel(rows, spec)
            (row,) = irr_table(fit, fit.cov_cluster, spec, cols)
            covered += row.ci_low <= 2.0 <= row.ci_high
        elapsed = time.perf_counter() - t0
        ok = covered >= 45 and elapsed < 120.0
        record(3, ok, f"(d) coverage {covered}/50 >= 45, {elapsed:.1f}s < 120s")
        assert ok


# ---------------------------------------------------------------------------
# 4. Cluster-robust covariance


def _nb_pieces(X, y, beta, alpha):
    mu = np.exp(X @ beta)
    s = X * ((y - mu) / (1 + alpha * mu))[:, None]
    A = np.zeros((X.shape[1], X.shape[1]))
    for i in range(X.shape[0]):
        A += np.outer(X[i], X[i]) * mu[i] * (1 + alpha * y[i]) / (1 + alpha * mu[i]) ** 2
    return s, A


class TestCriterion4:
    def test_singleton_clusters_are_hc0(self):
        rng = np.random.default_rng(21)
        n = 200
        X = np.column_stack([np.ones(n), rng.integers(0, 2, n), rng.normal(size=n)])
        y = rng.negative_binomial(3, 3 / (3 + np.exp(X @ [0.5, 0.4, -0.2]))).astype(float)
        fit = fit_nb2(X, y)
        V = cluster_robust_cov(fit, X, y, np.zeros(n), np.arange(n))
        s, A = _nb_pieces(X, y, fit.beta, fit.alpha)
        Ai = np.linalg.inv(A)
        hc0 = Ai @ (s.T @ s) @ Ai
        err = float(np.max(np.abs(V - hc0)) / np.max(np.abs(hc0)))
        ok = err < 1e-10
        record(4, ok, f"singleton clusters vs HC0 rel err {err:.1e} < 1e-10")
        assert ok

    def test_twenty_row_sandwich(self):
        rng = np.random.default_rng(22)
        n = 20
        x1 = rng.integers(0, 2, n)
        x2 = np.round(rng.normal(size=n), 2)
        X = np.column_stack([np.ones(n), x1, x2])
        y = np.array([0, 3, 1, 7, 2, 0, 5, 1, 1, 4, 9, 0, 2, 2, 6, 1, 0, 3, 8, 2], dtype=float)
        clusters = np.repeat(np.arange(5), 4)
        fit = fit_nb2(X, y)
        V = cluster_robust_cov(fit, X, y, np.zeros(n), clusters)

        # symbolic per-row NB2 log-likelihood, differentiated by sympy
        b = sp.symbols("b0:3")
        a = sp.Float(repr(float(fit.alpha)), 40)
        vals = {b[k]: sp.Float(repr(float(fit.beta[k])), 40) for k in range(3)}
        A = sp.zeros(3, 3)
        S = sp.zeros(5, 3)
        for i in range(n):
            mu = sp.exp(sum(b[k] * sp.Float(repr(float(X[i, k])), 40) for k in range(3)))
            yi = int(y[i])
            ll = yi * sp.log(mu) - (yi + 1 / a) * sp.log(1 + a * mu) if a != 0 else yi * sp.log(mu) - mu
            grad = [sp.diff(ll, bk) for bk in b]
            for j in range(3):
                S[clusters[i], j] += grad[j].subs(vals).evalf(40)
                for k in range(3):
                    A[j, k] -= sp.diff(grad[j], b[k]).subs(vals).evalf(40)
        Ai = A.inv()
        ref = np.array((Ai * (S.T * S) * Ai).evalf(30).tolist(), dtype=float)
        err = float(np.max(np.abs(V - ref)) / np.max(np.abs(ref)))
        ok = err < 1e-10
        record(4, ok, f"20-row sympy sandwich rel err {err:.1e} < 1e-10")
        assert ok


# ---------------------------------------------------------------------------
# 5. IRR reporting


class TestCriterion5:
    def test_ci_identity_and_order(self):
        rows = synth.nb_panel(n_users=150, n_weeks=8, seed=9)
        rng = np.random.default_rng(0)
        ages = LEVELS["age"][:4]
        rows = [type(r)(r.user_id, r.week_index, r.y, r.exposure,
                        {**r.covariates, "age": ages[int(r.user_id[1:]) % 4]}) for r in rows]
        spec = ModelSpec(attributes=("gender", "age"))
        fit, cols = fit_panel(rows, spec)
        table = irr_table(fit, fit.cov_cluster, spec, cols)
        worst = max(abs(r.ci_low * r.ci_high / r.irr ** 2 - 1.0) for r in table)
        extra = [wald(b, s) for b, s in zip(rng.normal(size=50), rng.uniform(0.01, 2, 50))]
        worst = max(worst, max(abs(lo * hi / irr ** 2 - 1.0) for irr, lo, hi, _ in extra))
        ps = [r.p for r in table]
        ok = worst < 1e-12 and ps == sorted(ps) and len(table) == 4
        record(5, ok, f"ci_low*ci_high = irr^2 (rel err {worst:.1e}), rows sorted by p")
        assert ok

    def test_implied_contrast(self):
        v = implied_irr(0.22, 16.87)
        ok = round(v, 2) == 3.71
        record(5, ok, f"implied IRR 0.22 x 16.87 = {v:.4f} ~ 3.71")
        assert ok


# ---------------------------------------------------------------------------
# 6. Descriptive audit vs brute force


def _audit_cohort(n_users=50, seed=4):
    rng = np.random.default_rng(seed)
    cats = ["Gambling", "Alcohol", "Politics", "Retail", "Automotive"]
    features = {}
    for j in range(30):
        k = int(rng.integers(1, 3))
        picks = tuple(cats[i] for i in sorted(rng.choice(len(cats), k, replace=False)))
        features[f"ad{j}"] = AdFeatures(f"ad{j}", "c", (), picks, ("e",))
    profiles, imps = {}, []
    start = 1_650_000_000
    for u in range(n_users):
        uid = f"u{u:02d}"
        profiles[uid] = synth.random_profile(uid, rng, allow_pnts=True)
        t = start + int(rng.integers(0, 86400))
        for _ in range(int(rng.integers(5, 60))):
            t += int(rng.exponential(40000))
            imps.append(AdImpression(uid, t, f"ad{int(rng.integers(0, 32))}", "facebook", "", "", ()))
    return imps, profiles, features


class TestCriterion6:
    def test_matches_raw_scan(self):
        imps, profiles, features = _audit_cohort()
        cells = build_cells(imps, features)
        epoch = min(i.timestamp for i in imps)
        epoch -= epoch % 86400
        # raw scan: (user, week) -> list of ad ids
        weeks = {}
        for imp in imps:
            w = 0
            while imp.timestamp >= epoch + (w + 1) * 7 * 86400:
                w += 1
            weeks.setdefault((imp.user_id, w), []).append(imp.ad_id)
        mismatches = 0
        checked = 0
        for attr in ATTRIBUTES:
            for level in LEVELS[attr]:
                for cat in ("Gambling", "Alcohol", "Politics"):
                    n = hits = total = 0
                    for (u, _), ads in weeks.items():
                        if len(ads) < 3 or getattr(profiles[u], attr) != level:
                            continue
                        c = sum(cat in features[a].iab_categories for a in ads if a in features)
                        n += 1
                        hits += c > 0
                        total += c
                    got = coverage(cells, attr, level, cat, profiles)
                    checked += 1
                    if n == 0:
                        mismatches += not (got.empty and math.isnan(got.coverage))
                    else:
                        mismatches += (got.coverage, got.avg_intensity, got.n_active_user_weeks) != (
                            hits / n, total / n, n)
        ok = mismatches == 0 and checked > 0
        record(6, ok, f"{checked} (attribute, level, category) summaries equal the raw scan")
        assert ok

    def test_active_rule_boundary(self):
        base = 1_700_006_400  # a UTC midnight
        feats = {"g": AdFeatures("g", "c", (), ("Gambling",), ("e",))}
        imps = [AdImpression("a", base + k, "g", "facebook", "", "", ()) for k in range(3)]
        imps += [AdImpression("b", base + k, "g", "facebook", "", "", ()) for k in range(2)]
        # one ad exactly at the window edge belongs to the next week
        imps += [AdImpression("b", base + WEEK_SECONDS, "g", "facebook", "", "", ())]
        cells = {(c.user_id, c.week_index): c for c in build_cells(imps, feats)}
        ok = (dataset_epoch(imps) == base and cells[("a", 0)].active and not cells[("b", 0)].active
              and cells[("b", 1)].total_ads == 1 and cells[("b", 0)].total_ads == 2)
        record(6, ok, "active iff >= 3 ads in the 7-day window; edge ad starts the next window")
        assert ok


# ---------------------------------------------------------------------------
# 7. Evaluation suite


class TestCriterion7:
    def test_random_baselines(self):
        got = [round(baseline_random(a), 2) for a in ATTRIBUTES]
        ok = got == [50.00, 14.29, 8.33, 25.00, 20.00, 20.00]
        record(7, ok, f"random baselines {got}")
        assert ok

    def test_prior_mode_female(self):
        pick, tie = prior_mode(load_prior().dist["gender"])
        ok = pick == "Female" and not tie
        record(7, ok, f"prior-mode gender = {pick}")
        assert ok

    def test_prior_sampling_mean(self):
        prior = load_prior()
        rng = np.random.default_rng(8)
        worst = 0.0
        for attr, dist in prior.dist.items():
            cats = sorted(dist)
            truths = [cats[k] for k in rng.integers(len(cats), size=60)]
            res = baseline_prior_sampling(dist, truths, runs=1000, seed=3)
            q = Counter(truths)
            expected = 100.0 * sum(dist[c] * q[c] / len(truths) for c in cats)
            se = res.accuracy_std / math.sqrt(res.runs)
            worst = max(worst, abs(res.accuracy_mean - expected) / se)
        ok = worst < 3.0
        record(7, ok, f"prior-sampling mean within {worst:.2f} SE of sum p_k q_k (< 3)")
        assert ok

    def test_lenient_at_least_exact(self):
        rng = np.random.default_rng(9)
        bad = 0
        for attr in ("age", "income"):
            classes = PREDICTION_CLASSES[attr]
            for _ in range(200):
                n = int(rng.integers(1, 40))
                t = [classes[k] for k in rng.integers(len(classes), size=n)]
                p = [classes[k] for k in rng.integers(len(classes), size=n)]
                e, le = score_exact(p, t), score_lenient(p, t, attr)
                bad += le.accuracy < e.accuracy or le.macro_f1 < e.macro_f1 - 1e-12
        ok = bad == 0
        record(7, ok, "lenient >= exact on 400 random slices")
        assert ok

    def test_lenient_adjacency_example(self):
        ok = (adjacent("age", "25-34", "18-24") and adjacent("age", "25-34", "35-44")
              and adjacent("age", "25-34", "25-34") and not adjacent("age", "25-34", "45-54")
              and score_lenient(["18-24", "35-44", "45-54"], ["25-34"] * 3, "age").accuracy == 200 / 3)
        record(7, ok, "25-34 credits 18-24 and 35-44 only")
        assert ok


# ---------------------------------------------------------------------------
# 8. End-to-end determinism


def _run(workdir: Path, *extra) -> int:
    return cli.main(["all", "--mock-backend", "--workdir", str(workdir), *extra])


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json" and "cache" not in p.relative_to(root).parts}


class TestCriterion8:
    def test_byte_identical(self, tmp_path):
        codes = [_run(tmp_path / "a"), _run(tmp_path / "b"), _run(tmp_path / "c", "--jobs", "8")]
        a, b, c = (_tree(tmp_path / x) for x in "abc")
        ok = codes == [0, 0, 0] and len(a) >= 10 and a == b == c
        record(8, ok, f"{len(a)} outputs byte-identical across repeat and --jobs 1 vs 8")
        assert ok

    def test_truth_biased_mock(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(yaml.safe_dump({"backend": {"mock_truth_rate": 1.0}, "evaluate": {"runs": 10}}))
        assert _run(tmp_path / "w", "--config", str(cfg)) == 0
        with (tmp_path / "w" / "eval_report.csv").open() as fh:
            rows = [r for r in csv.DictReader(fh)
                    if r["scope"] == "user" and r["method"] == "model" and r["criterion"] == "exact"]
        got = {(r["condition"], r["attribute"]): float(r["accuracy"]) for r in rows}
        ok = len(got) == 18 and all(v == 100.0 for v in got.values())
        record(8, ok, f"truth-biased mock: user accuracy 100% on {len(got)} (condition, attribute) slices")
        assert ok

    def test_uniform_mock(self, fixture_cohort, taxonomy):
        res = sessionize_cohort(fixture_cohort)
        feats = extract_corpus(res.cohort.impressions, taxonomy, LLMClient(mock_backend(0), MemoryCache()))
        profiles = res.cohort.profiles
        hits = {a: [] for a in ATTRIBUTES}
        for seed in range(8):
            client = LLMClient(mock_backend(seed), MemoryCache())
            out = run_reconstruction(res.sessions, feats, client, seed=seed)
            preds = [(sp.user_id, sp.predictions) for c in out.sessions.values() for sp in c]
            preds += [(up.user_id, up.predictions) for c in out.users.values() for up in c]
            for user, pr in preds:
                for a in ATTRIBUTES:
                    t = profiles[user].get(a)
                    if t != PREFER_NOT_TO_SAY and t in PREDICTION_CLASSES[a]:
                        hits[a].append(pr[a] == t)
        worst = 0.0
        for a in ATTRIBUTES:
            p = 1.0 / len(PREDICTION_CLASSES[a])
            n = len(hits[a])
            z = abs(np.mean(hits[a]) - p) / math.sqrt(p * (1 - p) / n)
            worst = max(worst, z)
        ok = worst < 3.0
        record(8, ok, f"uniform mock: max |z| vs 1/K is {worst:.2f} < 3")
        assert ok


# ---------------------------------------------------------------------------
# 9. Shuffle-control integrity


class TestCriterion9:
    def test_multisets_preserved(self, fixture_cohort, taxonomy):
        res = sessionize_cohort(fixture_cohort)
        feats = extract_corpus(res.cohort.impressions, taxonomy, LLMClient(mock_backend(0), MemoryCache()))
        n = reordered = 0
        same = True
        for sessions in res.sessions.values():
            for s in sessions:
                key = lambda it: tuple(sorted((k, v) for k, v in it.items() if k != "i"))
                seq = [key(it) for it in session_items(s, feats, "sequential", seed=0)]
                shf = [key(it) for it in session_items(s, feats, "shuffled", seed=0)]
                same &= Counter(seq) == Counter(shf)
                reordered += seq != shf
                n += 1
        ok = same and n > 0 and reordered > 0
        record(9, ok, f"{n} sessions keep their feature multisets ({reordered} reordered)")
        assert ok
