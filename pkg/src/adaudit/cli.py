"""Command-line pipeline: sessionize, features, audit, nbr, reconstruct, evaluate.

Every stage reads and writes plain JSONL/CSV files in one work directory and
records what it did in ``run_manifest.json``.  Wall-clock timestamps appear
only in the manifest, so all other outputs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import platform
import re
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__, kernels
from .audit import DEFAULT_TARGETS, build_cells, read_cells, summarize, write_cells, write_report
from .categories import ATTRIBUTES, reference_defaults
from .evaluate import (LENIENT_COLUMNS, REPORT_COLUMNS, baseline_rows, evaluate_predictions,
                       lenient_table, load_prior, write_csv)
from .features import extract_corpus, load_taxonomy, read_features, write_features
from .ingest import (CohortDataset, build_cohort, load_profiles, parse_impressions, write_impressions,
                     write_profiles)
from .llm_client import (EXTRACTION_SETTINGS, RECONSTRUCTION_SETTINGS, HttpBackend, LLMClient,
                         MemoryCache, ResponseCache, TokenBucket, mock_backend)
from .nbr import ModelSpec, build_panel, fit_panel, irr_table, screen_interactions, write_irr_csv
from .reconstruct import (CONDITIONS, read_session_predictions, read_user_predictions, run_reconstruction,
                          write_jsonl)
from .sessionize import Session, SessionizerConfig, sessionize_cohort

log = logging.getLogger("adaudit")

STAGES = ("sessionize", "features", "audit", "nbr", "reconstruct", "evaluate")

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "paths": {
        "impressions": None,  # None: bundled fixture
        "profiles": None,
        "workdir": "adaudit-out",
        "cache_dir": None,  # None: <workdir>/cache
    },
    "ingest": {"keep_source": "facebook"},
    "sessionize": {
        "kde_bandwidth_rule": "silverman",
        "bandwidth": None,
        "grid_points": 512,
        "fallback_theta": 389.0,
        "min_gaps_for_kde": 10,
        "theta": None,  # fixed threshold in seconds, skips the KDE average
    },
    "features": {"taxonomy": None, **EXTRACTION_SETTINGS},
    "audit": {"categories": list(DEFAULT_TARGETS), "include_prefer_not_to_say": True},
    "nbr": {
        "categories": ["Gambling", "Politics", "Alcohol"],
        "attributes": list(ATTRIBUTES),
        "references": {},  # attribute -> reference level; defaults per attribute
        "interaction_candidates": [["gender", "income"]],
        "screen_threshold": 0.10,
        "significance": 0.05,
    },
    "reconstruct": {"conditions": list(CONDITIONS), **RECONSTRUCTION_SETTINGS},
    "evaluate": {"prior": None, "runs": 1000},
    "backend": {
        "kind": "http",
        "url": None,
        "model": "",
        "key_env": "AD_AUDIT_BACKEND_KEY",
        "requests_per_minute": 60,
        "max_in_flight": 4,
        "max_attempts": 5,
        "mock_truth_rate": 0.0,
    },
}


class StageError(RuntimeError):
    pass


class MissingArtifactError(StageError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path.name} in {path.parent}; run `adaudit {producer}` first")


# ---------------------------------------------------------------------------
# Config


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        unknown = set(data) - set(DEFAULT_CONFIG)
        if unknown:
            raise StageError(f"unknown config section(s): {sorted(unknown)}")
        cfg = merge(cfg, data)
    return merge(cfg, overrides or {})


# ---------------------------------------------------------------------------
# Work directory layout


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def impressions(self):
        return self.root / "cohort_impressions.jsonl"

    @property
    def profiles(self):
        return self.root / "cohort_profiles.csv"

    @property
    def sessions(self):
        return self.root / "sessions.jsonl"

    @property
    def sessionize_report(self):
        return self.root / "sessionize_report.csv"

    @property
    def features(self):
        return self.root / "features.jsonl"

    @property
    def cells(self):
        return self.root / "cells.jsonl"

    @property
    def audit_report(self):
        return self.root / "audit_report.csv"

    def nbr_report(self, category: str, interactions: bool = False) -> Path:
        slug = re.sub(r"[^a-z0-9]+", "_", category.lower()).strip("_")
        return self.root / f"nbr_{slug}{'_interactions' if interactions else ''}.csv"

    def session_predictions(self, condition: str) -> Path:
        return self.root / f"session_predictions_{condition}.jsonl"

    def user_predictions(self, condition: str) -> Path:
        return self.root / f"user_predictions_{condition}.jsonl"

    @property
    def eval_report(self):
        return self.root / "eval_report.csv"

    @property
    def eval_lenient(self):
        return self.root / "eval_lenient.csv"

    @property
    def manifest(self):
        return self.root / "run_manifest.json"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, producer)
        return path


def _input_paths(cfg):
    p = cfg["paths"]
    if p["impressions"] is None or p["profiles"] is None:
        fx = resources.files("adaudit").joinpath("data", "fixture")
        return Path(str(fx.joinpath("impressions.jsonl"))), Path(str(fx.joinpath("profiles.csv")))
    return Path(p["impressions"]), Path(p["profiles"])


# ---------------------------------------------------------------------------
# Shared pieces


def make_client(cfg, profiles=None) -> LLMClient:
    b = cfg["backend"]
    if b["kind"] == "mock":
        truths = {u: {a: p.get(a) for a in ATTRIBUTES} for u, p in (profiles or {}).items()}
        backend = mock_backend(cfg["seed"], truths=truths, truth_rate=b["mock_truth_rate"])
        limiter = None
    elif b["kind"] == "http":
        backend = HttpBackend(b["url"], b["model"], b["key_env"])
        limiter = TokenBucket(b["requests_per_minute"])
    else:
        raise StageError(f"unknown backend kind {b['kind']!r}")
    cache_dir = cfg["paths"]["cache_dir"]
    if cache_dir is None:
        cache_dir = Path(cfg["paths"]["workdir"]) / "cache"
    # responses depend on the backend as well as the request, so each
    # backend configuration gets its own cache namespace
    if b["kind"] == "mock":
        space = f"mock-seed{cfg['seed']}-p{float(b['mock_truth_rate']):g}"
    else:
        space = re.sub(r"[^A-Za-z0-9._-]+", "_", f"http-{b['model'] or 'default'}")
    cache = MemoryCache() if cache_dir == ":memory:" else ResponseCache(Path(cache_dir) / space)
    return LLMClient(backend, cache, max_attempts=b["max_attempts"], rate_limiter=limiter,
                     max_in_flight=max(b["max_in_flight"], cfg["jobs"]))


def _load_cohort(lay: Layout) -> CohortDataset:
    imps = parse_impressions(lay.require(lay.impressions, "sessionize"))
    profiles = load_profiles(lay.require(lay.profiles, "sessionize"))
    return CohortDataset(imps, profiles)


def _load_sessions(lay: Layout, cohort: CohortDataset) -> dict[str, list[Session]]:
    by_user = cohort.by_user()
    out: dict[str, list[Session]] = {}
    with lay.require(lay.sessions, "sessionize").open(encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            imps = by_user[rec["user_id"]]
            chunk = [imp for imp in imps if rec["start"] <= imp.timestamp <= rec["end"]]
            out.setdefault(rec["user_id"], []).append(Session(rec["session_id"], rec["user_id"], chunk))
    return out


def _settings(section: dict) -> dict:
    return {"temperature": float(section["temperature"]), "max_output_tokens": int(section["max_output_tokens"])}


# ---------------------------------------------------------------------------
# Stages.  Each returns (outputs, manifest entry).


def plan(stage: str, cfg) -> tuple[list[str], list[str]]:
    lay = Layout(Path(cfg["paths"]["workdir"]))
    imp, prof = _input_paths(cfg)
    conds = cfg["reconstruct"]["conditions"]
    io = {
        "sessionize": ([imp, prof], [lay.impressions, lay.profiles, lay.sessions, lay.sessionize_report]),
        "features": ([lay.impressions], [lay.features]),
        "audit": ([lay.impressions, lay.profiles, lay.features], [lay.cells, lay.audit_report]),
        "nbr": ([lay.cells, lay.profiles], [lay.nbr_report(c) for c in cfg["nbr"]["categories"]]),
        "reconstruct": ([lay.sessions, lay.features],
                        [lay.session_predictions(c) for c in sorted({"shuffled" if c == "shuffled"
                                                                     else "sequential" for c in conds})]
                        + [lay.user_predictions(c) for c in conds]),
        "evaluate": ([lay.profiles] + [lay.user_predictions(c) for c in conds],
                     [lay.eval_report, lay.eval_lenient]),
    }
    i, o = io[stage]
    return [str(p) for p in i], [str(p) for p in o]


def cmd_sessionize(cfg, lay: Layout) -> dict:
    imp_path, prof_path = _input_paths(cfg)
    for p in (imp_path, prof_path):
        if not p.exists():
            raise StageError(f"input file not found: {p}")
    impressions = parse_impressions(imp_path)
    profiles = load_profiles(prof_path)
    cohort = build_cohort(impressions, profiles, cfg["ingest"]["keep_source"])
    s = cfg["sessionize"]
    config = SessionizerConfig(s["kde_bandwidth_rule"], s["bandwidth"], s["grid_points"],
                               s["fallback_theta"], s["min_gaps_for_kde"])
    res = sessionize_cohort(cohort, config, theta=s["theta"], jobs=cfg["jobs"])
    write_impressions(lay.impressions, res.cohort.impressions)
    write_profiles(lay.profiles, res.cohort.profiles)
    with lay.sessions.open("w", encoding="utf-8") as fh:
        for user in sorted(res.sessions):
            for sess in res.sessions[user]:
                fh.write(json.dumps(sess.to_json(), sort_keys=True) + "\n")
    with lay.sessionize_report.open("w", encoding="utf-8", newline="") as fh:
        rows = res.report_rows()
        w = csv.DictWriter(fh, ["user_id", "n_impressions", "n_gaps", "theta_user",
                                "n_sessions_pre_filter", "n_sessions_post_filter"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    n_sessions = sum(len(v) for v in res.sessions.values())
    return {"theta": res.theta, "theta_source": res.theta_source,
            "counts": {**res.cohort.counts, "sessions_kept": n_sessions, "users_kept": len(res.sessions)}}


def cmd_features(cfg, lay: Layout) -> dict:
    cohort = _load_cohort(lay)
    tax = load_taxonomy() if cfg["features"]["taxonomy"] is None else load_taxonomy(cfg["features"]["taxonomy"])
    client = make_client(cfg)
    feats = extract_corpus(cohort.impressions, tax, client, jobs=cfg["jobs"],
                           settings=_settings(cfg["features"]))
    write_features(lay.features, feats)
    return {"taxonomy_version": tax.version, "counts": {"ads_with_features": len(feats)},
            "network_calls": client.network_calls}


def cmd_audit(cfg, lay: Layout) -> dict:
    cohort = _load_cohort(lay)
    feats = read_features(lay.require(lay.features, "features"))
    cells = build_cells(cohort.impressions, feats)
    write_cells(lay.cells, cells)
    a = cfg["audit"]
    summaries = summarize(cells, cohort.profiles, a["categories"], a["include_prefer_not_to_say"])
    write_report(lay.audit_report, summaries)
    return {"counts": {"user_weeks": len(cells), "active_user_weeks": sum(c.active for c in cells)},
            "unit": "active user-week"}


def cmd_nbr(cfg, lay: Layout) -> dict:
    cells = read_cells(lay.require(lay.cells, "audit"))
    profiles = load_profiles(lay.require(lay.profiles, "sessionize"))
    n = cfg["nbr"]
    refs = {**reference_defaults(), **n["references"]}
    attrs = tuple(n["attributes"])
    entry = {}
    for cat in n["categories"]:
        rows = build_panel(cells, profiles, cat, attrs)
        out = lay.nbr_report(cat)
        info = {"n_obs": len(rows)}
        if len(rows) < 2 or len({r.user_id for r in rows}) < 2:
            write_irr_csv(out, [])
            info["status"] = "too few observations"
            entry[cat] = info
            continue
        spec = ModelSpec(attrs, refs)
        fit, cols = fit_panel(rows, spec)
        if not fit.estimable:
            write_irr_csv(out, [])
            info["status"] = "not estimable"
            entry[cat] = info
            continue
        table = irr_table(fit, fit.cov_cluster, spec, cols)
        write_irr_csv(out, table)
        info.update(status="ok", converged=fit.converged, alpha=fit.alpha, iterations=fit.iterations,
                    dropped=fit.dropped, separation=fit.separation, n_clusters=fit.n_clusters,
                    few_clusters=fit.n_clusters <= len(fit.kept))
        pairs = screen_interactions(table, [tuple(p) for p in n["interaction_candidates"]],
                                    n["screen_threshold"])
        info["interactions"] = [list(p) for p in pairs]
        if pairs:
            ispec = ModelSpec(attrs, refs, tuple(pairs), n["screen_threshold"])
            ifit, icols = fit_panel(rows, ispec)
            if ifit.estimable:
                write_irr_csv(lay.nbr_report(cat, True), irr_table(ifit, ifit.cov_cluster, ispec, icols))
                info["interaction_fit"] = {"converged": ifit.converged, "dropped": ifit.dropped,
                                           "separation": ifit.separation}
        entry[cat] = info
    return {"models": entry}


def cmd_reconstruct(cfg, lay: Layout) -> dict:
    cohort = _load_cohort(lay)
    sessions = _load_sessions(lay, cohort)
    feats = read_features(lay.require(lay.features, "features"))
    client = make_client(cfg, cohort.profiles)
    conds = tuple(cfg["reconstruct"]["conditions"])
    bad = set(conds) - set(CONDITIONS)
    if bad:
        raise StageError(f"unknown condition(s) {sorted(bad)}")
    res = run_reconstruction(sessions, feats, client, conds, seed=cfg["seed"], jobs=cfg["jobs"])
    for c, preds in res.sessions.items():
        write_jsonl(lay.session_predictions(c), preds)
    for c, preds in res.users.items():
        write_jsonl(lay.user_predictions(c), preds)
    abst = sum(v == "<abstain>" for ps in res.users.values() for p in ps for v in p.predictions.values())
    return {"shuffle_seed": cfg["seed"], "conditions": list(conds),
            "counts": {"user_abstentions": abst}, "network_calls": client.network_calls}


def cmd_evaluate(cfg, lay: Layout) -> dict:
    profiles = load_profiles(lay.require(lay.profiles, "sessionize"))
    prior = load_prior() if cfg["evaluate"]["prior"] is None else load_prior(cfg["evaluate"]["prior"])
    rows = []
    for c in cfg["reconstruct"]["conditions"]:
        ups = read_user_predictions(lay.require(lay.user_predictions(c), "reconstruct"))
        preds = {u.user_id: u.predictions for u in ups}
        rows += evaluate_predictions(preds, profiles, "user", c)
        rows += evaluate_predictions(preds, profiles, "user", c, harmonized=True,
                                     method="model_harmonized")
        sp_path = lay.session_predictions("shuffled" if c == "shuffled" else "sequential")
        if c != "sequential_au" and sp_path.exists():
            sps = read_session_predictions(sp_path)
            spreds = {s.session_id: s.predictions for s in sps}
            struths = {s.session_id: profiles[s.user_id] for s in sps}
            rows += evaluate_predictions(spreds, struths, "session", c)
    rows += baseline_rows(profiles, prior, cfg["evaluate"]["runs"], cfg["seed"])
    write_csv(lay.eval_report, REPORT_COLUMNS, rows)
    write_csv(lay.eval_lenient, LENIENT_COLUMNS, lenient_table(rows))
    return {"prior": prior.provenance, "sampling_runs": cfg["evaluate"]["runs"], "sampling_seed": cfg["seed"],
            "macro_f1_universe": "classes present in the truth slice"}


COMMANDS = {
    "sessionize": cmd_sessionize,
    "features": cmd_features,
    "audit": cmd_audit,
    "nbr": cmd_nbr,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------------------
# Manifest


def _write_manifest(lay: Layout, cfg, stage: str, entry: dict, started: float) -> None:
    path = lay.manifest
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    manifest["config"] = cfg
    manifest["seed"] = cfg["seed"]
    manifest["versions"] = {
        "adaudit": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernels": kernels.backend_name(),
    }
    stages = manifest.setdefault("stages", {})
    stages[stage] = {**entry, "started": started, "finished": time.time()}
    if "theta" in entry:
        manifest["theta"] = entry["theta"]
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def run_stage(stage: str, cfg, dry_run: bool = False, out=None) -> None:
    if dry_run:
        out = out or sys.stdout
        inputs, outputs = plan(stage, cfg)
        print(f"[{stage}]", file=out)
        for p in inputs:
            print(f"  reads  {p}", file=out)
        for p in outputs:
            print(f"  writes {p}", file=out)
        return
    lay = Layout(Path(cfg["paths"]["workdir"]))
    lay.root.mkdir(parents=True, exist_ok=True)
    started = time.time()
    entry = COMMANDS[stage](cfg, lay)
    _write_manifest(lay, cfg, stage, entry, started)
    log.info("%s done", stage)


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="experiment seed (mock backend, shuffles, sampling)")
    common.add_argument("--jobs", type=int, help="worker threads for stage-internal parallelism")
    common.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")
    common.add_argument("--mock-backend", action="store_true", help="use the deterministic mock backend")
    common.add_argument("--workdir", help="output directory (overrides paths.workdir)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="adaudit", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "all" else "run every stage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            print("error: --jobs must be >= 1", file=sys.stderr)
            return 2
        overrides["jobs"] = args.jobs
    if args.mock_backend:
        overrides["backend"] = {"kind": "mock"}
    if args.workdir:
        overrides["paths"] = {"workdir": args.workdir}
    try:
        cfg = load_config(args.config, overrides)
        stages = STAGES if args.command == "all" else (args.command,)
        for st in stages:
            run_stage(st, cfg, args.dry_run)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
