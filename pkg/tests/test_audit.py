import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaudit import synth
from adaudit.audit import (WEEK_SECONDS, ExposureCell, build_cells, coverage, dataset_epoch, read_cells,
                           summarize, window_index, write_cells, write_report)
from adaudit.categories import ATTRIBUTES, LEVELS, PREFER_NOT_TO_SAY
from adaudit.features import AdFeatures
from adaudit.ingest import AdImpression

EPOCH = 1_700_006_400
FEATS = {"g": AdFeatures("g", "c", (), ("Gambling",), ("e",)),
         "ga": AdFeatures("ga", "c", (), ("Gambling", "Alcohol"), ("e",)),
         "r": AdFeatures("r", "c", (), ("Retail",), ("e",))}


def imp(user, t, ad):
    return AdImpression(user, EPOCH + t, ad, "facebook")


class TestWindows:
    def test_index(self):
        assert window_index(EPOCH, EPOCH) == 0
        assert window_index(EPOCH + WEEK_SECONDS - 1, EPOCH) == 0
        assert window_index(EPOCH + WEEK_SECONDS, EPOCH) == 1
        with pytest.raises(ValueError):
            window_index(EPOCH - 1, EPOCH)

    def test_epoch_is_utc_midnight(self):
        assert dataset_epoch([imp("u", 3600 * 13, "g"), imp("u", 86400 * 3, "g")]) == EPOCH

    @given(st.lists(st.integers(0, 10 * WEEK_SECONDS), min_size=1, max_size=30))
    def test_cells_conserve_impressions(self, offsets):
        imps = [imp("u", t, "ga") for t in offsets]
        cells = build_cells(imps, FEATS)
        assert sum(c.total_ads for c in cells) == len(imps)
        assert sum(c.count("Alcohol") for c in cells) == len(imps)
        assert [c.week_index for c in cells] == sorted({c.week_index for c in cells})


class TestCoverage:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.profiles = {u: synth.random_profile(u, rng) for u in ("a", "b")}
        self.profiles["b"] = type(self.profiles["a"])("b", self.profiles["a"].gender, *[
            self.profiles["a"].get(x) for x in ATTRIBUTES[1:]])

    def test_values(self):
        imps = [imp("a", k, "g") for k in range(2)] + [imp("a", 5, "r")]
        imps += [imp("b", k, "r") for k in range(3)]
        imps += [imp("b", WEEK_SECONDS + k, "ga") for k in range(4)]
        cells = build_cells(imps, FEATS)
        g = self.profiles["a"].gender
        s = coverage(cells, "gender", g, "Gambling", self.profiles)
        assert (s.n_active_user_weeks, s.coverage, s.avg_intensity) == (3, 2 / 3, 6 / 3)

    def test_inactive_weeks_ignored(self):
        cells = build_cells([imp("a", 0, "g"), imp("a", 1, "g")], FEATS)
        s = coverage(cells, "gender", self.profiles["a"].gender, "Gambling", self.profiles)
        assert s.empty and math.isnan(s.coverage) and math.isnan(s.avg_intensity)
        assert s.row()["coverage"] == ""

    def test_unknown_keys(self):
        with pytest.raises(KeyError):
            coverage([], "height", "tall", "Gambling", {})
        with pytest.raises(KeyError):
            coverage([], "gender", "Robot", "Gambling", {})

    def test_ads_without_features_count_in_total(self):
        cells = build_cells([imp("a", k, "unknown") for k in range(3)], FEATS)
        assert cells[0].total_ads == 3 and cells[0].category_counts == {}


class TestSummaries:
    def test_shape_and_pnts(self):
        cells = [ExposureCell("a", 0, 5, {"Gambling": 1})]
        n_levels = sum(len(LEVELS[a]) for a in ATTRIBUTES)
        n_pnts = sum(PREFER_NOT_TO_SAY in LEVELS[a] for a in ATTRIBUTES)
        assert len(summarize(cells, {}, ("Gambling",))) == n_levels
        assert len(summarize(cells, {}, ("Gambling",), include_pnts=False)) == n_levels - n_pnts

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 5), st.integers(0, 9), st.integers(0, 4)),
                    max_size=20))
    def test_bounds(self, raw):
        cells = {}
        for u, w, tot, g in raw:
            cells[(u, w)] = ExposureCell(u, w, tot, {"Gambling": min(g, tot)})
        rng = np.random.default_rng(1)
        profiles = {u: synth.random_profile(u, rng) for u in "abc"}
        for s in summarize(list(cells.values()), profiles, ("Gambling",)):
            if not s.empty:
                assert 0.0 <= s.coverage <= 1.0 and s.avg_intensity >= s.coverage * 1.0 - 1e-12

    def test_io(self, tmp_path):
        cells = [ExposureCell("a", 0, 5, {"Gambling": 1, "Alcohol": 2})]
        write_cells(tmp_path / "c.jsonl", cells)
        assert read_cells(tmp_path / "c.jsonl") == cells
        write_report(tmp_path / "r.csv", summarize(cells, {}, ("Gambling",)))
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "attribute,level,category,coverage,avg_intensity,n_active_user_weeks"
