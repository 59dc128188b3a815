"""The numba and numpy paths of every kernel agree."""

import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from adaudit import kernels

floats = st.floats(-50, 50, allow_nan=False)


class TestEquivalence:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(floats, min_size=1, max_size=40), st.floats(0.05, 5))
    def test_kde_grid(self, xs, h):
        x = np.array(xs)
        grid = np.linspace(x.min() - 3, x.max() + 3, 97)
        np.testing.assert_allclose(kernels.kde_grid_numba(x, grid, h), kernels.kde_grid_numpy(x, grid, h),
                                   rtol=1e-12, atol=1e-300)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=0, max_size=30))
    def test_first_max_then_min(self, vals):
        d = np.array(vals, dtype=np.float64)
        assert kernels.first_max_then_min_numba(d) == kernels.first_max_then_min_numpy(d)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 1000), max_size=50).map(sorted), st.floats(0.5, 300))
    def test_session_starts(self, ts, theta):
        t = np.array(ts, dtype=np.float64)
        np.testing.assert_array_equal(kernels.session_starts_numba(t, theta),
                                      kernels.session_starts_numpy(t, theta))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=30), st.floats(0, 4), st.floats(0.01, 30))
    def test_nb_alpha_sums(self, ys, alpha, m):
        y = np.array(ys, dtype=np.float64)
        mu = np.full(y.shape, m)
        for a, b in zip(kernels.nb_alpha_sums_numba(y, mu, alpha), kernels.nb_alpha_sums_numpy(y, mu, alpha)):
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-9)

    def test_cluster_sums(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(60, 4))
        codes = rng.integers(0, 7, 60)
        np.testing.assert_allclose(kernels.cluster_sums_numba(s, codes, 7), kernels.cluster_sums_numpy(s, codes, 7),
                                   rtol=1e-13, atol=1e-13)


class TestOracles:
    def test_alpha_sums_vs_gammaln(self):
        y = np.arange(0, 30, dtype=np.float64)
        alpha = 0.7
        l0, _, _ = kernels.nb_alpha_sums_numpy(y, np.ones_like(y), alpha)
        r = 1 / alpha
        ref = gammaln(y + r) - gammaln(r) + y * math.log(alpha)
        np.testing.assert_allclose(l0, ref, rtol=1e-12, atol=1e-12)

    def test_plateau_resolves_left(self):
        d = np.array([0.0, 1.0, 2.0, 2.0, 2.0, 1.0, 0.5, 0.5, 1.0])
        assert kernels.first_max_then_min_numpy(d) == (2, 6)

    def test_monotone_has_no_extrema(self):
        assert kernels.first_max_then_min_numpy(np.arange(10.0)) == (-1, -1)


class TestSwitch:
    def test_env_disables_numba(self):
        code = "from adaudit import kernels; print(kernels.backend_name())"
        env = {**os.environ, "AD_AUDIT_DISABLE_NUMBA": "1"}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numpy"

    @pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
    def test_default_is_numba(self):
        code = "from adaudit import kernels; print(kernels.backend_name())"
        env = {k: v for k, v in os.environ.items() if k != "AD_AUDIT_DISABLE_NUMBA"}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numba"
