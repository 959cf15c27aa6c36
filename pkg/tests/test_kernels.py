"""Hot kernels: jit and numpy paths agree with each other and the oracle."""

import subprocess
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomy_cbir import kernels
from oracles import nearest_oracle


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(42)


class TestNearestCodes:
    def test_matches_oracle(self, rng):
        flat = rng.standard_normal((64, 8))
        book = rng.standard_normal((17, 8))
        idx, sq = kernels.nearest_codes(flat, book)
        oidx, osq = nearest_oracle(flat, book)
        assert np.array_equal(idx, oidx)
        assert np.allclose(sq, osq, rtol=1e-12, atol=1e-12)

    def test_tie_breaks_to_lowest_index(self):
        book = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        flat = np.array([[1.0, 0.0], [0.5, 0.5]])
        idx, _ = kernels.nearest_codes(flat, book)
        assert idx[0] == 0  # codes 0 and 1 identical: lowest index wins
        assert idx[1] == 0  # equidistant to all three: still lowest

    def test_exact_hit_gives_zero_distance(self, rng):
        book = rng.standard_normal((9, 5))
        flat = book[[3, 7, 0]]
        idx, sq = kernels.nearest_codes(flat, book)
        assert list(idx) == [3, 7, 0]
        assert np.all(sq == 0.0)

    def test_numpy_and_numba_paths_agree(self, rng):
        if not kernels.HAVE_NUMBA:
            pytest.skip("numba path not active")
        flat = rng.standard_normal((40, 6))
        book = rng.standard_normal((12, 6))
        i_np, s_np = kernels.nearest_codes_numpy(flat, book)
        i_nb, s_nb = kernels.nearest_codes_numba(flat, book)
        assert np.array_equal(i_np, i_nb)
        assert np.allclose(s_np, s_nb, rtol=1e-10, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 30), st.integers(1, 10),
           st.integers(1, 40))
    def test_property_matches_oracle(self, seed, k, d, n):
        r = np.random.default_rng(seed)
        flat = r.standard_normal((n, d))
        book = r.standard_normal((k, d))
        idx, sq = kernels.nearest_codes(flat, book)
        oidx, osq = nearest_oracle(flat, book)
        assert np.array_equal(idx, oidx)
        assert np.allclose(sq, osq, rtol=1e-10, atol=1e-12)


class TestL2Scans:
    def test_sq_l2_to_refs_matches_direct(self, rng):
        q = rng.standard_normal(32)
        refs = rng.standard_normal((11, 32))
        d2 = kernels.sq_l2_to_refs(q, refs)
        direct = ((refs - q) ** 2).sum(axis=1)
        assert np.allclose(d2, direct, rtol=1e-12, atol=1e-12)

    def test_pairwise_matches_direct(self, rng):
        qs = rng.standard_normal((5, 16))
        refs = rng.standard_normal((7, 16))
        d2 = kernels.pairwise_sq_l2(qs, refs)
        direct = ((qs[:, None, :] - refs[None]) ** 2).sum(axis=2)
        assert np.allclose(d2, direct, rtol=1e-9, atol=1e-9)

    def test_non_negative(self, rng):
        qs = rng.standard_normal((4, 8)) * 1e-4
        refs = qs.copy()
        assert (kernels.pairwise_sq_l2(qs, refs) >= 0).all()
        assert (kernels.sq_l2_to_refs(qs[0], refs) >= 0).all()

    def test_self_distance_zero(self, rng):
        refs = rng.standard_normal((6, 12))
        d2 = kernels.sq_l2_to_refs(refs[2], refs)
        assert d2[2] == 0.0


class TestEnvFlagFallback:
    def test_flag_selects_numpy_path(self):
        """A child interpreter with the flag set must expose the numpy path."""
        code = textwrap.dedent("""
            import numpy as np
            from anatomy_cbir import kernels
            assert not kernels.HAVE_NUMBA
            assert kernels.nearest_codes is kernels.nearest_codes_numpy
            idx, sq = kernels.nearest_codes(np.eye(3), np.eye(3))
            assert list(idx) == [0, 1, 2]
            print("fallback-ok")
        """)
        proc = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True,
            env={"ANATOMY_CBIR_NO_NUMBA": "1", "PATH": "/usr/bin:/bin",
                 "HOME": "/root"},
        )
        assert proc.returncode == 0, proc.stderr
        assert "fallback-ok" in proc.stdout

    def test_default_path_uses_numba_when_available(self):
        if not kernels.HAVE_NUMBA:
            pytest.skip("numba not importable here")
        assert kernels.nearest_codes is kernels.nearest_codes_numba
