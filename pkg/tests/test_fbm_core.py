"""Tests for fBm sampling, the geometric lift and the Levy-area process."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughscheme import fbm_core
from roughscheme.fbm_core import (
    FbmPath,
    fbm_covariance,
    generate_fbm,
    lift_geometric,
    lift_increments,
    levy_area_process,
    paths_from_increments,
    rect_increment,
    restrict,
    sample_increments,
)

hursts = st.floats(0.05, 0.95)
times = st.floats(0.0, 10.0)


class TestCovariance:
    @pytest.mark.parametrize("hurst", [0.1, 0.3, 0.4, 0.5, 0.8])
    def test_unit_variance_at_one(self, hurst):
        assert fbm_covariance(1.0, 1.0, hurst) == pytest.approx(1.0, abs=1e-15)

    @given(s=times, t=times)
    def test_brownian_case_is_min(self, s, t):
        assert fbm_covariance(s, t, 0.5) == pytest.approx(min(s, t), abs=1e-12)

    def test_known_value(self):
        # 1/2 * 2^0.8 by direct evaluation
        assert fbm_covariance(1.0, 2.0, 0.4) == pytest.approx(0.5 * 2**0.8, rel=1e-14)
        assert fbm_covariance(1.0, 2.0, 0.4) == pytest.approx(0.87055, abs=5e-6)

    def test_half_one_value(self):
        # 1/2 (0.5^0.8 + 1 - 0.5^0.8) = 0.5 exactly
        assert fbm_covariance(0.5, 1.0, 0.4) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.3])
    def test_rejects_hurst(self, bad):
        with pytest.raises(ValueError):
            fbm_covariance(1.0, 1.0, bad)

    def test_rejects_negative_time(self):
        with pytest.raises(ValueError):
            fbm_covariance(-1.0, 1.0, 0.4)

    @given(s=st.floats(0, 5), w=st.floats(0.01, 5), hurst=hursts)
    def test_increment_variance(self, s, w, hurst):
        assert rect_increment(s, s + w, s, s + w, hurst) == pytest.approx(w ** (2 * hurst), rel=1e-9)

    def test_rect_known_value(self):
        assert rect_increment(0, 1, 1, 2, 0.4) == pytest.approx(0.5 * (2**0.8 - 2), rel=1e-14)
        assert rect_increment(0, 1, 1, 2, 0.4) == pytest.approx(-0.12945, abs=5e-6)

    @given(u=st.floats(0, 3), a=st.floats(0.01, 2), gap=st.floats(0.01, 3), b=st.floats(0.01, 2),
           hurst=st.floats(0.05, 0.49))
    def test_disjoint_intervals_negative(self, u, a, gap, b, hurst):
        v = u + a
        s = v + gap
        assert rect_increment(u, v, s, s + b, hurst) < 0

    def test_rect_rejects_unordered(self):
        with pytest.raises(ValueError):
            rect_increment(1, 0, 0, 1, 0.4)

    @given(u=st.floats(0, 3), a=st.floats(0.01, 2), s=st.floats(0, 3), b=st.floats(0.01, 2), hurst=hursts)
    def test_rect_matches_covariance_combination(self, u, a, s, b, hurst):
        v, t = u + a, s + b
        c = lambda x, y: fbm_covariance(x, y, hurst)  # noqa: E731
        expect = c(v, t) - c(v, s) - c(u, t) + c(u, s)
        assert rect_increment(u, v, s, t, hurst) == pytest.approx(expect, abs=1e-9)


class TestSampling:
    def test_deterministic(self):
        a = generate_fbm(0.4, 256, 1.0, 2, seed=11)
        b = generate_fbm(0.4, 256, 1.0, 2, seed=11)
        assert np.array_equal(a.values, b.values)
        c = generate_fbm(0.4, 256, 1.0, 2, seed=12)
        assert not np.array_equal(a.values, c.values)

    def test_replicates_order_independent(self):
        x = sample_increments(0.4, 128, 1.0, 3, 5, [0, 1, 2, 3])
        y = sample_increments(0.4, 128, 1.0, 3, 5, [3, 1])
        assert np.array_equal(x[3], y[0])
        assert np.array_equal(x[1], y[1])

    def test_path_starts_at_zero(self):
        p = generate_fbm(0.3, 64, 2.0, 2, seed=1)
        assert p.values.shape == (2, 65)
        assert np.all(p.values[:, 0] == 0)
        assert p.times[-1] == pytest.approx(2.0)

    @pytest.mark.parametrize("n", [1, 0])
    def test_rejects_short_grid(self, n):
        with pytest.raises(ValueError):
            generate_fbm(0.4, n)

    def test_dense_and_fft_agree_in_law(self):
        # both methods give the exact law; compare empirical lag covariances
        n, reps = 16, 20000
        for method in ("fft", "dense"):
            dx = sample_increments(0.4, n, 1.0, 1, 3, range(reps), method=method)[..., 0]
            emp = np.mean(dx[:, 0] * dx[:, 1])
            exact = rect_increment(0, 1 / n, 1 / n, 2 / n, 0.4)
            se = np.std(dx[:, 0] * dx[:, 1]) / math.sqrt(reps)
            assert abs(emp - exact) < 4 * se

    def test_embedding_fallback(self, monkeypatch):
        monkeypatch.setattr(fbm_core, "_circulant_sqrt_eigs", lambda h, n: None)
        dx = sample_increments(0.4, 32, 1.0, 1, 0, [0])
        assert dx.shape == (1, 32, 1)

    def test_terminal_variance(self):
        reps = 10_000
        dx = sample_increments(0.4, 512, 1.0, 1, 21, range(reps))
        bt = dx.sum(axis=1)[:, 0]
        se = np.std(bt**2) / math.sqrt(reps)
        assert abs(np.mean(bt**2) - 1.0) < 3 * se

    def test_half_one_covariance(self):
        reps = 10_000
        b = paths_from_increments(sample_increments(0.4, 512, 1.0, 1, 22, range(reps)))[..., 0]
        prod = b[:, 256] * b[:, 512]
        se = np.std(prod) / math.sqrt(reps)
        assert abs(prod.mean() - fbm_covariance(0.5, 1.0, 0.4)) < 3 * se

    def test_disjoint_increment_covariance(self):
        reps = 10_000
        dx = sample_increments(0.35, 64, 1.0, 1, 23, range(reps))[..., 0]
        a, b = dx[:, 3:9].sum(axis=1), dx[:, 20:30].sum(axis=1)
        exact = rect_increment(3 / 64, 9 / 64, 20 / 64, 30 / 64, 0.35)
        se = np.std(a * b) / math.sqrt(reps)
        assert abs(np.mean(a * b) - exact) < 3 * se

    def test_components_independent(self):
        reps = 10_000
        dx = sample_increments(0.4, 64, 1.0, 3, 24, range(reps))
        bt = dx.sum(axis=1)
        for i, j in [(0, 1), (0, 2), (1, 2)]:
            prod = bt[:, i] * bt[:, j]
            assert abs(prod.mean()) < 3.5 * np.std(prod) / math.sqrt(reps)

    def test_csv(self):
        p = generate_fbm(0.4, 8, 1.0, 2, seed=0)
        text = p.to_csv()
        lines = text.strip().splitlines()
        assert lines[0] == "t,B1,B2"
        assert len(lines) == 10
        back = np.loadtxt(lines[1:], delimiter=",")
        assert np.array_equal(back[:, 1:].T, p.values)


class TestRestrict:
    def test_identity(self):
        p = generate_fbm(0.4, 64, seed=2)
        assert restrict(p, 1) is p

    def test_index_contract(self):
        p = generate_fbm(0.4, 1024, seed=3)
        r = restrict(p, 4)
        assert r.n_fine == 256
        assert np.array_equal(r.values[0], p.values[0, ::4])

    def test_composition(self):
        p = generate_fbm(0.4, 1024, seed=4)
        assert np.array_equal(restrict(restrict(p, 2), 2).values, restrict(p, 4).values)

    def test_divisibility(self):
        with pytest.raises(ValueError):
            restrict(generate_fbm(0.4, 100, seed=0), 3)


@pytest.fixture(scope="module")
def path():
    return generate_fbm(0.4, 32 * 64, 1.0, 3, seed=5)


class TestLift:
    def test_one_dimensional_is_half_square(self):
        p = generate_fbm(0.4, 256, 1.0, 1, seed=6)
        lift = lift_geometric(p, 16)
        assert np.allclose(lift.bb[:, 0, 0], 0.5 * lift.delta_b[:, 0] ** 2, rtol=0, atol=1e-15)

    def test_single_chord(self, path):
        lift = lift_geometric(path, path.n_fine)
        expect = 0.5 * lift.delta_b[:, :, None] * lift.delta_b[:, None, :]
        assert np.array_equal(lift.bb, expect)

    def test_shuffle_and_diagonal(self, path):
        lift = lift_geometric(path, 64)
        x = lift.delta_b
        outer = x[:, :, None] * x[:, None, :]
        assert np.max(np.abs(lift.bb + np.swapaxes(lift.bb, 1, 2) - outer)) < 1e-15
        assert np.max(np.abs(np.diagonal(lift.bb, axis1=1, axis2=2) - 0.5 * x**2)) < 1e-15

    def test_chen(self, path):
        fine = lift_geometric(path, 64)
        coarse = lift_geometric(path, 32)
        x, b = fine.delta_b, fine.bb
        st_ = b[0::2] + b[1::2] + x[0::2, :, None] * x[1::2, None, :]
        assert np.max(np.abs(st_ - coarse.bb)) < 1e-12 * np.max(np.abs(coarse.bb))

    def test_matches_direct_area_sum(self, path):
        # Levy area of a polygon as a plain double loop
        lift = lift_geometric(path, 64)
        dx = path.increments[:32]
        area = 0.0
        pos = np.zeros(3)
        for step in dx:
            area += 0.5 * (pos[0] * step[1] - pos[1] * step[0])
            pos += step
        assert lift.bb[0, 0, 1] - 0.5 * lift.delta_b[0, 0] * lift.delta_b[0, 1] == pytest.approx(area, abs=1e-13)

    def test_divisibility(self, path):
        with pytest.raises(ValueError):
            lift_geometric(path, 7)

    def test_diagonal_mean(self):
        reps, n, rho, hurst = 10_000, 16, 8, 0.4
        dx = sample_increments(hurst, n * rho, 1.0, 2, 31, range(reps))
        _, bb = lift_increments(dx, rho)
        x = bb[:, 0, 0, 0]
        se = np.std(x) / math.sqrt(reps)
        assert abs(x.mean() - 0.5 * (1 / n) ** (2 * hurst)) < 3 * se


class TestLevyArea:
    def test_zero_path(self):
        n, hurst = 8, 0.4
        path = FbmPath(hurst, 1.0, n * 4, 2, np.zeros((2, n * 4 + 1)))
        F = levy_area_process(lift_geometric(path, n))
        h2 = 0.5 * (1 / n) ** (2 * hurst)
        k = np.arange(n + 1)
        assert np.allclose(F.values[:, 0, 0], -k * h2)
        assert np.allclose(F.values[:, 1, 1], -k * h2)
        assert np.all(F.values[:, 0, 1] == 0)

    def test_telescoping(self):
        path = generate_fbm(0.4, 256, 1.0, 2, seed=8)
        lift = lift_geometric(path, 16)
        F = levy_area_process(lift)
        assert np.all(F.values[0] == 0)
        inc = np.diff(F.values, axis=0)
        expect = lift.bb - 0.5 * lift.step ** 0.8 * np.eye(2)
        assert np.allclose(inc, expect, atol=1e-14)

    @pytest.mark.slow
    def test_scaled_variance_close_to_q(self):
        from roughscheme.constants import qp_sum

        hurst, n, rho, reps = 0.4, 256, 64, 4000
        out = []
        for a in range(0, reps, 100):
            dx = sample_increments(hurst, n * rho, 1.0, 2, 41, range(a, a + 100))
            _, bb = lift_increments(dx, rho)
            out.append(bb[:, :, 0, 1].sum(axis=1))
        x = n ** (2 * hurst - 0.5) * np.concatenate(out)
        q = qp_sum(hurst).q_sum
        # rho=64 biases the variance low by about 4%; the MC error is about 2%
        assert abs(np.var(x) / q - 1) < 0.1
