import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpfuse.datamodel import Bounds, Position
from fpfuse.fuse import (Bba, ChoquetMeasure, ConflictError, argmax_belief,
                         bba_from_point, choquet, confidence, convex_combo,
                         dempster_combine, fit_choquet_measure, make_grid,
                         weighted_centroid, write_belief_csv, write_belief_pgm)


class TestGrid:
    def test_floor_6x14_unit_cells(self):
        grid = make_grid(Bounds(0, 0, 6, 14), 1.0)
        assert grid.n_cells == 84

    def test_2x2_centroids_row_major(self):
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        assert grid.centroids.tolist() == [[0.5, 0.5], [1.5, 0.5],
                                           [0.5, 1.5], [1.5, 1.5]]

    def test_oversize_cell_ceiling(self):
        grid = make_grid(Bounds(0, 0, 6, 14), 10.0)
        assert grid.n_cells == 2  # ceil(0.6) * ceil(1.4)

    def test_centroids_inside_bounds(self):
        b = Bounds(1.0, -2.0, 7.3, 3.1)
        grid = make_grid(b, 0.8)
        for cx, cy in grid.centroids:
            assert b.contains(cx, cy)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            make_grid(Bounds(0, 0, 1, 1), 0.0)


class TestBba:
    def grid2(self):
        return make_grid(Bounds(0, 0, 2, 1), 1.0)  # cells (0.5,.5), (1.5,.5)

    def test_softmax_hand_case(self):
        # distances 1 and 2 at alpha 1: exp(-1), exp(-2) normalized
        m = bba_from_point(Position(-0.5, 0.5), self.grid2(), 1.0, 0.0)
        assert m.singleton[0] == pytest.approx(0.7310585786300049, abs=1e-12)
        assert m.singleton[1] == pytest.approx(0.2689414213699951, abs=1e-12)

    def test_concentration_at_large_alpha(self):
        grid = self.grid2()
        m = bba_from_point(Position(0.5, 0.5), grid, 50.0, 0.1)
        assert m.singleton[0] > 0.99 * 0.9

    def test_uniform_at_vanishing_alpha(self):
        grid = self.grid2()
        m = bba_from_point(Position(0.1, 0.9), grid, 1e-9, 0.2)
        assert np.allclose(m.singleton, 0.8 / 2, atol=1e-6)

    def test_simplex_invariant(self):
        grid = make_grid(Bounds(0, 0, 5, 5), 0.7)
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = Position(*rng.uniform(0, 5, 2))
            m = bba_from_point(p, grid, float(rng.uniform(0.05, 10)),
                               float(rng.uniform(0, 0.5)))
            assert np.all(m.singleton >= 0)
            assert m.singleton.sum() + m.theta_mass == pytest.approx(1.0, abs=1e-9)


class TestDempster:
    def test_hand_case(self):
        fused = dempster_combine(Bba(np.array([0.6, 0.4]), 0.0),
                                 Bba(np.array([0.5, 0.5]), 0.0))
        assert fused.singleton[0] == pytest.approx(0.6, abs=1e-12)
        assert fused.singleton[1] == pytest.approx(0.4, abs=1e-12)

    def test_vacuous_is_identity(self):
        m = Bba(np.array([0.3, 0.45, 0.25]), 0.0)
        fused = dempster_combine(m, Bba(np.zeros(3), 1.0))
        assert np.allclose(fused.singleton, m.singleton, atol=1e-15)
        assert fused.theta_mass == 0.0

    def test_uniform_symmetric(self):
        m = Bba(np.array([0.5, 0.5]), 0.0)
        fused = dempster_combine(m, m)
        assert np.allclose(fused.singleton, 0.5)

    def test_total_conflict_raises(self):
        with pytest.raises(ConflictError):
            dempster_combine(Bba(np.array([1.0, 0.0]), 0.0),
                             Bba(np.array([0.0, 1.0]), 0.0))

    def test_commutative(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            a = rng.dirichlet(np.ones(5)) * 0.9
            b = rng.dirichlet(np.ones(5)) * 0.7
            m1 = Bba(a, 1.0 - a.sum())
            m2 = Bba(b, 1.0 - b.sum())
            ab = dempster_combine(m1, m2)
            ba = dempster_combine(m2, m1)
            assert np.allclose(ab.singleton, ba.singleton, atol=1e-12)
            assert ab.theta_mass == pytest.approx(ba.theta_mass, abs=1e-12)

    def test_agreeing_points_argmax(self):
        grid = make_grid(Bounds(0, 0, 4, 4), 1.0)
        target = Position(2.4, 1.6)
        m1 = bba_from_point(Position(2.45, 1.55), grid, 3.0, 0.05)
        m2 = bba_from_point(Position(2.35, 1.62), grid, 3.0, 0.05)
        fused = dempster_combine(m1, m2)
        cell, centroid = argmax_belief(fused, grid)
        assert math.hypot(centroid.x - target.x, centroid.y - target.y) < 0.8

    def test_argmax_tie_breaks_low_index(self):
        m = Bba(np.full(4, 0.25), 0.0)
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        cell, _ = argmax_belief(m, grid)
        assert cell == 0


class TestConfidence:
    def test_on_centroid_is_one(self):
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        assert confidence(Position(0.5, 0.5), grid, 2.0) == pytest.approx(1.0)

    def test_e_folding_distance(self):
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        beta = 2.0
        p = Position(0.5, 0.5 + 1.0 / beta)
        assert confidence(p, grid, beta) == pytest.approx(math.exp(-1.0),
                                                          abs=1e-12)

    def test_monotone_decreasing(self):
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        near = confidence(Position(0.6, 0.5), grid, 1.0)
        far = confidence(Position(0.9, 0.5), grid, 1.0)
        assert far < near


class TestChoquet:
    def test_equal_scores_any_measure(self):
        for mu in (ChoquetMeasure(0, 0), ChoquetMeasure(1, 0.3)):
            assert choquet(0.4, 0.4, mu) == 0.4

    def test_limits(self):
        assert choquet(0.2, 0.8, ChoquetMeasure(0.7, 1.0)) == 0.8  # max
        assert choquet(0.2, 0.8, ChoquetMeasure(0.7, 0.0)) == 0.2  # min
        assert choquet(0.8, 0.2, ChoquetMeasure(1.0, 0.7)) == 0.8

    def test_hand_value(self):
        assert choquet(0.2, 0.8, ChoquetMeasure(0.1, 0.5)) == pytest.approx(0.5)

    @settings(max_examples=200, deadline=None)
    @given(s1=st.floats(0, 1), s2=st.floats(0, 1),
           mu1=st.floats(0, 1), mu2=st.floats(0, 1))
    def test_internality(self, s1, s2, mu1, mu2):
        c = choquet(s1, s2, ChoquetMeasure(mu1, mu2))
        assert min(s1, s2) - 1e-12 <= c <= max(s1, s2) + 1e-12

    def test_fit_max_rule(self):
        rng = np.random.default_rng(0)
        s = rng.random((300, 2))
        fit = fit_choquet_measure(s, np.maximum(s[:, 0], s[:, 1]))
        assert abs(fit.measure.mu1 - 1.0) < 1e-3
        assert abs(fit.measure.mu2 - 1.0) < 1e-3

    def test_fit_min_rule(self):
        rng = np.random.default_rng(1)
        s = rng.random((300, 2))
        fit = fit_choquet_measure(s, np.minimum(s[:, 0], s[:, 1]))
        assert fit.measure.mu1 < 1e-3 and fit.measure.mu2 < 1e-3

    def test_fit_degenerate_flags(self):
        rng = np.random.default_rng(2)
        s1 = rng.random(50)
        scores = np.column_stack([s1, s1])
        fit = fit_choquet_measure(scores, s1)
        assert fit.measure.mu1 == 0.5 and fit.measure.mu2 == 0.5
        assert not fit.mu1_identifiable and not fit.mu2_identifiable

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 500))
    def test_fit_stays_in_box(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.random((20, 2))
        t = rng.random(20) * 2 - 0.5  # targets outside [0,1] still fine
        fit = fit_choquet_measure(s, t)
        assert 0.0 <= fit.measure.mu1 <= 1.0
        assert 0.0 <= fit.measure.mu2 <= 1.0


class TestConvexCombo:
    def test_endpoints_and_midpoint(self):
        r1, r2 = Position(0, 0), Position(2, 2)
        assert convex_combo(r1, r2, 1.0) == r1
        assert convex_combo(r1, r2, 0.0) == r2
        mid = convex_combo(r1, r2, 0.5)
        assert (mid.x, mid.y) == (1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(lam=st.floats(0, 1))
    def test_stays_on_segment(self, lam):
        r1, r2 = Position(-1, 4), Position(3, -2)
        p = convex_combo(r1, r2, lam)
        assert min(r1.x, r2.x) - 1e-12 <= p.x <= max(r1.x, r2.x) + 1e-12
        assert min(r1.y, r2.y) - 1e-12 <= p.y <= max(r1.y, r2.y) + 1e-12


class TestBeliefExport:
    def test_pgm_peak_matches_argmax(self, tmp_path):
        grid = make_grid(Bounds(0, 0, 3, 2), 1.0)
        m = bba_from_point(Position(2.5, 1.5), grid, 2.0, 0.05)
        pgm = tmp_path / "belief.pgm"
        write_belief_pgm(m, grid, pgm)
        lines = pgm.read_text().splitlines()
        assert lines[0] == "P2"
        assert lines[1] == "3 2" and lines[2] == "255"
        pixels = [int(v) for row in lines[3:] for v in row.split()]
        assert len(pixels) == grid.n_cells
        assert pixels.index(max(pixels)) == argmax_belief(m, grid)[0]
        assert max(pixels) == 255

    def test_csv_rowcount_and_mass_sum(self, tmp_path):
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        m = bba_from_point(Position(1.0, 1.0), grid, 1.0, 0.0)
        out = tmp_path / "belief.csv"
        write_belief_csv(m, grid, out)
        rows = out.read_text().strip().splitlines()
        assert rows[0] == "cell_index,cx,cy,mass"
        assert len(rows) == 1 + grid.n_cells
        total = sum(float(r.split(",")[3]) for r in rows[1:])
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_weighted_centroid_of_symmetric_mass(self):
        grid = make_grid(Bounds(0, 0, 2, 2), 1.0)
        m = Bba(np.full(4, 0.25), 0.0)
        c = weighted_centroid(m, grid)
        assert (c.x, c.y) == (1.0, 1.0)
