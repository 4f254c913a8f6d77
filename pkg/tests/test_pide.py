import numpy as np
import pytest

from prefhedge import (
    DegenerateTimeError,
    DomainError,
    ModelParams,
    PositivityError,
    coefficients,
    default_grid,
    residual,
    solve_h,
)
from prefhedge.pide import GridSpec, HSurface

P06 = ModelParams(r=0.02, mu_S=0.07, sigma_S=0.2, rho=0.6,
                  mu_Y=0.02, sigma_Y=0.04, T=40.0, y0=np.log(2.0))
P0 = ModelParams(r=0.02, mu_S=0.07, sigma_S=0.2, rho=0.0,
                 mu_Y=0.02, sigma_Y=0.04, T=40.0, y0=np.log(2.0))


class TestCoefficients:
    def test_switched_off_control_and_correlation(self):
        t, y, yb = 10.0, 0.4, 1.1
        P, Q, R = coefficients(t, y, yb, 0.0, P0)
        gamma = np.exp(yb)
        assert P == pytest.approx(P0.r * (1 - gamma), rel=1e-14)
        assert Q == pytest.approx((yb - y) / (P0.T - t), rel=1e-14)
        assert R == pytest.approx(0.5 * P0.sigma_Y**2, rel=1e-15)

    def test_unit_gamma_point(self):
        # ybar = 0 is excluded from grids, but the formula itself is defined
        P, Q, R = coefficients(10.0, 0.4, 0.0, 0.3, P06)
        assert P == 0.0
        assert Q == pytest.approx(-0.4 / 30.0 + P06.rho * 0.3 * P06.sigma_S * P06.sigma_Y * 0.0)

    def test_matches_ungrouped_expansion(self):
        # independent regrouping: P' from the pre-collected equation, term by term
        rng = np.random.default_rng(2)
        for _ in range(200):
            t = rng.uniform(0, 39.0)
            y = rng.normal(1.0, 1.0)
            yb = rng.normal(1.4, 1.0)
            pi = rng.uniform(-1.0, 2.0)
            gamma = np.exp(yb)
            tau = P06.T - t
            P, Q, R = coefficients(t, y, yb, pi, P06)
            P_ref = (
                (P06.r + pi * (P06.mu_S - P06.r
                               + P06.rho * (P06.sigma_S / P06.sigma_Y)
                               * ((yb - y - P06.mu_Y * tau) / tau))) * (1 - gamma)
                - 0.5 * pi**2 * P06.sigma_S**2 * gamma * (1 - gamma)
            )
            Q_ref = (yb - y) / tau + P06.rho * pi * P06.sigma_S * P06.sigma_Y * (1 - gamma)
            assert P == pytest.approx(P_ref, rel=1e-12, abs=1e-12)
            assert Q == pytest.approx(Q_ref, rel=1e-12, abs=1e-12)
            assert R == pytest.approx(0.5 * P06.sigma_Y**2)

    def test_degenerate_time(self):
        with pytest.raises(DegenerateTimeError):
            coefficients(P06.T, 0.0, 0.5, 0.3, P06)


class TestGridSpec:
    def test_default_grid_shapes(self):
        g = default_grid(P06, n_t_steps=50, n_y=61, n_ybar=9, n_gh=11)
        assert g.t_nodes.size == 51
        assert g.ybar_nodes.size == 9
        assert g.gh_nodes.size == 11
        assert g.ybar_weights.sum() == pytest.approx(1.0)
        assert np.all(np.abs(g.ybar_nodes) > 1e-8)

    def test_rejects_unsorted_times(self):
        g = default_grid(P06, n_t_steps=10, n_y=21, n_ybar=5)
        with pytest.raises(DomainError):
            GridSpec(T=g.T, eps_T=g.eps_T, t_nodes=g.t_nodes[::-1],
                     y_nodes=g.y_nodes, ybar_nodes=g.ybar_nodes,
                     gh_nodes=g.gh_nodes, ybar_weights=g.ybar_weights)

    def test_rejects_nonuniform_y(self):
        g = default_grid(P06, n_t_steps=10, n_y=21, n_ybar=5)
        y = g.y_nodes.copy()
        y[3] += 0.3 * (y[1] - y[0])
        with pytest.raises(DomainError):
            GridSpec(T=g.T, eps_T=g.eps_T, t_nodes=g.t_nodes, y_nodes=y,
                     ybar_nodes=g.ybar_nodes, gh_nodes=g.gh_nodes,
                     ybar_weights=g.ybar_weights)

    def test_rejects_gamma_one_slice(self):
        g = default_grid(P06, n_t_steps=10, n_y=21, n_ybar=5)
        yb = g.ybar_nodes.copy()
        yb[2] = 0.0
        with pytest.raises(DomainError):
            GridSpec(T=g.T, eps_T=g.eps_T, t_nodes=g.t_nodes, y_nodes=g.y_nodes,
                     ybar_nodes=yb, gh_nodes=g.gh_nodes,
                     ybar_weights=g.ybar_weights)


class TestHSurface:
    def test_rejects_nonpositive_values(self):
        g = default_grid(P06, n_t_steps=5, n_y=21, n_ybar=5)
        vals = np.ones(g.shape)
        vals[2, 3, 1] = -1.0
        with pytest.raises(PositivityError):
            HSurface(grid=g, values=vals)

    def test_interp_constant_surface(self):
        g = default_grid(P06, n_t_steps=5, n_y=21, n_ybar=5)
        h = HSurface(grid=g, values=np.full(g.shape, 2.5))
        got = h.interp(g.t_nodes[2] * 1.01, 0.5 * (g.y_nodes[3] + g.y_nodes[4]))
        assert np.allclose(got, 2.5)
        assert h.interp_at(1.0, g.y_nodes[5], g.ybar_nodes[0] + 0.01) == pytest.approx(2.5)


class TestSolveH:
    def test_terminal_slice_is_ones(self):
        g = default_grid(P0, n_t_steps=30, n_y=61, n_ybar=7)
        h = solve_h(0.0, g, P0)
        assert np.all(h.values[-1] == 1.0)

    def test_zero_policy_reaction_is_exact(self):
        # pi = 0 makes each slice's reaction spatially constant, so the
        # factor is exp(r (1-gamma) (T_eff - t)) exactly; transport and
        # diffusion act on a flat profile and contribute nothing.
        g = default_grid(P0, n_t_steps=40, n_y=81, n_ybar=7)
        h = solve_h(0.0, g, P0)
        for j, yb in enumerate(g.ybar_nodes):
            gamma = np.exp(yb)
            expect = np.exp(P0.r * (1 - gamma) * (g.t_nodes[-1] - g.t_nodes[0]))
            assert h.values[0, 40, j] == pytest.approx(expect, rel=1e-9)

    def test_deterministic_limit(self):
        # vanishing preference volatility with mu_Y = 0: the bridge pins
        # y ~ ybar and the factor solves dh/dt = -r(1-gamma) h
        p = ModelParams(r=0.03, mu_S=0.07, sigma_S=0.2, rho=0.4,
                        mu_Y=0.0, sigma_Y=1e-4, T=10.0, y0=np.log(2.0))
        g = default_grid(p, n_t_steps=200, n_y=81, n_ybar=7)
        h = solve_h(0.0, g, p)
        for j, yb in enumerate(g.ybar_nodes):
            gamma = np.exp(yb)
            iy = int(np.argmin(np.abs(g.y_nodes - yb)))
            expect = np.exp(p.r * (1 - gamma) * (g.t_nodes[-1] - g.t_nodes[0]))
            assert h.values[0, iy, j] == pytest.approx(expect, rel=0.01)

    def test_constant_policy_exact_solution(self):
        # log-affine closed form for a constant fraction: the strongest
        # end-to-end check of coefficients, stepping, and boundary handling
        pi0 = 0.3
        g = default_grid(P06)
        h = solve_h(pi0, g, P06)
        c1 = pi0 * P06.rho * P06.sigma_S / P06.sigma_Y
        a = P06.r + pi0 * (P06.mu_S - P06.r) - 0.5 * pi0**2 * P06.sigma_S**2
        errs = []
        for k in (0, 150, 300):
            t = g.t_nodes[k]
            tau = P06.T - t
            for j in range(2, g.ybar_nodes.size - 2, 3):
                yb = g.ybar_nodes[j]
                gamma = np.exp(yb)
                for dz in (-2.0, 0.0, 2.0):
                    y = yb - P06.mu_Y * tau + dz * P06.sigma_Y * np.sqrt(tau)
                    iy = int(np.argmin(np.abs(g.y_nodes - y)))
                    y = g.y_nodes[iy]
                    w_exact = (
                        (1 - gamma) * (a * tau + c1 * (yb - y - P06.mu_Y * tau))
                        + 0.5 * (1 - gamma)**2 * pi0**2 * P06.sigma_S**2
                        * (1 - P06.rho**2) * tau
                    )
                    errs.append(abs(np.log(h.values[k, iy, j]) - w_exact))
        assert max(errs) < 0.08
        assert np.median(errs) < 0.02

    def test_positivity_everywhere(self):
        g = default_grid(P06, n_t_steps=60, n_y=91, n_ybar=9)
        h = solve_h(0.4, g, P06)
        assert np.all(h.values > 0)
        assert np.all(np.isfinite(h.values))

    def test_discrete_maximum_principle_low_gamma(self):
        # all slices below gamma < 1 and nonnegative reaction: h >= 1
        p = ModelParams(r=0.03, mu_S=0.07, sigma_S=0.2, rho=0.0,
                        mu_Y=-0.05, sigma_Y=0.04, T=10.0, y0=-1.5)
        g = default_grid(p, n_t_steps=60, n_y=81, n_ybar=7)
        assert np.all(g.ybar_nodes < 0)
        h = solve_h(0.1, g, p)
        Pv, _, _ = coefficients(
            g.t_nodes[:, None, None], g.y_nodes[None, :, None],
            g.ybar_nodes[None, None, :], 0.1, p,
        )
        assert np.all(Pv >= 0)
        assert np.all(h.values >= 1.0 - 1e-12)

    def test_slices_do_not_couple(self):
        g = default_grid(P06, n_t_steps=40, n_y=81, n_ybar=9)
        h_full = solve_h(0.3, g, P06)
        sub = GridSpec(T=g.T, eps_T=g.eps_T, t_nodes=g.t_nodes, y_nodes=g.y_nodes,
                       ybar_nodes=g.ybar_nodes[2:5], gh_nodes=g.gh_nodes,
                       ybar_weights=g.ybar_weights, band_sd=g.band_sd,
                       quad_sd=g.quad_sd)
        h_sub = solve_h(0.3, sub, P06)
        assert np.array_equal(h_sub.values, h_full.values[:, :, 2:5])


class TestResidual:
    def test_flat_surface_zero_coefficients(self):
        g = default_grid(P0, n_t_steps=20, n_y=41, n_ybar=5)
        h = HSurface(grid=g, values=np.ones(g.shape))

        def zero_coeffs(t, y, yb, pi, params):
            z = np.zeros(np.broadcast_shapes(np.shape(t), np.shape(y),
                                             np.shape(yb), np.shape(pi)))
            return z, z, z

        r = residual(h, 0.0, g, P0, coeff_fn=zero_coeffs)
        assert r.max_abs == 0.0

    def test_manufactured_solution(self):
        a = 0.05
        g = default_grid(P0, n_t_steps=2000, n_y=41, n_ybar=5)
        tt = g.t_nodes[:, None, None]
        vals = np.broadcast_to(np.exp(a * (P0.T - tt)), g.shape).copy()
        h = HSurface(grid=g, values=vals)

        def mms_coeffs(t, y, yb, pi, params):
            shape = np.broadcast_shapes(np.shape(t), np.shape(y),
                                        np.shape(yb), np.shape(pi))
            return np.full(shape, a), np.zeros(shape), np.zeros(shape)

        r = residual(h, 0.0, g, P0, coeff_fn=mms_coeffs)
        assert r.max_rel < 1e-8

    def test_solver_self_check_rho0(self):
        from prefhedge import fixed_point_solve
        g = default_grid(P0)
        h, pol = fixed_point_solve(g, P0)
        r = residual(h, pol, g, P0)
        # tolerance pinned by the grid-refinement study: halving dt halves
        # both band norms (first-order march)
        assert r.max_rel_band < 1e-4
        assert r.rms_rel_band < 2e-5
