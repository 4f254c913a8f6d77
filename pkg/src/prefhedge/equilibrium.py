"""Equilibrium policy map, closed form, and the coupled solve.

The equilibrium fraction solves a fixed-point problem: the policy is a
functional of the continuation factors through a density-weighted elasticity
integral, while the factors solve PDEs whose coefficients contain the
policy.  With zero stock/preference correlation the integral drops out and
the policy is available in closed form.

The coupling is triangular in time: the policy at a time level depends only
on the factors at that level, which depend only on later levels.  The
primary solve therefore marches all terminal-state slices backward jointly,
closing the policy level by level (predictor-corrector within each step),
and a damped Picard loop then polishes the result to the requested
fixed-point tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .conditional import bridge_drift_y, score
from .errors import ConvergenceError, DomainError, PositivityError
from .model import ModelParams, expected_terminal_gamma
from .pide import (
    GridSpec,
    HSurface,
    _W_MAX,
    _extend_log_linear,
    _march_slice,
    _slice_windows,
    bilinear_interp,
    coefficients,
    solve_h,
)


@dataclass(frozen=True)
class FixedPointConfig:
    """Controls for the fixed-point polish coupling policy and factors."""

    max_iters: int = 30
    tol_sup: float = 1e-5
    damping: float = 1.0

    def __post_init__(self):
        if not self.tol_sup > 0:
            raise DomainError("tol_sup must be > 0")
        if not 0.0 < self.damping <= 1.0:
            raise DomainError("damping must lie in (0, 1]")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")


@dataclass(frozen=True)
class IterationMeta:
    """Diagnostics of a coupled solve."""

    iterations: int
    sup_changes: tuple
    damping_final: float
    converged: bool


@dataclass
class PolicySurface:
    """Equilibrium fraction on the (t, y) grid, split into its two demands.

    ``pi = myopic + hedging`` holds exactly at every node as stored.  The
    policy carries no wealth axis: the equilibrium fraction is independent
    of wealth by construction.
    """

    grid: GridSpec
    pi: np.ndarray
    myopic: np.ndarray
    hedging: np.ndarray
    iteration_meta: IterationMeta | None = None

    def __post_init__(self):
        shape = (self.grid.t_nodes.size, self.grid.y_nodes.size)
        for name in ("pi", "myopic", "hedging"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise DomainError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    def value(self, t, y, clip=True, component="pi"):
        """Interpolated policy at (t, y).

        Bilinear inside the grid hull.  With ``clip`` (the default for
        simulation use) arguments are clamped to the hull, so times past
        the last node return the final-slice policy and excursions of y
        beyond the grid edges hold the edge value; with ``clip=False``
        out-of-hull points raise OutOfGridError.
        """
        values = getattr(self, component)
        t = np.minimum(np.asarray(t, dtype=float), self.grid.t_nodes[-1]) if clip else t
        out = bilinear_interp(
            self.grid.t_nodes, self.grid.y_nodes, values, t, y, clip=clip
        )
        return out if np.ndim(out) else float(out)


def closed_form_policy_rho0(t, y, params: ModelParams):
    """Zero-correlation equilibrium fraction.

    (mu_S - r) / (sigma_S**2 E[gamma(Y_T) | Y_t = y]): the Merton fraction
    at the expected terminal risk aversion.  With rho = 0 the hedging
    channel is absent, so this is exact; it also serves as the analytic
    oracle and the starting point of the coupled solve.
    """
    out = (params.mu_S - params.r) / (
        params.sigma_S**2 * expected_terminal_gamma(t, y, params)
    )
    return out if np.ndim(out) else float(out)


def _myopic_grid(grid: GridSpec, params: ModelParams) -> np.ndarray:
    tt = grid.t_nodes[:, None]
    yy = grid.y_nodes[None, :]
    return (params.mu_S - params.r) / (
        params.sigma_S**2 * expected_terminal_gamma(tt, yy, params)
    )


def _mapped_elasticity_mean(el, grid: GridSpec, params: ModelParams, t, y):
    """Gauss-Hermite average of the cross-slice elasticity at points (t, y).

    ``el`` holds the per-slice elasticity values at the evaluation points:
    shape broadcast(t, y) + (n_ybar,).  The terminal-state nodes are mapped
    through mean + sqrt(2) sd xi, capped at grid.quad_sd deviations, and the
    elasticity is interpolated linearly across the solved slices (clamped at
    the slice range; the clipped tail mass is negligible by construction).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    mean, sd = grid.terminal_mean_sd(t, y, params)
    nodes = grid.ybar_nodes
    total = 0.0
    # The mapping is capped at grid.quad_sd conditional deviations (the
    # integrand is extended flat beyond): the quadrature must read only the
    # region where the marched factor is valid, strictly inside the band.
    for xi, w in zip(grid.gh_nodes, grid.ybar_weights):
        offset = np.clip(np.sqrt(2.0) * xi, -grid.quad_sd, grid.quad_sd) * sd
        target = np.clip(mean + offset, nodes[0], nodes[-1])
        hi = np.clip(np.searchsorted(nodes, target, side="right"), 1, nodes.size - 1)
        lo = hi - 1
        frac = np.clip((target - nodes[lo]) / (nodes[hi] - nodes[lo]), 0.0, 1.0)
        e_lo = np.take_along_axis(el, np.asarray(lo)[..., None], axis=-1)[..., 0]
        e_hi = np.take_along_axis(el, np.asarray(hi)[..., None], axis=-1)[..., 0]
        total = total + w * ((1.0 - frac) * e_lo + frac * e_hi)
    return total


def hedging_integral(t, y, h: HSurface, grid: GridSpec, params: ModelParams):
    """Density-weighted elasticity of the continuation factors at (t, y).

    Quadrature approximation of the integral of (d h / d y) / h against the
    conditional terminal-state density, with the y-derivative taken by
    central differences on the grid and Gauss-Hermite nodes mapped through
    the conditional mean and standard deviation at (t, y).  Returns 0 when
    the factors carry no y-dependence.
    """
    el_grid = h.elasticity()
    el = bilinear_interp(grid.t_nodes, grid.y_nodes, el_grid, t, y, clip=False)
    hcheck = h.interp(t, y, clip=False)
    if np.any(hcheck <= 0):
        raise PositivityError("interpolated continuation factor is not positive")
    out = _mapped_elasticity_mean(el, grid, params, t, y)
    return out if np.ndim(out) else float(out)


def _flatten_edges(hedging: np.ndarray) -> np.ndarray:
    # The two outermost y-rows use one-sided elasticity stencils; continue
    # the hedging demand flat through them (they sit ~6 sd from any probe).
    hedging[..., :2] = hedging[..., 2:3]
    hedging[..., -2:] = hedging[..., -3:-2]
    return hedging


def _flatten_degenerate_row(hed_row, t_k, grid: GridSpec, params: ModelParams):
    """Hold the hedging flat where the terminal-state quadrature degenerates.

    Beyond the y-range whose conditional terminal mean falls inside the
    solved slice interval, every mapped quadrature node clips to the same
    end slice; the hedging value there is a one-sided extrapolation with no
    information content, and letting it feed back into the factor equations
    leaves a slowly relaxing mode pinned at the grid edge.  Constant
    continuation is the neutral closure.
    """
    y = grid.y_nodes
    drift = params.mu_Y * (params.T - t_k)
    lo = int(np.searchsorted(y, grid.ybar_nodes[0] - drift, side="left"))
    hi = int(np.searchsorted(y, grid.ybar_nodes[-1] - drift, side="right"))
    lo = min(max(lo, 0), y.size - 1)
    hi = max(min(hi, y.size), lo + 1)
    hed_row[:lo] = hed_row[lo]
    hed_row[hi:] = hed_row[hi - 1]
    return hed_row


def _terminal_layer_cut(grid: GridSpec, rho: float) -> int:
    """First time index inside the analytically closed terminal window.

    The marched elasticity needs a few multiples of the elapsed backward
    time to relax to its layer-free profile (the terminal condition is flat
    while the singular transport builds the log-slope), and within that
    window the discrete policy<->factor feedback is locally expansive with
    gain scaling like rho**2/(T-t).  Inside the window the hedging demand is
    closed analytically instead (see _layer_hedging); the window lies inside
    the terminal layer, far later than any probe time.
    """
    frac = max(0.02, 0.1 * rho * rho)
    return int(np.searchsorted(grid.t_nodes, grid.T - frac * grid.T))


def _layer_hedging(t, y, params: ModelParams):
    """Leading-order hedging demand from the exact constant-policy solution.

    For a locally constant fraction pi the factor is log-affine with
    y-slope pi rho (sigma_S/sigma_Y)(gamma - 1), making the hedging demand
    rho**2 pi (1 - 1/E[gamma_T]); solving the resulting scalar fixed point
    gives pi = (mu_S - r)/(sigma_S**2 ((1-rho**2) E[gamma_T] + rho**2)).
    Used to close the policy inside the terminal layer, where the marched
    elasticity has not yet relaxed to its layer-free profile.
    """
    Eg = expected_terminal_gamma(t, y, params)
    pi_layer = (params.mu_S - params.r) / (
        params.sigma_S**2 * ((1.0 - params.rho**2) * Eg + params.rho**2)
    )
    myopic = (params.mu_S - params.r) / (params.sigma_S**2 * Eg)
    return pi_layer - myopic


def _apply_terminal_layer(hedging: np.ndarray, grid: GridSpec, params: ModelParams):
    cut = _terminal_layer_cut(grid, params.rho)
    if cut < grid.t_nodes.size:
        hedging[cut:] = _layer_hedging(
            grid.t_nodes[cut:, None], grid.y_nodes[None, :], params
        )
    return hedging


def _hedging_from_elasticity(el, grid: GridSpec, params: ModelParams, t, y):
    integral = _mapped_elasticity_mean(el, grid, params, t, y)
    return (
        params.rho * params.sigma_S * params.sigma_Y * integral
        / (params.sigma_S**2 * expected_terminal_gamma(t, y, params))
    )


def policy_from_h(h: HSurface, grid: GridSpec, params: ModelParams,
                  iteration_meta: IterationMeta | None = None) -> PolicySurface:
    """Node-wise policy map applied to solved continuation factors.

    pi = (mu_S - r + rho sigma_S sigma_Y I(t, y)) / (sigma_S**2 E[gamma_T]),
    stored together with its myopic part and the hedging correction; the
    hedging component is identically zero when rho = 0.
    """
    myopic = _myopic_grid(grid, params)
    if params.rho == 0.0:
        hedging = np.zeros_like(myopic)
    else:
        hedging = _flatten_edges(
            _hedging_from_elasticity(
                h.elasticity(), grid, params,
                grid.t_nodes[:, None], grid.y_nodes[None, :],
            )
        )
        for k, t_k in enumerate(grid.t_nodes):
            _flatten_degenerate_row(hedging[k], t_k, grid, params)
        _apply_terminal_layer(hedging, grid, params)
    return PolicySurface(
        grid=grid,
        pi=myopic + hedging,
        myopic=myopic,
        hedging=hedging,
        iteration_meta=iteration_meta,
    )


def _sweep_solve(grid: GridSpec, params: ModelParams):
    """One backward march closing the policy level by level.

    All terminal-state slices step jointly from t = T - eps_T; at each new
    level the hedging integral is evaluated from the just-computed factor
    values and the step is repeated once with the corrected policy.  Exact
    for rho = 0 (the policy decouples); otherwise the within-step policy lag
    is second order after the corrector pass.
    """
    t = grid.t_nodes
    y = grid.y_nodes
    yb = grid.ybar_nodes
    n_t, n_y, n_s = grid.shape
    dy = grid.dy
    R = 0.5 * params.sigma_Y**2

    myopic = _myopic_grid(grid, params)
    hedging = np.zeros((n_t, n_y))
    layer_cut = _terminal_layer_cut(grid, params.rho)
    if params.rho != 0.0 and layer_cut < n_t:
        hedging[layer_cut:] = _layer_hedging(
            t[layer_cut:, None], y[None, :], params
        )

    wlo, whi, blo, bhi = _slice_windows(grid, params)
    values = np.empty((n_t, n_y, n_s))
    level = np.zeros((n_s, n_y))       # log factor per slice, tube-extended
    values[n_t - 1] = 1.0

    old = np.seterr(over="ignore", under="ignore")
    try:
        for k in range(n_t - 2, -1, -1):
            dt = t[k + 1] - t[k]
            in_layer = k >= layer_cut
            pi_row = myopic[k] + (hedging[k] if in_layer else hedging[k + 1])
            for sweep_pass in range(1 if in_layer else 2):
                new_level = np.empty_like(level)
                for j in range(n_s):
                    a, b = int(wlo[j, k]), int(whi[j, k])
                    P_row, Q_row, _ = coefficients(
                        t[k], y[a:b], yb[j], pi_row[a:b], params
                    )
                    wj = _march_slice(
                        level[j, a:b].copy(), P_row, Q_row, dt, dy, R,
                        np.empty((3, b - a)),
                    )
                    band = wj[blo[j, k] - a:bhi[j, k] - a]
                    wmax = np.abs(band).max() if band.size else 0.0
                    if not np.isfinite(wmax) or wmax >= _W_MAX:
                        i = blo[j, k] + int(np.argmax(np.abs(band)))
                        raise PositivityError(
                            "continuation factor left (H_MIN, H_MAX) inside "
                            "its bridge tube during the march",
                            t=t[k], y=y[i], ybar=yb[j],
                        )
                    new_level[j] = level[j]
                    new_level[j, a:b] = np.clip(
                        np.nan_to_num(wj, nan=0.0, posinf=_W_MAX, neginf=-_W_MAX),
                        -_W_MAX, _W_MAX,
                    )
                    _extend_log_linear(new_level[j], a, b, y)
                np.clip(new_level, -_W_MAX, _W_MAX, out=new_level)
                if params.rho == 0.0 or in_layer:
                    break
                # The log-factor slope is the elasticity directly.
                el = np.gradient(new_level, y, axis=1)   # (n_s, n_y)
                hed_row = _flatten_degenerate_row(
                    _flatten_edges(
                        _hedging_from_elasticity(el.T, grid, params, t[k], y)
                    ),
                    t[k], grid, params,
                )
                hedging[k] = hed_row
                pi_row = myopic[k] + hed_row
            level = new_level
            values[k] = np.exp(level).T
    finally:
        np.seterr(**old)

    h = HSurface(grid=grid, values=values)
    pol = PolicySurface(
        grid=grid,
        pi=myopic + hedging,
        myopic=myopic,
        hedging=hedging,
    )
    return h, pol


def fixed_point_solve(grid: GridSpec, params: ModelParams,
                      cfg: FixedPointConfig | None = None):
    """Coupled solve: backward sweep, then damped Picard polish.

    The sweep closes the policy/factor coupling in one pass; the polish
    iterates pi -> policy_from_h(solve_h(pi)) with automatic damping
    halving on oscillation until the sup-norm update is below tol_sup.
    Returns the converged (factor surface, policy surface) pair; raises
    ConvergenceError with the update history if the loop is exhausted
    without an acceptable iterate.
    """
    cfg = cfg or FixedPointConfig()
    h, pol = _sweep_solve(grid, params)
    pi_k = pol.pi

    # Node-wise Newton scaling of the Picard update.  The policy map is
    # nearly affine in the policy with local slope rho**2 (1 - 1/E[gamma]):
    # a slow contraction where expected risk aversion is large and an
    # expansive oscillation where E[gamma] < rho**2/(1+rho**2).  Scaling
    # the update by 1/(1 - slope) makes both regimes converge in a few
    # sweeps.
    Eg = expected_terminal_gamma(
        grid.t_nodes[:, None], grid.y_nodes[None, :], params
    )
    slope = params.rho**2 * (1.0 - 1.0 / Eg)
    newton = np.clip(1.0 / (1.0 - slope), 0.05, 25.0)

    # The fixed point is iterated only where the policy map is free: inside
    # the analytic terminal window and the degenerate-quadrature flanks the
    # hedging is closed by construction, so updates there measure closure
    # re-evaluation, not fixed-point error.
    free = np.zeros((grid.t_nodes.size, grid.y_nodes.size), dtype=bool)
    cut = _terminal_layer_cut(grid, params.rho)
    for k in range(min(cut, grid.t_nodes.size)):
        drift = params.mu_Y * (params.T - grid.t_nodes[k])
        lo = int(np.searchsorted(grid.y_nodes, grid.ybar_nodes[0] - drift, "left"))
        hi = int(np.searchsorted(grid.y_nodes, grid.ybar_nodes[-1] - drift, "right"))
        free[k, max(lo, 2):min(hi, grid.y_nodes.size - 2)] = True
    if not free.any():
        free[:] = True

    damping = cfg.damping
    history: list[float] = []
    prev_change = np.inf
    best = None
    retreats = 0
    it = 0
    pi_last_good = pi_k
    while it < cfg.max_iters:
        try:
            h = solve_h(pi_k, grid, params)
        except PositivityError:
            retreats += 1
            if best is not None or retreats > 8:
                break
            pi_k = 0.5 * (pi_k + pi_last_good)
            damping = max(0.5 * damping, 1.0 / 16.0)
            continue
        pi_last_good = pi_k
        it += 1
        pol = policy_from_h(h, grid, params)
        change = float(np.max(np.abs(pol.pi - pi_k)[free]))
        history.append(change)
        if best is None or change < best[0]:
            best = (change, h, pol)
        if change < cfg.tol_sup:
            pol.iteration_meta = IterationMeta(
                iterations=it,
                sup_changes=tuple(history),
                damping_final=damping,
                converged=True,
            )
            return h, pol
        if len(history) >= 6 and history[-1] > 10.0 * min(history):
            break
        if change > prev_change:
            damping = max(0.5 * damping, 1.0 / 16.0)
        pi_k = pi_k + damping * newton * (pol.pi - pi_k)
        prev_change = change
    if best is None:
        raise ConvergenceError(
            "coupled solve produced no usable iterate", history=history
        )
    change, h, pol = best
    if change > 0.05:
        raise ConvergenceError(
            f"fixed point stalled at sup change {change:.3e} "
            f"after {len(history)} iterations",
            history=history,
        )
    pol.iteration_meta = IterationMeta(
        iterations=len(history),
        sup_changes=tuple(history),
        damping_final=damping,
        converged=bool(change < cfg.tol_sup),
    )
    return h, pol


def reward_quadrature(h: HSurface, t0, x0, y0, params: ModelParams, n_nodes=21):
    """Factor-side value of the certainty-equivalent reward at (t0, x0, y0).

    Aggregates the log certainty equivalents of the continuation values
    h(t0, y0, ybar) x0^(1-gamma)/(1-gamma) over Gauss-Hermite terminal-state
    nodes; the Monte Carlo reward estimate converges to this number when
    the factor surface solves its equations under the same policy.
    """
    grid = h.grid
    xi, w = np.polynomial.hermite.hermgauss(n_nodes)
    mean, sd = grid.terminal_mean_sd(t0, y0, params)
    cap = grid.quad_sd * sd
    total = 0.0
    for x_, w_ in zip(xi, w / np.sqrt(np.pi)):
        yb = float(np.clip(mean + np.clip(np.sqrt(2.0) * sd * x_, -cap, cap),
                           grid.ybar_nodes[0], grid.ybar_nodes[-1]))
        if abs(yb) <= 1e-8:
            yb = 2e-8
        gamma = np.exp(yb)
        hval = h.interp_at(t0, y0, yb)
        # log certainty equivalent of g = h x^(1-gamma)/(1-gamma)
        total += w_ * (np.log(hval) / (1.0 - gamma) + np.log(x0))
    return float(total)


def ehjb_supremand(pi_value, t, y, h: HSurface, grid: GridSpec, params: ModelParams):
    """Value of the density-weighted drift functional at a trial fraction.

    The quantity whose supremum over the fraction characterizes the
    equilibrium: a Gauss-Hermite average over terminal states of the
    normalized conditional drift of the continuation value.  Quadratic in
    the trial fraction; its maximizer at a solved surface is the equilibrium
    policy, which the property tests check by finite differences.

    ``t`` and ``y`` must be grid nodes (the factor derivatives are taken on
    the grid).
    """
    k = int(np.argmin(np.abs(grid.t_nodes - t)))
    i = int(np.argmin(np.abs(grid.y_nodes - y)))
    if abs(grid.t_nodes[k] - t) > 1e-9 or abs(grid.y_nodes[i] - y) > 1e-9:
        raise DomainError("supremand evaluation requires grid nodes")
    tk = grid.t_nodes[k]
    yi = grid.y_nodes[i]

    v = h.values
    ht = np.gradient(v, grid.t_nodes, axis=0)[k, i]
    hy = np.gradient(v, grid.y_nodes, axis=1)[k, i]
    dy = grid.dy
    if 0 < i < grid.y_nodes.size - 1:
        hyy = (v[k, i + 1] - 2.0 * v[k, i] + v[k, i - 1]) / dy**2
    else:
        hyy = np.zeros_like(ht)
    hv = v[k, i]

    mean, sd = grid.terminal_mean_sd(tk, yi, params)
    nodes = grid.ybar_nodes
    total = 0.0
    for xi, w in zip(grid.gh_nodes, grid.ybar_weights):
        ybar = float(np.clip(mean + np.sqrt(2.0) * sd * xi, nodes[0], nodes[-1]))
        hi_ix = int(np.clip(np.searchsorted(nodes, ybar, side="right"), 1, nodes.size - 1))
        lo_ix = hi_ix - 1
        frac = float(np.clip((ybar - nodes[lo_ix]) / (nodes[hi_ix] - nodes[lo_ix]), 0.0, 1.0))

        def lerp(arr):
            return (1.0 - frac) * arr[lo_ix] + frac * arr[hi_ix]

        gamma = np.exp(ybar)
        one_minus = 1.0 - gamma
        sc = score(tk, yi, ybar, params)
        pull = bridge_drift_y(tk, yi, ybar, params)
        hval = lerp(hv)
        term = (
            lerp(ht) / (one_minus * hval)
            + (params.r + pi_value * (params.mu_S - params.r)
               + pi_value * params.sigma_S * params.rho * params.sigma_Y * sc)
            + pull * lerp(hy) / (one_minus * hval)
            - 0.5 * pi_value**2 * params.sigma_S**2 * gamma
            + 0.5 * params.sigma_Y**2 * lerp(hyy) / (one_minus * hval)
            + pi_value * params.sigma_S * params.rho * params.sigma_Y * lerp(hy) / hval
        )
        total += w * term
    return float(total)
