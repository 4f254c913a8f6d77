"""Backward finite-difference solver for the family of continuation factors.

For each terminal preference state ybar, the continuation factor h(t, y)
solves a linear parabolic equation

    h_t + Q(t, y) h_y + R h_yy + P(t, y) h = 0,    h(T, y) = 1,

whose coefficients couple the Brownian-bridge pull toward ybar with the
candidate investment policy.  Slices are independent given the policy; the
policy feedback happens one level up, in the fixed-point iteration.

Numerical scheme: implicit (backward Euler) time stepping of the
convection-diffusion part with central differences in y, switching to
first-order upwinding wherever the cell Peclet number |Q| dy / (2R) exceeds
one (the bridge drift blows up near the terminal time and the y-grid edges,
and central differencing would oscillate there).  The reaction term P h is
advanced by an exact exponential factor in a split sub-step, which keeps the
solution strictly positive no matter how large P grows in far corners of the
(y, ybar) grid.  The continuous coefficients are singular at t = T, so the
march starts from t = T - eps_T with h = 1 there; the terminal condition
h(T, y) = 1 and flat terminal profile make the neglected contribution
O(eps_T).

Boundary rows impose linearity in y (h_yy = 0).  The transport term at a
boundary uses the one-sided interior difference when the scheme needs
information from inside the domain, and is dropped (zero gradient) when the
characteristic enters from outside; both choices keep the implicit matrix an
M-matrix, hence positivity-preserving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import DegenerateTimeError, DomainError, OutOfGridError, PositivityError
from .model import ModelParams

# Abort threshold for the continuation factor inside a slice's bridge tube
# (values beyond it there mean the solve left the representable regime: at
# extreme correlations the factor genuinely spans several hundred e-folds
# across a tube); outside the tube the log factor is extended linearly
# rather than solved.
H_MAX = float(np.exp(690.0))
H_MIN = float(np.exp(-690.0))

# Half-width, in conditional standard deviations of the terminal state, of
# the band around each slice's bridge line where the solution is resolved
# and checked; quadrature never reads the factor outside ~4.5 sd.
BAND_SD = 4.5

_YBAR_EXCLUSION = 1e-8  # nodes this close to 0 would put gamma at 1


@dataclass(frozen=True)
class GridSpec:
    """Discretization of the (t, y, ybar) domain plus quadrature data.

    Attributes:
        T: horizon (years); the time grid lives in [0, T - eps_T].
        eps_T: terminal offset shielding the singular bridge coefficients.
        t_nodes: strictly increasing times, last node at T - eps_T.
        y_nodes: strictly increasing, uniformly spaced preference states.
        ybar_nodes: fixed terminal-state slices where the factor equations
            are solved; also the knots for cross-slice interpolation.  None
            may sit within 1e-8 of 0 (gamma = 1 is excluded).
        gh_nodes / ybar_weights: standardized Gauss-Hermite abscissae and
            probability weights (weights sum to 1).  Expectations over the
            terminal state at (t, y) map these nodes through
            mean + sqrt(2) * sd * xi, with the mean and sd of the terminal
            conditional law at (t, y).
    """

    T: float
    eps_T: float
    t_nodes: np.ndarray
    y_nodes: np.ndarray
    ybar_nodes: np.ndarray
    gh_nodes: np.ndarray
    ybar_weights: np.ndarray
    band_sd: float = BAND_SD
    quad_sd: float = 4.0

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        y = np.asarray(self.y_nodes, dtype=float)
        yb = np.asarray(self.ybar_nodes, dtype=float)
        gh = np.asarray(self.gh_nodes, dtype=float)
        w = np.asarray(self.ybar_weights, dtype=float)
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "y_nodes", y)
        object.__setattr__(self, "ybar_nodes", yb)
        object.__setattr__(self, "gh_nodes", gh)
        object.__setattr__(self, "ybar_weights", w)

        if not self.eps_T > 0:
            raise DomainError("eps_T must be > 0")
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise DomainError("t_nodes must be strictly increasing")
        if t[0] < 0 or t[-1] > self.T - self.eps_T + 1e-12:
            raise DomainError("t_nodes must lie in [0, T - eps_T]")
        if y.ndim != 1 or y.size < 3 or np.any(np.diff(y) <= 0):
            raise DomainError("y_nodes must be strictly increasing")
        dy = np.diff(y)
        if not np.allclose(dy, dy[0], rtol=1e-10, atol=0.0):
            raise DomainError("y_nodes must be uniformly spaced")
        if yb.ndim != 1 or yb.size < 2 or np.any(np.diff(yb) <= 0):
            raise DomainError("ybar_nodes must be strictly increasing")
        if np.any(np.abs(yb) <= _YBAR_EXCLUSION):
            raise DomainError(
                "ybar_nodes may not sit within 1e-8 of 0 (gamma = 1 excluded)"
            )
        if gh.shape != w.shape or gh.ndim != 1:
            raise DomainError("gh_nodes and ybar_weights must be 1-d and paired")
        if not np.isclose(w.sum(), 1.0, rtol=1e-12):
            raise DomainError("ybar_weights must sum to 1")
        if not 0 < self.quad_sd <= self.band_sd:
            raise DomainError("need 0 < quad_sd <= band_sd")

    @property
    def dy(self) -> float:
        return float(self.y_nodes[1] - self.y_nodes[0])

    @property
    def shape(self):
        return (self.t_nodes.size, self.y_nodes.size, self.ybar_nodes.size)

    def terminal_mean_sd(self, t, y, params: ModelParams):
        """Mean and sd of the terminal preference state seen from (t, y)."""
        tau = params.T - np.asarray(t, dtype=float)
        return (
            np.asarray(y, dtype=float) + params.mu_Y * tau,
            params.sigma_Y * np.sqrt(tau),
        )


def default_grid(
    params: ModelParams,
    n_t_steps: int = 400,
    n_y: int = 241,
    n_ybar: int = 21,
    n_gh: int = 21,
    ybar_pad_sd: float = 5.0,
    probe_y=None,
    eps_T: float | None = None,
) -> GridSpec:
    """Build the default solve grid for a parameter set.

    The slice domain for terminal states covers the conditional terminal
    mean of every requested probe state (``probe_y``, defaulting to just
    y0) padded by ``ybar_pad_sd`` standard deviations, so the mapped
    quadrature nodes of all probe evaluations fall inside the solved
    slices.  The y-domain then covers every slice's bridge tube (its band
    of BAND_SD conditional deviations around the bridge line, at all
    times): the marched windows must be interior to the grid, otherwise a
    truncated tube would put a boundary row in the singular near-terminal
    pin zone.  ``n_y`` sets the resolution as nodes per 12 terminal
    standard deviations; the node count scales up with the domain so the
    spacing never coarsens below that reference.
    """
    if eps_T is None:
        eps_T = 1e-3 * params.T
    sT = params.sigma_Y * np.sqrt(params.T)
    drift = params.mu_Y * params.T

    probes = [params.y0] if probe_y is None else [float(v) for v in np.atleast_1d(probe_y)]

    # The log factor of the steepest slice must stay within float range over
    # its tube; shrink the terminal-state pad (and, in extreme cases, the
    # band and quadrature widths) until a crude budget estimate (worst-case
    # slope times tube width plus the reaction accumulated over the
    # horizon) fits.  Tail mass beyond the narrowest fallback is ~1e-2 of
    # the quadrature weight.
    def _budget(pad, band):
        g_top = np.exp(max(abs(min(probes) + drift - pad * sT),
                           abs(max(probes) + drift + pad * sT)))
        g_lo = np.exp(min(probes) + drift - pad * sT)
        pi_est = (params.mu_S - params.r) / (
            params.sigma_S**2 * ((1.0 - params.rho**2) * g_lo + params.rho**2 + 1e-12)
        )
        pi_est = min(abs(pi_est), abs(params.mu_S - params.r) / params.sigma_S**2 * 4.0)
        slope_part = (
            abs(pi_est * params.rho) * (params.sigma_S / params.sigma_Y)
            * (band + 1.0) * sT
        )
        growth_part = (
            abs(params.r) + pi_est * abs(params.mu_S - params.r)
            + 0.5 * pi_est**2 * params.sigma_S**2
        ) * params.T
        return g_top * (slope_part + growth_part)

    candidates = [(p, BAND_SD, 4.0) for p in np.arange(ybar_pad_sd, 2.99, -0.25)]
    candidates += [(3.0, 3.5, 3.0), (2.5, 3.5, 3.0)]
    pad, band_sd, quad_sd = candidates[-1]
    for cand in candidates:
        if _budget(cand[0], cand[1]) <= 500.0:
            pad, band_sd, quad_sd = cand
            break

    yb_lo = min(probes) + drift - pad * sT
    yb_hi = max(probes) + drift + pad * sT
    ybar_nodes = np.linspace(yb_lo, yb_hi, n_ybar)
    # gamma = 1 is excluded: nudge any slice that lands on ybar = 0.
    hit = np.abs(ybar_nodes) <= _YBAR_EXCLUSION
    ybar_nodes[hit] = 2.0 * _YBAR_EXCLUSION

    tube_pad = (BAND_SD + 0.5) * sT
    y_lo = min(yb_lo - max(0.0, drift) - tube_pad, min(probes) - sT)
    y_hi = max(yb_hi - min(0.0, drift) + tube_pad, max(probes) + sT)
    dy_target = 12.0 * sT / (n_y - 1)
    n_y_eff = max(n_y, int(np.ceil((y_hi - y_lo) / dy_target)) + 1)
    y_nodes = np.linspace(y_lo, y_hi, n_y_eff)

    xi, w = np.polynomial.hermite.hermgauss(n_gh)
    return GridSpec(
        T=params.T,
        eps_T=float(eps_T),
        t_nodes=np.linspace(0.0, params.T - eps_T, n_t_steps + 1),
        y_nodes=y_nodes,
        ybar_nodes=ybar_nodes,
        gh_nodes=xi,
        ybar_weights=w / np.sqrt(np.pi),
        band_sd=float(band_sd),
        quad_sd=float(quad_sd),
    )


def coefficients(t, y, ybar, pi_value, params: ModelParams):
    """Coefficient functions (P, Q, R) of the continuation-factor equation.

        P = (r + pi (mu_S - r + rho (sigma_S/sigma_Y) ((ybar - y)/(T - t) - mu_Y))
             - pi^2 sigma_S^2 gamma / 2) (1 - gamma)
        Q = (ybar - y)/(T - t) + rho pi sigma_S sigma_Y (1 - gamma)
        R = sigma_Y^2 / 2

    with gamma = exp(ybar).  Broadcasts over array arguments; rejects t = T,
    where the bridge pull is singular.
    """
    t = np.asarray(t, dtype=float)
    tau = params.T - t
    if np.any(tau <= 0):
        raise DegenerateTimeError("coefficients are singular at t = T")
    y = np.asarray(y, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    pi_value = np.asarray(pi_value, dtype=float)

    gamma = np.exp(ybar)
    one_minus = 1.0 - gamma
    pull = (ybar - y) / tau
    P = (
        params.r
        + pi_value * (params.mu_S - params.r + params.rho * (params.sigma_S / params.sigma_Y) * (pull - params.mu_Y))
        - 0.5 * pi_value**2 * params.sigma_S**2 * gamma
    ) * one_minus
    Q = pull + params.rho * pi_value * params.sigma_S * params.sigma_Y * one_minus
    R = 0.5 * params.sigma_Y**2
    if P.ndim == 0:
        return float(P), float(Q), R
    return P, Q, np.full_like(P, R)


def _locate(nodes: np.ndarray, x, clip: bool):
    """Bracketing index and linear weight of x in sorted nodes."""
    x = np.asarray(x, dtype=float)
    span = nodes[-1] - nodes[0]
    slack = 1e-12 * max(abs(span), 1.0)
    if not clip and (np.any(x < nodes[0] - slack) or np.any(x > nodes[-1] + slack)):
        raise OutOfGridError(
            f"point(s) outside grid hull [{nodes[0]!r}, {nodes[-1]!r}]"
        )
    xc = np.clip(x, nodes[0], nodes[-1])
    hi = np.clip(np.searchsorted(nodes, xc, side="right"), 1, nodes.size - 1)
    lo = hi - 1
    w = (xc - nodes[lo]) / (nodes[hi] - nodes[lo])
    return lo, np.clip(w, 0.0, 1.0)


def bilinear_interp(t_nodes, y_nodes, values, t, y, clip=False):
    """Bilinear interpolation of values[t, y, ...] at (t, y) points.

    ``t`` and ``y`` broadcast together; trailing dimensions of ``values``
    ride along.  Points outside the hull raise OutOfGridError unless
    ``clip`` is set, in which case they are clamped to the boundary.
    """
    ti, tw = _locate(t_nodes, t, clip)
    yi, yw = _locate(y_nodes, y, clip)
    ti, yi, tw, yw = np.broadcast_arrays(ti, yi, tw, yw)
    if values.ndim > 2:
        tw = tw[..., None]
        yw = yw[..., None]
    v00 = values[ti, yi]
    v01 = values[ti, yi + 1]
    v10 = values[ti + 1, yi]
    v11 = values[ti + 1, yi + 1]
    lo = v00 * (1.0 - yw) + v01 * yw
    hi = v10 * (1.0 - yw) + v11 * yw
    return lo * (1.0 - tw) + hi * tw


@dataclass
class HSurface:
    """Continuation factors on the (t, y, ybar) grid.

    ``values[k, i, j]`` is the factor at time t_nodes[k], state y_nodes[i],
    for the slice pinned to ybar_nodes[j].  All values are strictly
    positive; interpolation is bilinear in (t, y) within a slice and linear
    in log h across slices.
    """

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DomainError(
                f"values shape {v.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            bad = np.argwhere(~(np.isfinite(v) & (v > 0)))[0]
            raise PositivityError(
                "continuation factor must be finite and strictly positive",
                t=self.grid.t_nodes[bad[0]],
                y=self.grid.y_nodes[bad[1]],
                ybar=self.grid.ybar_nodes[bad[2]],
            )
        self.values = v

    def interp(self, t, y, clip=False):
        """All-slice values at (t, y): shape broadcast(t, y) + (n_ybar,)."""
        return bilinear_interp(
            self.grid.t_nodes, self.grid.y_nodes, self.values, t, y, clip=clip
        )

    def interp_at(self, t, y, ybar, clip=False):
        """Value at (t, y, ybar), log-linear between the bracketing slices."""
        slices = self.interp(t, y, clip=clip)
        ji, jw = _locate(self.grid.ybar_nodes, ybar, clip=True)
        lo = np.log(slices[..., ji])
        hi = np.log(slices[..., ji + 1])
        out = np.exp(lo * (1.0 - jw) + hi * jw)
        return out if np.ndim(out) else float(out)

    def dhdy(self):
        """d h / d y on the grid (second-order central, one-sided at edges)."""
        return np.gradient(self.values, self.grid.y_nodes, axis=1)

    def elasticity(self):
        """(d h / d y) / h = d(ln h)/d y on the grid.

        Differenced in log space: the factor is exponential in y across much
        of the domain, and central differences of h itself overstate the
        slope by sinh(b dy)/(b dy) on profiles exp(b y), an amplification
        that destabilizes the policy coupling at high |rho|; differences of
        ln h are exact there.
        """
        return np.gradient(np.log(self.values), self.grid.y_nodes, axis=1)


def policy_values(policy, t_nodes, y_nodes, params: ModelParams | None = None):
    """Evaluate a policy specification on the tensor grid -> (n_t, n_y).

    Accepts a PolicySurface-like object (anything with ``.value(t, y)``), a
    callable ``pi(t, y)``, or a scalar.
    """
    tt = np.asarray(t_nodes, dtype=float)[:, None]
    yy = np.asarray(y_nodes, dtype=float)[None, :]
    if hasattr(policy, "value"):
        return np.asarray(policy.value(tt, yy, clip=True), dtype=float)
    if callable(policy):
        return np.broadcast_to(
            np.asarray(policy(tt, yy), dtype=float), (tt.size, yy.size)
        ).copy()
    arr = np.asarray(policy, dtype=float)
    if arr.ndim == 2:
        if arr.shape != (tt.size, yy.size):
            raise DomainError(
                f"policy array must have shape {(tt.size, yy.size)}, got {arr.shape}"
            )
        return arr
    return np.full((tt.size, yy.size), float(arr))


def _step_matrix(Q, dt, dy, R):
    """Tridiagonal rows of (I - dt L) for L = Q d/dy + R d2/dy2.

    Returns (lower, diag, upper) with lower[i] multiplying h[i-1] in row i
    and upper[i] multiplying h[i+1] (lower[0] and upper[-1] unused).
    Interior rows use central differences where the cell Peclet number
    allows, first-order upwinding otherwise; boundary rows carry no
    diffusion (h_yy = 0) and only an inflow-sided transport term.
    """
    n = Q.size
    a = dt * R / dy**2
    lower = np.empty(n)
    diag = np.empty(n)
    upper = np.empty(n)

    Qi = Q[1:-1]
    upwind = np.abs(Qi) * dy > 2.0 * R
    Qp = np.where(Qi > 0, Qi, 0.0)
    Qm = np.where(Qi < 0, -Qi, 0.0)
    diag[1:-1] = np.where(
        upwind,
        1.0 + 2.0 * a + dt * (Qp + Qm) / dy,
        1.0 + 2.0 * a,
    )
    upper[1:-1] = np.where(
        upwind,
        -(a + dt * Qp / dy),
        -(a + dt * Qi / (2.0 * dy)),
    )
    lower[1:-1] = np.where(
        upwind,
        -(a + dt * Qm / dy),
        -(a - dt * Qi / (2.0 * dy)),
    )

    # Bottom row: transport uses the interior (forward) difference only when
    # the scheme pulls information from above (Q >= 0); otherwise the
    # characteristic enters from outside and the gradient is zeroed.
    q0 = Q[0]
    if q0 > 0:
        diag[0] = 1.0 + dt * q0 / dy
        upper[0] = -dt * q0 / dy
    else:
        diag[0] = 1.0
        upper[0] = 0.0
    lower[0] = 0.0

    qn = Q[-1]
    if qn < 0:
        diag[-1] = 1.0 - dt * qn / dy
        lower[-1] = dt * qn / dy
    else:
        diag[-1] = 1.0
        lower[-1] = 0.0
    upper[-1] = 0.0
    return lower, diag, upper


_W_MAX = np.log(H_MAX)

# Extra nodes kept on each side of a slice's bridge tube when marching.
_TUBE_MARGIN = 4


def _slice_windows(grid: GridSpec, params: ModelParams):
    """Per-slice, per-time y-index marching bands around each bridge line.

    Slice j's solution is only meaningful (and only read, after the capped
    quadrature) within BAND_SD conditional standard deviations of its
    bridge line; only that band, plus a small margin, is marched at each
    step, and the log factor is extended linearly outside it.  Restricting
    the march this way keeps the log factor moderate: inside its band the
    policy is calibrated to risk aversions commensurate with the slice's
    own, and the singular near-terminal pull is only ever evaluated within
    a few conditional deviations of the pin, so the reaction term never
    accumulates the hundreds of e-folds the far (y, ybar) corners would
    produce.

    Returns (lo, hi, band_lo, band_hi) of shape (n_ybar, n_t): the marched
    index ranges (band plus margin rows buffering the closure) and the band
    proper, where the solution is range-checked.
    """
    t = grid.t_nodes
    y = grid.y_nodes
    tau = params.T - t
    half = grid.band_sd * params.sigma_Y * np.sqrt(tau)
    centers = grid.ybar_nodes[:, None] - params.mu_Y * tau[None, :]   # (n_s, n_t)
    band_lo = np.searchsorted(y, centers - half[None, :], side="left")
    band_hi = np.searchsorted(y, centers + half[None, :], side="right")
    lo = np.clip(band_lo - _TUBE_MARGIN, 0, y.size - 5)
    hi = np.clip(band_hi + _TUBE_MARGIN, 5, y.size)
    hi = np.maximum(hi, lo + 5)
    lo = np.minimum(lo, hi - 5)
    band_lo = np.clip(band_lo, lo, hi)
    band_hi = np.clip(band_hi, lo, hi)
    return lo, hi, band_lo, band_hi


def _extend_log_linear(w, lo, hi, y):
    """Fill a full y-row from its marched window by linear extension of w.

    Slopes come from strictly interior node pairs (the outermost marched
    row carries the transport-only closure and drifts slightly off the
    interior profile).
    """
    dy = y[1] - y[0]
    if lo > 0:
        s = min(lo + 1, hi - 2)
        slope = (w[s + 1] - w[s]) / dy
        w[:lo] = w[lo] + slope * (y[:lo] - y[lo])
    if hi < y.size:
        s = max(hi - 3, lo)
        slope = (w[s + 1] - w[s]) / dy
        w[hi:] = w[hi - 1] + slope * (y[hi:] - y[hi - 1])
    return w


def _march_slice(w, P_k, Q_k, dt, dy, R, ab):
    """One backward step of the log-factor w = ln h.

    In log variables the equation reads
        w_t + Q w_y + R w_yy + R (w_y)^2 + P = 0,
    and the factor's near-exponential y-profiles become near-linear, where
    finite differences are exact: the scheme has no cosh inflation and the
    upwind numerical diffusion multiplies w_yy ~ 0.  The squared gradient is
    linearized around the previous level, R (w_y)^2 ~ (R w_y_old) w_y_new,
    and folded into the implicit transport (an explicit source is unstable
    exactly where the slope is large); the reaction P integrates exactly.
    At the boundary rows the linear-in-h closure (h_yy = 0) makes both
    diffusion-born terms cancel, leaving pure transport with the plain Q.
    """
    wy = np.gradient(w, dy)
    q_eff = Q_k + R * wy
    q_eff[0] = Q_k[0]
    q_eff[-1] = Q_k[-1]

    lower, diag, upper = _step_matrix(q_eff, dt, dy, R)
    ab[0, 0] = 0.0
    ab[2, -1] = 0.0
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    rhs = w + dt * P_k
    return solve_banded((1, 1), ab, rhs, overwrite_ab=True, overwrite_b=True)


def solve_h(policy, grid: GridSpec, params: ModelParams) -> HSurface:
    """March every ybar slice backward from h = 1 at t = T - eps_T.

    The policy enters only through the coefficient surfaces; slices do not
    couple inside this routine, so solving any subset (in any order, or
    concurrently) reproduces the same numbers bit for bit.  The march runs
    in log space (see _march_slice); the returned surface holds the factor
    itself, clamped into floating range outside the bridge-compatible band
    and verified finite inside it.
    """
    t = grid.t_nodes
    y = grid.y_nodes
    yb = grid.ybar_nodes
    n_t, n_y, n_s = grid.shape
    dy = grid.dy
    R = 0.5 * params.sigma_Y**2

    PI = policy_values(policy, t, y, params)
    tt = t[:, None]
    yy = y[None, :]

    wlo, whi, blo, bhi = _slice_windows(grid, params)
    values = np.empty((n_s, n_t, n_y))
    old = np.seterr(over="ignore", under="ignore")
    try:
        for j in range(n_s):
            P_j, Q_j, _ = coefficients(tt, yy, yb[j], PI, params)
            full = np.zeros(n_y)
            values[j, n_t - 1] = 1.0
            for k in range(n_t - 2, -1, -1):
                dt = t[k + 1] - t[k]
                a, b = int(wlo[j, k]), int(whi[j, k])
                w = _march_slice(full[a:b].copy(), P_j[k, a:b], Q_j[k, a:b],
                                 dt, dy, R, np.empty((3, b - a)))
                band = w[blo[j, k] - a:bhi[j, k] - a]
                wmax = np.abs(band).max() if band.size else 0.0
                if not np.isfinite(wmax) or wmax >= _W_MAX:
                    i = blo[j, k] + int(np.argmax(np.abs(band)))
                    raise PositivityError(
                        "continuation factor left (H_MIN, H_MAX) inside "
                        "its bridge tube during the march",
                        t=t[k],
                        y=y[i],
                        ybar=yb[j],
                    )
                full[a:b] = np.clip(np.nan_to_num(w, nan=0.0, posinf=_W_MAX,
                                                  neginf=-_W_MAX), -_W_MAX, _W_MAX)
                _extend_log_linear(full, a, b, y)
                np.clip(full, -_W_MAX, _W_MAX, out=full)
                np.exp(full, out=values[j, k])
    finally:
        np.seterr(**old)
    return HSurface(grid=grid, values=np.moveaxis(values, 0, 2))


@dataclass(frozen=True)
class ResidualNorms:
    """Residual of the factor equation over interior nodes.

    ``max_abs``/``rms`` are norms of the raw residual; ``max_rel``/``rms_rel``
    normalize node-wise by the local factor value, which is the scale-free
    measure (the factor spans many orders of magnitude across slices).
    """

    max_abs: float
    rms: float
    max_rel: float
    rms_rel: float
    max_rel_band: float
    rms_rel_band: float
    worst: tuple = field(default=())


def residual(h: HSurface, policy, grid: GridSpec, params: ModelParams, coeff_fn=None) -> ResidualNorms:
    """Central-difference residual h_t + Q h_y + R h_yy + P h on interior nodes.

    ``coeff_fn`` may override the coefficient functions (signature matching
    :func:`coefficients`); the default uses the model coefficients with the
    supplied policy.
    """
    t = grid.t_nodes
    y = grid.y_nodes
    yb = grid.ybar_nodes
    v = h.values

    with np.errstate(over="ignore", invalid="ignore"):
        ht = np.gradient(v, t, axis=0)
        hy = np.gradient(v, y, axis=1)
        hyy = np.empty_like(v)
        dy = grid.dy
        hyy[:, 1:-1] = (v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]) / dy**2
        hyy[:, 0] = hyy[:, 1]
        hyy[:, -1] = hyy[:, -2]

        PI = policy_values(policy, t, y, params)
        fn = coefficients if coeff_fn is None else coeff_fn
        P, Q, R = fn(t[:, None, None], y[None, :, None], yb[None, None, :], PI[:, :, None], params)

        res = ht + Q * hy + R * hyy + P * v
        core = res[1:-1, 1:-1, :]
        rel = core / v[1:-1, 1:-1, :]
        rel = np.nan_to_num(rel, nan=0.0, posinf=np.inf, neginf=-np.inf)

    # Bridge-compatible band: nodes whose terminal state lies within
    # grid.quad_sd conditional sd of the node's conditional mean, at times
    # below the analytically closed terminal window.  Outside it (far
    # corners, where the factor is a linear log-extension, and the terminal
    # layer) pointwise central differences are not meaningful.
    tau = (params.T - t[1:-1])[:, None, None]
    dev = yb[None, None, :] - y[None, 1:-1, None] - params.mu_Y * tau
    band = np.abs(dev) <= grid.quad_sd * params.sigma_Y * np.sqrt(tau)
    t_free = params.T * (1.0 - max(0.02, 0.1 * params.rho**2))
    band &= (t[1:-1] < t_free)[:, None, None]
    rel_band = rel[band] if np.any(band) else rel

    flat = np.argmax(np.abs(rel))
    k, i, j = np.unravel_index(flat, core.shape)
    with np.errstate(over="ignore"):
        return ResidualNorms(
            max_abs=float(np.max(np.abs(core))),
            rms=float(np.sqrt(np.mean(core**2))),
            max_rel=float(np.max(np.abs(rel))),
            rms_rel=float(np.sqrt(np.mean(rel**2))),
            max_rel_band=float(np.max(np.abs(rel_band))),
            rms_rel_band=float(np.sqrt(np.mean(rel_band**2))),
            worst=(float(t[k + 1]), float(y[i + 1]), float(yb[j])),
        )
