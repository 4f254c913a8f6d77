"""Monte Carlo oracles: path simulation, reward evaluation, verification.

Everything here is deliberately independent of the PDE solver: paths follow
the model dynamics directly (under the unconditional measure, or pinned to a
terminal preference state, where the factor becomes a Brownian bridge and
the wealth drift picks up the score tilt), and the reward functional is
assembled exactly as defined — inner conditional expectations of terminal
utility, certainty-equivalent transform per terminal state, density-weighted
aggregation.  These estimates are the referees for the solver's output.

Wealth is stepped in logs (Euler-Maruyama on ln X), which keeps it strictly
positive; CRRA utilities reject nonpositive wealth, and silent clamping
would corrupt reward estimates.

Random numbers come from counter-based Philox streams keyed by the
configured seed (and a stream index for per-node independence), so runs are
bit-reproducible and two simulations with the same configuration consume
identical noise regardless of the policy — the common-random-number
coupling the spike test relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .model import ModelParams, crra_utility, phi, phi_prime
from .pide import HSurface

# Fraction of steps, and of horizon, used by the geometric terminal
# refinement of conditioned simulations: the bridge drift stiffens like
# 1/(T-s), so the last 1% of the horizon gets 25% of the steps.
_TAIL_TIME_FRACTION = 0.01
_TAIL_STEP_FRACTION = 0.25
_TAIL_RATIO = 0.85


@dataclass(frozen=True)
class SimConfig:
    """Path-simulation controls.

    ``scheme`` is informational (log-wealth Euler-Maruyama is the only
    implemented stepping); ``antithetic`` mirrors the second half of the
    paths against the first.
    """

    n_paths: int = 100_000
    n_steps: int = 400
    seed: int = 0
    scheme: str = "euler-log"
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 2:
            raise DomainError("n_paths must be >= 2")
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        if self.antithetic and self.n_paths % 2:
            raise DomainError("antithetic sampling needs an even n_paths")
        if self.scheme != "euler-log":
            raise DomainError(f"unknown scheme {self.scheme!r}")


@dataclass
class PathBatch:
    """Simulated (X, Y) trajectories plus provenance.

    ``measure`` is "unconditional" or "conditioned"; conditioned batches
    record the pinned terminal state.  With ``store="terminal"`` only the
    first and last time points are kept (the memory-friendly mode used by
    the estimators).
    """

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    measure: str
    seed: int
    ybar: float | None = None
    store: str = "full"

    def __post_init__(self):
        if np.any(self.X <= 0):
            raise DomainError("wealth paths must stay strictly positive")


def _rng(seed, stream=0):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(stream)))))


def eval_policy(policy, t, y):
    """Policy evaluation used by the simulators: surface, callable, or constant."""
    if hasattr(policy, "value"):
        return np.asarray(policy.value(t, y, clip=True), dtype=float)
    if callable(policy):
        return np.broadcast_to(np.asarray(policy(t, y), dtype=float), np.shape(y)).copy()
    return np.full(np.shape(y), float(policy))


@dataclass(frozen=True)
class SpikePolicy:
    """A policy overridden by a constant fraction on [t0, t0 + delta)."""

    base: object
    spike: float
    t0: float
    delta: float

    def value(self, t, y, clip=True):
        base = eval_policy(self.base, t, y)
        inside = (np.asarray(t) >= self.t0) & (np.asarray(t) < self.t0 + self.delta)
        return np.where(inside, self.spike, base)


def conditioned_time_grid(t0, T, n_steps):
    """Time points for bridge simulation: uniform bulk, geometric tail.

    The last _TAIL_TIME_FRACTION of the horizon receives
    _TAIL_STEP_FRACTION of the steps with geometrically shrinking
    increments, because the pinned drift stiffens like 1/(T-s).
    """
    horizon = T - t0
    n_tail = max(1, int(round(_TAIL_STEP_FRACTION * n_steps)))
    n_bulk = max(1, n_steps - n_tail)
    split = t0 + (1.0 - _TAIL_TIME_FRACTION) * horizon
    bulk = np.linspace(t0, split, n_bulk + 1)
    ratios = _TAIL_RATIO ** np.arange(n_tail)
    incr = (_TAIL_TIME_FRACTION * horizon) * ratios / ratios.sum()
    times = np.concatenate([bulk, split + np.cumsum(incr)])
    times[-1] = T
    return times


def _simulate(policy, t0, x0, y0, cfg: SimConfig, params: ModelParams,
              ybar=None, store="full", stream=0):
    if not x0 > 0:
        raise DomainError("x0 must be > 0")
    if not t0 < params.T:
        raise DomainError("t0 must be < T")
    conditioned = ybar is not None
    times = (
        conditioned_time_grid(t0, params.T, cfg.n_steps)
        if conditioned
        else np.linspace(t0, params.T, cfg.n_steps + 1)
    )
    n = cfg.n_paths
    rng = _rng(cfg.seed, stream)
    rho = params.rho
    rho_c = np.sqrt(1.0 - rho * rho)

    lnX = np.full(n, np.log(x0))
    Y = np.full(n, float(y0))
    if store == "full":
        Xs = np.empty((n, times.size))
        Ys = np.empty((n, times.size))
        Xs[:, 0] = x0
        Ys[:, 0] = y0

    for k in range(times.size - 1):
        t = times[k]
        dt = times[k + 1] - t
        sdt = np.sqrt(dt)
        if cfg.antithetic:
            Zh = rng.standard_normal((2, n // 2))
            Z = np.concatenate([Zh, -Zh], axis=1)
        else:
            Z = rng.standard_normal((2, n))
        dW1 = sdt * Z[0]
        dW2 = sdt * Z[1]
        pi = eval_policy(policy, t, Y)
        if conditioned:
            tau = params.T - t
            drift_y = (ybar - Y) / tau
            adj = pi * rho * (params.sigma_S / params.sigma_Y) * (
                (ybar - Y - params.mu_Y * tau) / tau
            )
        else:
            drift_y = params.mu_Y
            adj = 0.0
        lnX += (
            params.r + pi * (params.mu_S - params.r) + adj
            - 0.5 * pi**2 * params.sigma_S**2
        ) * dt + pi * params.sigma_S * (rho * dW1 + rho_c * dW2)
        Y = Y + drift_y * dt + params.sigma_Y * dW1
        if store == "full":
            Xs[:, k + 1] = np.exp(lnX)
            Ys[:, k + 1] = Y

    if store == "full":
        X_arr, Y_arr, t_arr = Xs, Ys, times
    else:
        X_arr = np.column_stack([np.full(n, x0), np.exp(lnX)])
        Y_arr = np.column_stack([np.full(n, y0), Y])
        t_arr = np.array([t0, params.T])
    return PathBatch(
        times=t_arr,
        X=X_arr,
        Y=Y_arr,
        measure="conditioned" if conditioned else "unconditional",
        seed=cfg.seed,
        ybar=float(ybar) if conditioned else None,
        store=store,
    )


def simulate_unconditional(policy, t0, x0, y0, cfg: SimConfig, params: ModelParams,
                           store="full", stream=0) -> PathBatch:
    """Euler-Maruyama on (ln X, Y) under the unconditional measure.

    Correlated increments rho dW1 + sqrt(1-rho^2) dW2 drive the wealth and
    dW1 drives the preference factor; deterministic given the seed.
    """
    return _simulate(policy, t0, x0, y0, cfg, params, ybar=None,
                     store=store, stream=stream)


def simulate_conditioned(policy, t0, x0, y0, ybar, cfg: SimConfig, params: ModelParams,
                         store="full", stream=0) -> PathBatch:
    """Paths pinned to Y_T = ybar.

    The factor steps with the bridge drift (ybar - Y)/(T - s); the wealth
    drift carries the score tilt pi rho (sigma_S/sigma_Y)(ybar - Y -
    mu_Y (T-s))/(T-s).  The final factor value lands within the last step's
    diffusion scale of the pin.
    """
    return _simulate(policy, t0, x0, y0, cfg, params, ybar=ybar,
                     store=store, stream=stream)


def gh_terminal_quadrature(t0, y0, params: ModelParams, n_nodes=21):
    """Gauss-Hermite nodes/weights for the terminal preference state at (t0, y0).

    Nodes are mapped through mean + sqrt(2) sd xi (nudged off the excluded
    point ybar = 0); weights are the standardized Hermite weights, summing
    to one.
    """
    xi, w = np.polynomial.hermite.hermgauss(n_nodes)
    mean = y0 + params.mu_Y * (params.T - t0)
    sd = params.sigma_Y * np.sqrt(params.T - t0)
    nodes = mean + np.sqrt(2.0) * sd * xi
    nodes[np.abs(nodes) <= 1e-8] = 2e-8
    return nodes, w / np.sqrt(np.pi)


@dataclass(frozen=True)
class RewardNode:
    """Per-terminal-state diagnostics of a reward estimate."""

    ybar: float
    gamma: float
    weight: float
    inner_mean: float
    inner_se: float
    ce_log: float
    flagged: bool


@dataclass(frozen=True)
class RewardEstimate:
    """Certainty-equivalent reward estimate with a delta-method standard error."""

    value: float
    se: float
    nodes: tuple
    n_paths: int

    @property
    def flagged_nodes(self):
        return tuple(n for n in self.nodes if n.flagged)


def reward_mc(policy, t0, x0, y0, cfg: SimConfig, params: ModelParams,
              ybar_quadrature=None, _pathwise=False):
    """Monte Carlo estimate of the certainty-equivalent reward at (t0, x0, y0).

    For each terminal-state quadrature node: estimate the inner conditional
    expectation of terminal CRRA utility from bridge-conditioned paths,
    apply the log certainty-equivalent transform, then aggregate with the
    density weights.  The standard error propagates through the transform
    by the delta method with the analytic derivative.  Nodes whose inner
    expectation is within 5 standard errors of the sign boundary are
    flagged; an outright sign violation raises.
    """
    if ybar_quadrature is None:
        nodes, weights = gh_terminal_quadrature(t0, y0, params)
    elif isinstance(ybar_quadrature, int):
        nodes, weights = gh_terminal_quadrature(t0, y0, params, ybar_quadrature)
    else:
        nodes, weights = (np.asarray(v, dtype=float) for v in ybar_quadrature)

    total = 0.0
    var = 0.0
    reports = []
    path_terms = [] if _pathwise else None
    for idx, (yb, wt) in enumerate(zip(nodes, weights)):
        gamma = float(np.exp(yb))
        batch = simulate_conditioned(policy, t0, x0, y0, yb, cfg, params,
                                     store="terminal", stream=idx)
        u = crra_utility(batch.X[:, -1], gamma)
        inner = float(np.mean(u))
        se = float(np.std(u, ddof=1) / np.sqrt(u.size))
        if (1.0 - gamma) * inner <= 0.0:
            raise DomainError(
                f"inner expectation at node ybar={yb:.4f} violates the sign "
                f"condition (1-gamma) E[u] > 0"
            )
        flagged = abs((1.0 - gamma) * inner) <= 5.0 * abs(1.0 - gamma) * se
        ce = float(phi(inner, gamma))
        dphi = float(phi_prime(inner, gamma))
        total += wt * ce
        var += (wt * dphi * se) ** 2
        reports.append(RewardNode(
            ybar=float(yb), gamma=gamma, weight=float(wt),
            inner_mean=inner, inner_se=se, ce_log=ce, flagged=flagged,
        ))
        if path_terms is not None:
            path_terms.append(wt * dphi * u)
    est = RewardEstimate(
        value=total, se=float(np.sqrt(var)), nodes=tuple(reports),
        n_paths=cfg.n_paths,
    )
    if path_terms is not None:
        return est, np.sum(path_terms, axis=0)
    return est


@dataclass(frozen=True)
class GRepSide:
    mean: float
    se: float
    z: float


@dataclass(frozen=True)
class GRepReport:
    """Probabilistic-representation check of the continuation value.

    ``pde`` is the factor-based value h(t0, y0, ybar) x0^(1-gamma)/(1-gamma);
    ``conditioned`` compares it against bridge-pinned paths (the
    representation the factor equation solves); ``unconditional`` applies
    the same fixed-exponent utility to unpinned paths — for any policy that
    reads the preference state the two laws differ, so this side is
    diagnostic only.
    """

    t0: float
    x0: float
    y0: float
    ybar: float
    gamma: float
    pde: float
    conditioned: GRepSide
    unconditional: GRepSide


def verify_g_representation(h: HSurface, policy, t0, x0, y0, ybar,
                            cfg: SimConfig, params: ModelParams) -> GRepReport:
    """Compare the solved continuation value against both path estimates."""
    gamma = float(np.exp(ybar))
    hval = h.interp_at(t0, y0, ybar)
    g_pde = float(hval * x0 ** (1.0 - gamma) / (1.0 - gamma))

    def _side(batch):
        u = crra_utility(batch.X[:, -1], gamma)
        m = float(np.mean(u))
        se = float(np.std(u, ddof=1) / np.sqrt(u.size))
        z = (m - g_pde) / se if se > 0 else 0.0
        return GRepSide(mean=m, se=se, z=float(z))

    cond = _side(simulate_conditioned(policy, t0, x0, y0, ybar, cfg, params,
                                      store="terminal", stream=1))
    uncond = _side(simulate_unconditional(policy, t0, x0, y0, cfg, params,
                                          store="terminal", stream=2))
    return GRepReport(
        t0=float(t0), x0=float(x0), y0=float(y0), ybar=float(ybar),
        gamma=gamma, pde=g_pde, conditioned=cond, unconditional=uncond,
    )


@dataclass(frozen=True)
class SpikeRow:
    delta: float
    spike: float
    j_spiked: float
    quotient: float
    se: float
    passed: bool


@dataclass(frozen=True)
class SpikeReport:
    """Finite-delta spike-perturbation test around a candidate policy.

    ``note`` states the structural limitation up front: a finite menu of
    spikes can falsify the equilibrium property, never certify it.  Each
    row estimates (J[candidate] - J[spiked]) / delta with common random
    numbers; an equilibrium candidate should show no significantly negative
    quotient.
    """

    note: str
    t0: float
    x0: float
    y0: float
    j_base: float
    j_base_se: float
    rows: tuple

    @property
    def all_passed(self):
        return all(r.passed for r in self.rows)


def equilibrium_spike_test(pi_hat, t0, x0, y0, cfg: SimConfig, params: ModelParams,
                           deltas=(0.5, 0.25, 0.125), perturbations=(0.05, 0.1, 0.2),
                           ybar_quadrature=None, z_gate=3.0) -> SpikeReport:
    """Estimate improvement quotients for spike deviations from a policy.

    ``perturbations`` are absolute offsets applied both ways around the
    candidate's value at (t0, y0) (spiked policies are constant on the
    window [t0, t0+delta) and follow the candidate afterwards).  Estimates
    share random numbers with the base policy, so the difference J_base -
    J_spiked is estimated far more precisely than either level.
    """
    if ybar_quadrature is None:
        ybar_quadrature = 11
    base_at = float(np.mean(eval_policy(pi_hat, t0, np.atleast_1d(float(y0)))))
    j_base, base_terms = reward_mc(pi_hat, t0, x0, y0, cfg, params,
                                   ybar_quadrature=ybar_quadrature, _pathwise=True)
    rows = []
    for delta in deltas:
        if t0 + delta >= params.T:
            raise DomainError("spike window must end before T")
        for off in perturbations:
            for spike in (base_at - off, base_at + off):
                pol = SpikePolicy(pi_hat, spike, float(t0), float(delta))
                j_sp, sp_terms = reward_mc(pol, t0, x0, y0, cfg, params,
                                           ybar_quadrature=ybar_quadrature,
                                           _pathwise=True)
                diff = base_terms - sp_terms
                se_diff = float(np.std(diff, ddof=1) / np.sqrt(diff.size))
                quotient = (j_base.value - j_sp.value) / delta
                se_q = se_diff / delta
                rows.append(SpikeRow(
                    delta=float(delta), spike=float(spike),
                    j_spiked=j_sp.value, quotient=float(quotient),
                    se=se_q, passed=bool(quotient >= -z_gate * se_q),
                ))
    return SpikeReport(
        note=("finite spike menu: a failing row falsifies the equilibrium "
              "property; passing rows cannot certify it"),
        t0=float(t0), x0=float(x0), y0=float(y0),
        j_base=j_base.value, j_base_se=j_base.se, rows=tuple(rows),
    )
