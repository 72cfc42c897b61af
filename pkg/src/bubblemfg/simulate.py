"""Forward Monte Carlo of the controlled dynamics for a fixed policy.

Controls are piecewise constant on the grid (left endpoints).  Each path
switches from the pre-burst feedback to the post-burst feedback at its own
burst index: the exogenous time is snapped up to the grid, the endogenous
one is a grid point already.  The crash loss, the price jump and the wealth
jump all use the same snapped state and the same ``beta * gamma`` value, so
the jump identities hold to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BsdeFamily, CoeffTable, grid_for, optimal_control
from .scenario import (
    Scenario,
    bubble_component,
    bubble_trend,
    loss_amplitude,
)
from .stochastics import PathBundle

BRANCH_EXOGENOUS = 0
BRANCH_ENDOGENOUS = 1
BRANCH_NO_BURST = 2
BRANCH_NAMES = {BRANCH_EXOGENOUS: "exogenous", BRANCH_ENDOGENOUS: "endogenous", BRANCH_NO_BURST: "no_burst"}


@dataclass
class PolicyField:
    """Feedback trading rate derived from the fitted Z tables.

    The post-burst feedback is shared across burst times (the crash loss is
    sunk, so only the terminal-penalty core drives post-burst trading); the
    ``eta_index`` argument is accepted for the record but does not select a
    different table.
    """

    entry_index: int
    tau_index: int
    z_pre: CoeffTable
    z_post: CoeffTable

    @classmethod
    def from_family(cls, family: BsdeFamily) -> "PolicyField":
        return cls(family.entry_index, family.tau_index, family.z0, family.z1)

    def rate_pre(self, i: int, x, s: Scenario):
        return optimal_control(self.z_pre(i, x), s)

    def rate_post(self, i: int, x, s: Scenario, eta_index: int | None = None):
        return optimal_control(self.z_post(i, x), s)


@dataclass
class SimPaths:
    """Controlled inventories and rates plus per-path burst bookkeeping."""

    entry_index: int
    X: np.ndarray            # (n_paths, n_steps + 1)
    A: np.ndarray            # (n_paths, n_steps)
    snap_index: np.ndarray   # grid index of each path's burst
    tau_star: np.ndarray     # continuous burst time tau_bar ^ tau_exo
    burst_state: np.ndarray  # inventory at the snapped burst index
    branch: np.ndarray       # BRANCH_* codes
    clamp_fraction: float


def simulate_paths(policy: PolicyField, flows, bundle: PathBundle, s: Scenario) -> SimPaths:
    """Euler path simulation under the feedback policy.

    State and control are zero before entry; from the burst index on, the
    post-burst feedback takes over (an exogenous burst uses the path's own
    time, the endogenous branch bursts at the flows' tau_bar).
    """
    grid = grid_for(s)
    n_steps = grid.n_steps
    dt = grid.dt
    m = s.model
    entry = policy.entry_index
    tau_index = int(flows.tau_index)

    exo_snap = grid.ceil_index(bundle.tau_exo)
    snap = np.minimum(tau_index, exo_snap)

    n = bundle.n_paths
    X = np.zeros((n, n_steps + 1))
    A = np.zeros((n, n_steps))
    X[:, entry] = bundle.iota
    raw_scale = 2.0 * m.kappa * m.sigma
    clamp_hits = 0
    for i in range(entry, n_steps):
        x = X[:, i]
        z_post = policy.z_post(i, x)
        if i < tau_index:
            z = np.where(snap > i, policy.z_pre(i, x), z_post)
        else:
            z = z_post
        raw = -z / raw_scale
        a = np.clip(raw, m.a_lo, m.a_hi)
        clamp_hits += int(np.count_nonzero(raw != a))
        A[:, i] = a
        X[:, i + 1] = x + a * dt + m.sigma * bundle.dW[:, i]

    burst_state = X[np.arange(n), snap]
    tau_star = np.minimum(float(flows.tau_bar), bundle.tau_exo)
    branch = np.full(n, BRANCH_ENDOGENOUS if tau_index < n_steps else BRANCH_NO_BURST, dtype=np.int8)
    branch[bundle.tau_exo < float(flows.tau_bar)] = BRANCH_EXOGENOUS
    denom = max(n * (n_steps - entry), 1)
    return SimPaths(
        entry_index=entry, X=X, A=A, snap_index=snap, tau_star=tau_star,
        burst_state=burst_state, branch=branch, clamp_fraction=clamp_hits / denom,
    )


def path_costs(paths: SimPaths, flows, s: Scenario) -> np.ndarray:
    """Per-path realized cost: running cost from entry to the horizon, the
    crash loss at the snapped burst, and the terminal penalty."""
    grid = grid_for(s)
    dt = grid.dt
    m = s.model
    times = grid.times
    b = np.asarray(bubble_trend(times, s))
    theta = np.asarray(flows.theta_bar, dtype=float)
    gain = np.asarray(loss_amplitude(times, s) * bubble_component(times, s))

    n = paths.X.shape[0]
    total = np.zeros(n)
    for i in range(paths.entry_index, grid.n_steps):
        x = paths.X[:, i]
        a = paths.A[:, i]
        rate = m.kappa * a * a + m.phi * x * x - x * (m.delta * theta[i])
        rate -= np.where(paths.snap_index > i, x * b[i], 0.0)
        total += dt * rate
    total += paths.burst_state * gain[paths.snap_index]
    total += m.c * paths.X[:, -1] ** 2
    return total


@dataclass
class PricePaths:
    P: np.ndarray            # traded price, post-jump at the burst index
    fundamental: np.ndarray  # impact-drifted reference price (no bubble)
    jump_size: np.ndarray    # beta*gamma at each path's burst


def simulate_price(paths: SimPaths, flows, bundle: PathBundle, s: Scenario) -> PricePaths:
    """Price paths with the bubble accrued exactly and consumed at the burst.

    The bubble increment uses the closed-form offset (not an Euler sum), so
    with full loss amplitude the post-jump price equals the fundamental
    component exactly.
    """
    grid = grid_for(s)
    dt = grid.dt
    m = s.model
    times = grid.times
    gamma = np.asarray(bubble_component(times, s))
    dgamma = np.diff(gamma)
    theta = np.asarray(flows.theta_bar, dtype=float)
    gain = np.asarray(loss_amplitude(times, s) * bubble_component(times, s))

    n, n_steps = bundle.n_paths, grid.n_steps
    Q = np.empty((n, n_steps + 1))
    Q[:, 0] = m.P0
    for i in range(n_steps):
        Q[:, i + 1] = Q[:, i] + m.delta * theta[i] * dt + m.sigma0 * bundle.dW0[:, i]

    P = Q.copy()
    snap = paths.snap_index
    step_idx = np.arange(n_steps + 1)
    alive = step_idx[None, :] <= snap[:, None]          # bubble accrued up to the burst index
    P += np.where(alive, gamma[None, :], gamma[snap][:, None])
    jump = gain[snap]
    P -= np.where(step_idx[None, :] >= snap[:, None], jump[:, None], 0.0)
    return PricePaths(P=P, fundamental=Q, jump_size=jump)


def simulate_wealth(paths: SimPaths, prices: PricePaths, flows, bundle: PathBundle, s: Scenario) -> np.ndarray:
    """Mark-to-market wealth under self-financing, starting from zero.

    Drift: ``-kappa a^2 + x (b(t) 1{pre-burst} + delta theta_bar)``; noise
    from both price factors; at the burst the position loses
    ``x * beta * gamma`` in one step.
    """
    grid = grid_for(s)
    dt = grid.dt
    m = s.model
    times = grid.times
    b = np.asarray(bubble_trend(times, s))
    theta = np.asarray(flows.theta_bar, dtype=float)

    n, n_steps = bundle.n_paths, grid.n_steps
    V = np.zeros((n, n_steps + 1))
    snap = paths.snap_index
    for i in range(n_steps):
        x = paths.X[:, i]
        a = paths.A[:, i]
        drift = -m.kappa * a * a + x * (np.where(snap > i, b[i], 0.0) + m.delta * theta[i])
        dv = drift * dt + m.sigma0 * x * bundle.dW0[:, i] + m.sigma * prices.P[:, i] * bundle.dW[:, i]
        dv -= np.where(snap == i + 1, paths.burst_state * prices.jump_size, 0.0)
        V[:, i + 1] = V[:, i] + dv
    # a burst at the entry step itself is lossless (zero inventory before entry)
    return V


def wealth_objective(paths: SimPaths, wealth: np.ndarray, s: Scenario) -> np.ndarray:
    """Per-path cost recomputed from the wealth path: loss of wealth plus
    running and terminal inventory penalties.  Agrees with
    :func:`path_costs` up to the zero-mean noise terms."""
    grid = grid_for(s)
    dt = grid.dt
    pen = s.model.phi * np.sum(paths.X[:, :-1] ** 2, axis=1) * dt
    return -(wealth[:, -1] - wealth[:, 0]) + pen + s.model.c * paths.X[:, -1] ** 2


# ---------------------------------------------------------------------------
# Reporting statistics
# ---------------------------------------------------------------------------

QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)


@dataclass
class PathStats:
    times: np.ndarray
    mean_x: np.ndarray
    quantiles_x: np.ndarray       # (len(QUANTILES), n_steps + 1)
    mean_rate: np.ndarray         # (n_steps,)
    branch_mean_x: dict
    branch_mean_rate: dict
    branch_counts: dict
    concavity: float
    sample_paths: dict            # branch name -> path index


def concavity_diagnostic(mu_bar: np.ndarray, tau_index: int) -> float:
    """Fraction of negative discrete second differences of the mean
    inventory strictly before the endogenous burst.  Above one half reads
    as a concave (ride-then-attack) profile, below as convex risk-aversion."""
    seg = np.asarray(mu_bar, dtype=float)[: tau_index + 1]
    if seg.size < 3:
        return float("nan")
    d2 = np.diff(seg, 2)
    return float(np.mean(d2 < 0))


def summarize(paths: SimPaths, flows, s: Scenario) -> PathStats:
    grid = grid_for(s)
    X, A = paths.X, paths.A
    stats = PathStats(
        times=grid.times,
        mean_x=X.mean(axis=0),
        quantiles_x=np.quantile(X, QUANTILES, axis=0),
        mean_rate=A.mean(axis=0),
        branch_mean_x={},
        branch_mean_rate={},
        branch_counts={},
        concavity=concavity_diagnostic(flows.mu_bar, int(flows.tau_index)),
        sample_paths={},
    )
    for code, name in BRANCH_NAMES.items():
        mask = paths.branch == code
        stats.branch_counts[name] = int(mask.sum())
        if mask.any():
            stats.branch_mean_x[name] = X[mask].mean(axis=0)
            stats.branch_mean_rate[name] = A[mask].mean(axis=0)
    stats.sample_paths = _select_sample_paths(paths)
    return stats


def _select_sample_paths(paths: SimPaths) -> dict:
    """One exogenous path with burst time nearest the branch median, one
    endogenous path nearest the mean trajectory."""
    out = {}
    exo = np.flatnonzero(paths.branch == BRANCH_EXOGENOUS)
    if exo.size:
        taus = paths.tau_star[exo]
        out["exogenous"] = int(exo[np.argmin(np.abs(taus - np.median(taus)))])
    endo = np.flatnonzero(paths.branch == BRANCH_ENDOGENOUS)
    if endo.size:
        mean_traj = paths.X[endo].mean(axis=0)
        dev = np.sum((paths.X[endo] - mean_traj) ** 2, axis=1)
        out["endogenous"] = int(endo[np.argmin(dev)])
    return out
