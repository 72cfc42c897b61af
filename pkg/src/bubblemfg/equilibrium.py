"""Mean field fixed point over the interaction flows.

The whole cross-agent coupling lives in two curves and one scalar: the
entry-weighted mean trading rate, the entry-weighted mean inventory, and
the endogenous burst time implied by that inventory.  Each iteration maps
flows -> best-response flows (solve the value equations per entry point,
simulate the feedback policy forward, aggregate with entry weights), then
damps.  The burst time is never damped; it is recomputed exactly from the
damped inventory so its running-minimum definition stays intact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeFamily, TimeGrid, grid_for, solve_family
from .scenario import Scenario, threshold
from .simulate import PolicyField, SimPaths, path_costs, simulate_paths
from .stochastics import PathBundle, sample_bundle


@dataclass
class MeanFlows:
    """Discretized interaction state on the time grid."""

    theta_bar: np.ndarray
    mu_bar: np.ndarray
    tau_bar: float
    tau_index: int


def endogenous_burst(mu_bar: np.ndarray, s: Scenario, grid: TimeGrid) -> tuple[float, int]:
    """First grid time where the running minimum of the mean inventory
    reaches the threshold; the horizon if it never does.

    The running minimum (not the current value) triggers: a dip that later
    recovers still bursts the bubble at the dip.
    """
    times = grid.times
    zeta = np.asarray(threshold(times, s))
    run_min = np.minimum.accumulate(np.asarray(mu_bar, dtype=float))
    hit = np.flatnonzero(run_min <= zeta)
    if hit.size == 0:
        return float(times[-1]), grid.n_steps
    return float(times[hit[0]]), int(hit[0])


@dataclass(frozen=True)
class EntryGrid:
    """Quadrature of the entry law: an atom at zero plus midpoint nodes on
    (0, eta], all snapped to the time grid.  ``cdf`` is the discrete entry
    CDF evaluated on the full time grid (this is what entry-weighted means
    divide by, keeping the aggregation identities exact)."""

    indices: np.ndarray
    weights: np.ndarray
    cdf: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.indices)


def build_entry_grid(s: Scenario, grid: TimeGrid) -> EntryGrid:
    e = s.entry
    if e.kind == "fixed":
        idx = np.array([0])
        w = np.array([1.0])
    else:
        m = e.n_entry_grid if e.n_entry_grid is not None else (s.numerics.n_entry_grid or 8)
        mids = (np.arange(m) + 0.5) * e.eta / m
        mid_idx = np.rint(mids / grid.dt).astype(int)
        idx = np.concatenate([[0], mid_idx])
        w = np.concatenate([[e.p0], np.full(m, (1.0 - e.p0) / m)])
        # merge nodes that snapped onto the same grid point
        uniq, inv = np.unique(idx, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inv, w)
        idx, w = uniq, merged
    cdf = np.zeros(grid.n_steps + 1)
    for j, i0 in enumerate(idx):
        cdf[i0:] += w[j]
    return EntryGrid(indices=idx, weights=w, cdf=cdf)


@dataclass
class FixedPointReport:
    iterations: int
    residuals: list[float]
    converged: bool
    clamp_fraction: float
    wall_time: float
    winsor_clips: int = 0


@dataclass
class EquilibriumResult:
    scenario: Scenario
    flows: MeanFlows
    families: list[BsdeFamily]
    policies: list[PolicyField]
    entry_grid: EntryGrid
    bundle: PathBundle
    report: FixedPointReport
    response_paths: list[SimPaths] = field(default_factory=list)


def forward_response(
    families: list[BsdeFamily],
    flows: MeanFlows,
    bundle: PathBundle,
    s: Scenario,
    entry_grid: EntryGrid,
) -> tuple[MeanFlows, list[PolicyField], list[SimPaths]]:
    """Best-response flows: simulate each entry point's policy with the
    common noise bundle and aggregate entry-weighted means.

    Controls and inventories count as zero before entry, so the aggregation
    is a plain weighted mean divided by the (discrete) entry CDF.  For
    fixed entry this reduces to the plain path mean exactly.
    """
    grid = grid_for(s)
    policies = [PolicyField.from_family(f) for f in families]
    sum_a = np.zeros(grid.n_steps + 1)
    sum_x = np.zeros(grid.n_steps + 1)
    all_paths = []
    clamp = 0.0
    for policy, w in zip(policies, entry_grid.weights):
        paths = simulate_paths(policy, flows, bundle, s)
        all_paths.append(paths)
        sum_a[:-1] += w * paths.A.mean(axis=0)
        sum_x += w * paths.X.mean(axis=0)
        clamp += w * paths.clamp_fraction
    sum_a[-1] = sum_a[-2]
    theta_bar = sum_a / entry_grid.cdf
    mu_bar = sum_x / entry_grid.cdf
    tau_bar, tau_index = endogenous_burst(mu_bar, s, grid)
    new = MeanFlows(theta_bar=theta_bar, mu_bar=mu_bar, tau_bar=tau_bar, tau_index=tau_index)
    new_policies = policies
    for p in all_paths:
        p.clamp_fraction = clamp  # aggregate rate, reported once
    return new, new_policies, all_paths


def initial_flows(s: Scenario, grid: TimeGrid) -> MeanFlows:
    """No-trading initialization: zero rate, flat inventory, burst at T."""
    theta = np.zeros(grid.n_steps + 1)
    mu = np.full(grid.n_steps + 1, s.init.mean)
    tau_bar, tau_index = endogenous_burst(mu, s, grid)
    return MeanFlows(theta, mu, tau_bar, tau_index)


def picard_solve(s: Scenario, bundle: PathBundle | None = None) -> EquilibriumResult:
    """Damped fixed-point iteration over the mean flows.

    Stops when the relative sup-norm change of the flows (plus the burst
    shift in units of the horizon) drops below tol, or at max_iter with
    ``converged=False`` (the best iterate is returned; non-convergence is a
    result, not an error).
    """
    t0 = time.perf_counter()
    grid = grid_for(s)
    num = s.numerics
    entry_grid = build_entry_grid(s, grid)
    if bundle is None:
        bundle = sample_bundle(s, num.seed)
    redraw_seeds = None
    if num.redraw_paths:
        redraw_seeds = np.random.SeedSequence(num.seed).generate_state(num.max_iter + 1, np.uint64)

    flows = initial_flows(s, grid)
    residuals: list[float] = []
    best = (np.inf, flows)
    converged = False
    lam = num.damping
    clamp = 0.0
    it_bundle = bundle
    for it in range(1, num.max_iter + 1):
        if redraw_seeds is not None:
            it_bundle = sample_bundle(s, int(redraw_seeds[it]))
        families = [solve_family(flows, it_bundle, s, entry_index=int(j)) for j in entry_grid.indices]
        response, _, resp_paths = forward_response(families, flows, it_bundle, s, entry_grid)
        clamp = resp_paths[0].clamp_fraction if resp_paths else 0.0

        theta_new = (1.0 - lam) * flows.theta_bar + lam * response.theta_bar
        mu_new = (1.0 - lam) * flows.mu_bar + lam * response.mu_bar
        tau_bar, tau_index = endogenous_burst(mu_new, s, grid)
        res = max(
            float(np.max(np.abs(theta_new - flows.theta_bar))) / max(1.0, float(np.max(np.abs(theta_new)))),
            float(np.max(np.abs(mu_new - flows.mu_bar))) / max(1.0, float(np.max(np.abs(mu_new)))),
            abs(tau_bar - flows.tau_bar) / s.model.T,
        )
        residuals.append(res)
        flows = MeanFlows(theta_new, mu_new, tau_bar, tau_index)
        if res < best[0]:
            best = (res, flows)
        if res < num.tol:
            converged = True
            break

    if not converged:
        flows = best[1]
    # refresh the solution objects so they are consistent with the flows
    families = [solve_family(flows, bundle, s, entry_index=int(j)) for j in entry_grid.indices]
    policies = [PolicyField.from_family(f) for f in families]
    final_paths = [simulate_paths(p, flows, bundle, s) for p in policies]
    winsor = sum(f.diagnostics.get("winsor_clips", 0) for f in families)
    report = FixedPointReport(
        iterations=len(residuals),
        residuals=residuals,
        converged=converged,
        clamp_fraction=clamp,
        wall_time=time.perf_counter() - t0,
        winsor_clips=winsor,
    )
    return EquilibriumResult(
        scenario=s, flows=flows, families=families, policies=policies,
        entry_grid=entry_grid, bundle=bundle, report=report, response_paths=final_paths,
    )


def conditional_objective(
    policy: PolicyField, flows: MeanFlows, bundle: PathBundle, s: Scenario
) -> tuple[float, float, np.ndarray]:
    """Monte Carlo objective for one entry point: mean realized cost along
    the controlled paths, its standard error, and the per-path costs."""
    paths = simulate_paths(policy, flows, bundle, s)
    costs = path_costs(paths, flows, s)
    return float(costs.mean()), float(costs.std(ddof=1) / np.sqrt(costs.size)), costs


def objective(result: EquilibriumResult) -> tuple[float, float]:
    """Entry-weighted objective value with its standard error (the entry
    points share the noise bundle, so the weighting happens per path)."""
    total = np.zeros(result.bundle.n_paths)
    for policy, w in zip(result.policies, result.entry_grid.weights):
        _, _, costs = conditional_objective(policy, result.flows, result.bundle, result.scenario)
        total += w * costs
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(total.size))


def expected_initial_value(result: EquilibriumResult) -> tuple[float, float]:
    """Entry-weighted mean of the solved value process at entry, with a
    standard error; should agree with :func:`objective` (tower property)."""
    total = np.zeros(result.bundle.n_paths)
    for family, w in zip(result.families, result.entry_grid.weights):
        total += w * family.value_at_entry
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(total.size))
