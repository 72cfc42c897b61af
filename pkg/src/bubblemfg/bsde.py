"""Backward solver for the pre-/post-burst value equations.

The value pair (Y, Z) is computed by backward induction on a uniform grid
with least-squares Monte Carlo conditional expectations over the driftless
state ``X_t = iota + sigma * W_t``: at each step Z comes from regressing
``Y_{i+1} * dW_i`` on the state, and Y takes an implicit step in its own
linear term (division by ``1 + dt * k_t``), which is all the implicitness
the affine-in-Y drivers need.

Two structural facts keep the solve linear in the number of grid steps:

* the post-burst driver does not depend on Y and has no explicit dependence
  on the burst time, and the crash loss enters the terminal condition as an
  additive value that is already known on the whole post-burst interval.
  Hence every member of the burst-time-indexed post-burst family shares one
  Markovian core (identical Z), shifted by the per-path locked-in loss
  ``X_{tau*} * beta * gamma(tau*)``;
* past the endogenous burst time the pre-burst equation coincides with that
  core exactly (the coupling term cancels), so the pre-burst sweep only has
  to run from the endogenous burst index down to the entry time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .scenario import Scenario, bubble_component, bubble_trend, loss_amplitude
from .stochastics import PathBundle

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * T / n_steps."""

    n_steps: int
    T: float

    def __post_init__(self):
        if self.n_steps <= 0 or self.T <= 0:
            raise ValueError("grid needs positive size and horizon")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def ceil_index(self, t) -> np.ndarray:
        """Smallest grid index at or after ``t``, capped at n_steps + 1 for
        times beyond the horizon (the "never on this grid" sentinel)."""
        idx = np.ceil(np.asarray(t, dtype=float) / self.dt - 1e-12).astype(int)
        return np.clip(idx, 0, self.n_steps + 1)


def grid_for(s: Scenario) -> TimeGrid:
    return TimeGrid(s.numerics.n_steps, s.model.T)


@dataclass(frozen=True)
class FittedPoly:
    """Polynomial in the standardized state ``u = (x - center) / scale``."""

    center: float
    scale: float
    coeffs: np.ndarray  # c0 + c1*u + c2*u**2 + ...

    def __call__(self, x):
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        out = np.full_like(u, self.coeffs[-1])
        for c in self.coeffs[-2::-1]:
            out *= u
            out += c
        return out


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of the standardized state, degree >= 1 (default 2: the cost
    structure is almost linear-quadratic, so quadratics capture Y well)."""

    degree: int = 2

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be at least 1")


def condexp(values: np.ndarray, states: np.ndarray, basis: RegressionBasis) -> FittedPoly:
    """Least-squares projection of per-path values onto polynomials of the
    state; falls back to a lower degree (with a warning) if the design matrix
    is rank deficient."""
    states = np.asarray(states, dtype=float)
    values = np.asarray(values, dtype=float)
    if states.size == 0:
        raise ValueError("need at least one sample")
    center = float(states.mean())
    scale = float(states.std())
    if scale < 1e-12:
        return FittedPoly(center, 1.0, np.array([float(values.mean())]))
    u = (states - center) / scale
    degree = min(basis.degree, np.unique(states).size - 1)
    if degree < basis.degree:
        warnings.warn("too few distinct states; regression degree reduced", stacklevel=2)
    while True:
        design = np.vander(u, degree + 1, increasing=True)
        gram = np.einsum("ni,nj->ij", design, design)
        rhs = np.einsum("ni,n->i", design, values)
        if degree == 0:
            return FittedPoly(center, scale, rhs / gram[0, 0])
        if np.linalg.cond(gram) < _COND_LIMIT:
            return FittedPoly(center, scale, np.linalg.solve(gram, rhs))
        warnings.warn("ill-conditioned regression; degree reduced", stacklevel=2)
        degree -= 1


# ---------------------------------------------------------------------------
# Control and minimized driver
# ---------------------------------------------------------------------------

def control_bounds_dual(s: Scenario) -> tuple[float, float]:
    """Interval of Z values mapped inside the admissible rates: the control
    clamp is equivalent to projecting z onto this interval first."""
    m = s.model
    return (-2.0 * m.kappa * m.sigma * m.a_hi, -2.0 * m.kappa * m.sigma * m.a_lo)


def optimal_control(z, s: Scenario):
    """Feedback rate ``-z / (2 kappa sigma)`` clamped into [a_lo, a_hi]."""
    m = s.model
    return np.clip(-np.asarray(z, dtype=float) / (2.0 * m.kappa * m.sigma), m.a_lo, m.a_hi)


def minimized_driver(t: float, x, theta_bar, z, s: Scenario, bubble_on: bool):
    """Running part of the value equation at the cost-minimizing rate.

    ``zp**2/(4 kappa sigma^2) - z*zp/(2 kappa sigma^2) + phi x^2
    - x delta theta_bar  [- x b(t) while the bubble is alive]``
    with zp the projection of z onto the dual control interval.  For
    unclamped z this reduces to ``-z^2/(4 kappa sigma^2) + phi x^2 - ...``.
    """
    m = s.model
    zlo, zhi = control_bounds_dual(s)
    z = np.asarray(z, dtype=float)
    zp = np.clip(z, zlo, zhi)
    x = np.asarray(x, dtype=float)
    ksig2 = m.kappa * m.sigma**2
    h = zp * zp / (4.0 * ksig2) - z * zp / (2.0 * ksig2) + m.phi * x * x
    h = h - x * (m.delta * theta_bar)
    if bubble_on:
        h = h - x * float(bubble_trend(t, s))
    return h


# ---------------------------------------------------------------------------
# Generic backward sweep
# ---------------------------------------------------------------------------

@dataclass
class CoeffTable:
    """Per-step fitted polynomials, stored as flat arrays for fast lookup."""

    start: int
    stop: int
    center: np.ndarray
    scale: np.ndarray
    coeffs: np.ndarray  # (n_steps + 1, degree + 1), NaN outside [start, stop]

    def fit_at(self, i: int) -> FittedPoly:
        return FittedPoly(self.center[i], self.scale[i], self.coeffs[i])

    def __call__(self, i: int, x):
        u = (np.asarray(x, dtype=float) - self.center[i]) / self.scale[i]
        c = self.coeffs[i]
        out = np.full_like(u, c[-1])
        for ck in c[-2::-1]:
            out *= u
            out += ck
        return out


@dataclass
class SweepResult:
    start: int
    stop: int
    y: CoeffTable
    z: CoeffTable
    values: np.ndarray          # per-path Y at each step, shape (stop-start+1, n)
    winsor_clips: int = 0

    def values_at(self, i: int) -> np.ndarray:
        return self.values[i - self.start]


def backward_sweep(
    terminal: np.ndarray,
    states: np.ndarray,
    dW: np.ndarray,
    grid: TimeGrid,
    driver,
    basis: RegressionBasis,
    start: int = 0,
    stop: int | None = None,
    rate: np.ndarray | None = None,
    source=None,
    winsor_q: float | None = None,
) -> SweepResult:
    """Backward induction from ``stop`` down to ``start``.

    Parameters
    ----------
    terminal : per-path values at grid index ``stop``.
    states : driftless states, shape (n_paths, n_steps + 1).
    driver : callable ``driver(i, x, z) -> values``; evaluated explicitly.
    rate : optional per-step linear feedback r_i; the update divides by
        ``1 + dt * r_i`` (implicit in Y) and adds ``dt * r_i * source(i)``.
    source : callable ``i -> per-path values`` paired with ``rate``.
    winsor_q : optional quantile for clipping fitted evaluations.
    """
    n_steps = states.shape[1] - 1
    if stop is None:
        stop = n_steps
    if not (0 <= start <= stop <= n_steps):
        raise ValueError("invalid sweep range")
    dt = grid.dt
    width = basis.degree + 1
    shape = (n_steps + 1, width)
    yc = CoeffTable(start, stop, np.full(n_steps + 1, np.nan), np.ones(n_steps + 1), np.full(shape, np.nan))
    zc = CoeffTable(start, max(stop - 1, start), np.full(n_steps + 1, np.nan), np.ones(n_steps + 1), np.full(shape, np.nan))
    values = np.empty((stop - start + 1, terminal.shape[0]))

    def store(table, i, fit):
        table.center[i] = fit.center
        table.scale[i] = fit.scale
        table.coeffs[i, : fit.coeffs.size] = fit.coeffs
        table.coeffs[i, fit.coeffs.size :] = 0.0

    def winsorize(arr, clips):
        lo, hi = np.quantile(arr, [winsor_q, 1.0 - winsor_q])
        clipped = np.clip(arr, lo, hi)
        return clipped, clips + int(np.count_nonzero(clipped != arr))

    clips = 0
    Y = np.asarray(terminal, dtype=float)
    values[stop - start] = Y
    fit_term = condexp(Y, states[:, stop], basis)
    store(yc, stop, fit_term)
    for i in range(stop - 1, start - 1, -1):
        x = states[:, i]
        fz = condexp(Y * dW[:, i], x, basis)
        z = fz(x) / dt
        store(zc, i, FittedPoly(fz.center, fz.scale, fz.coeffs / dt))
        fy = condexp(Y, x, basis)
        ey = fy(x)
        if winsor_q is not None:
            ey, clips = winsorize(ey, clips)
            z, clips = winsorize(z, clips)
        h = driver(i, x, z)
        if rate is None:
            Y = ey + dt * h
        else:
            r = rate[i]
            Y = (ey + dt * (h + r * source(i))) / (1.0 + dt * r)
        values[i - start] = Y
        store(yc, i, condexp(Y, x, basis))
    return SweepResult(start, stop, yc, zc, values, clips)


# ---------------------------------------------------------------------------
# Model-specific solves
# ---------------------------------------------------------------------------

def driftless_states(bundle: PathBundle, s: Scenario, entry_index: int = 0) -> np.ndarray:
    """States ``iota + sigma (W_t - W_{t*})`` after entry, zero before."""
    W = bundle.brownian()
    X = bundle.iota[:, None] + s.model.sigma * (W - W[:, [entry_index]])
    if entry_index > 0:
        X[:, :entry_index] = 0.0
    return X


@dataclass
class BurstSolution:
    """One leg of the value system: Markovian coefficient tables plus the
    per-path locked-in crash loss (zero until a burst index is fixed)."""

    start: int
    y: CoeffTable
    z: CoeffTable
    locked: np.ndarray
    entry_values: np.ndarray

    def value_mean(self) -> float:
        return float(np.mean(self.locked + self.entry_values))


def _crash_gain_per_unit(grid: TimeGrid, s: Scenario) -> np.ndarray:
    """beta * gamma on the grid: crash loss per unit of inventory."""
    t = grid.times
    return np.asarray(loss_amplitude(t, s) * bubble_component(t, s))


def solve_post_burst(
    eta_index: int,
    flows,
    bundle: PathBundle,
    s: Scenario,
    entry_index: int = 0,
    states: np.ndarray | None = None,
) -> BurstSolution:
    """Post-burst value on [t_eta, T] for a burst at grid index ``eta_index``.

    The crash loss is evaluated at ``min(eta_index, tau_index)`` (an
    endogenous burst that happened first caps it) and rides along as a
    per-path constant; the Markovian tables solve the terminal-penalty
    problem and are shared by every burst index.
    """
    grid = grid_for(s)
    basis = RegressionBasis(s.numerics.basis_degree)
    if states is None:
        states = driftless_states(bundle, s, entry_index)
    theta = np.asarray(flows.theta_bar, dtype=float)

    def h1(i, x, z):
        return minimized_driver(grid.times[i], x, theta[i], z, s, bubble_on=False)

    terminal = s.model.c * states[:, -1] ** 2
    core = backward_sweep(
        terminal, states, bundle.dW, grid, h1, basis,
        start=max(eta_index, entry_index), winsor_q=s.numerics.winsor_q,
    )
    burst_idx = min(eta_index, int(flows.tau_index))
    locked = states[:, burst_idx] * _crash_gain_per_unit(grid, s)[burst_idx]
    return BurstSolution(core.start, core.y, core.z, locked, core.values_at(core.start))


def solve_pre_burst(
    flows,
    diag_values,
    bundle: PathBundle,
    s: Scenario,
    terminal: np.ndarray,
    entry_index: int = 0,
    states: np.ndarray | None = None,
) -> SweepResult:
    """Pre-burst value on [t*, tau_bar]: bubble-trend driver plus the
    exogenous-burst coupling ``k_t (Y_post(t) - Y)``, implicit in Y.

    ``diag_values(i)`` supplies the per-path post-burst value for a burst at
    t_i; ``terminal`` is the per-path value at the endogenous burst index.
    """
    grid = grid_for(s)
    basis = RegressionBasis(s.numerics.basis_degree)
    if states is None:
        states = driftless_states(bundle, s, entry_index)
    theta = np.asarray(flows.theta_bar, dtype=float)
    rate = s.burst.k * grid.times

    def h0(i, x, z):
        return minimized_driver(grid.times[i], x, theta[i], z, s, bubble_on=True)

    return backward_sweep(
        terminal, states, bundle.dW, grid, h0, basis,
        start=entry_index, stop=int(flows.tau_index),
        rate=rate, source=diag_values, winsor_q=s.numerics.winsor_q,
    )


@dataclass
class BsdeFamily:
    """Value-equation solution for one entry time under fixed mean flows.

    ``y1``/``z1`` are the shared post-burst Markovian tables (the crash loss
    is additive, so the post-burst Z, hence the post-burst policy, does not
    depend on the burst time).  ``y0``/``z0`` cover [entry, tau_index]; past
    the endogenous burst the pre-burst equation coincides with the core.
    The jump unknown is not stored: it is the diagonal gap, see
    :meth:`jump_gap_values`.
    """

    entry_index: int
    tau_index: int
    crash_gain: np.ndarray  # beta*gamma per grid step
    y0: CoeffTable
    z0: CoeffTable
    y1: CoeffTable
    z1: CoeffTable
    value_at_entry: np.ndarray   # per-path pre-burst value at the entry step
    diagnostics: dict = field(default_factory=dict)

    def diag_y1_fit(self, i: int) -> FittedPoly:
        """Post-burst value at its own burst index, as a function of the
        state: crash loss ``beta*gamma(t_i) * x`` plus the Markovian core."""
        if not (self.entry_index <= i <= self.tau_index):
            raise ValueError("diagonal only available up to the endogenous burst index")
        base = self.y1.fit_at(i)
        coeffs = base.coeffs.copy()
        g = self.crash_gain[i]
        coeffs[0] += g * base.center
        if coeffs.size > 1:
            coeffs[1] += g * base.scale
        return FittedPoly(base.center, base.scale, coeffs)

    def jump_gap_values(self, i: int, x) -> np.ndarray:
        """Value jump if an exogenous burst hits at t_i: Y_post(t_i) - Y_pre."""
        return self.diag_y1_fit(i)(x) - self.y0(i, x)

    def expected_value(self) -> tuple[float, float]:
        """Mean and standard error of the entry-time value (the objective)."""
        v = self.value_at_entry
        return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def solve_family(flows, bundle: PathBundle, s: Scenario, entry_index: int = 0) -> BsdeFamily:
    """Solve the coupled pre-/post-burst system for one entry time.

    One post-burst core sweep over the whole remaining horizon, then one
    pre-burst sweep down from the endogenous burst index; linear cost in the
    number of grid steps.
    """
    grid = grid_for(s)
    states = driftless_states(bundle, s, entry_index)
    tau_index = int(flows.tau_index)
    gain = _crash_gain_per_unit(grid, s)
    theta = np.asarray(flows.theta_bar, dtype=float)

    def h1(i, x, z):
        return minimized_driver(grid.times[i], x, theta[i], z, s, bubble_on=False)

    basis = RegressionBasis(s.numerics.basis_degree)
    core_full = backward_sweep(
        s.model.c * states[:, -1] ** 2, states, bundle.dW, grid, h1, basis,
        start=entry_index, winsor_q=s.numerics.winsor_q,
    )

    def diag(i):
        return gain[i] * states[:, i] + core_full.values_at(i)

    if tau_index >= entry_index:
        terminal = diag(tau_index)
        pre = solve_pre_burst(flows, diag, bundle, s, terminal, entry_index, states=states)
        value_at_entry = pre.values_at(entry_index)
        y0, z0 = pre.y, pre.z
        pre_clips = pre.winsor_clips
    else:  # entered after the endogenous burst: the game is post-burst only
        value_at_entry = gain[tau_index] * states[:, tau_index] + core_full.values_at(entry_index)
        y0, z0 = core_full.y, core_full.z
        pre_clips = 0

    return BsdeFamily(
        entry_index=entry_index,
        tau_index=tau_index,
        crash_gain=gain,
        y0=y0,
        z0=z0,
        y1=core_full.y,
        z1=core_full.z,
        value_at_entry=value_at_entry,
        diagnostics={"winsor_clips": core_full.winsor_clips + pre_clips},
    )


def dump_coefficients(family: BsdeFamily, grid: TimeGrid, path) -> None:
    """Write the per-step coefficient tables as versioned columnar text."""
    lines = ["# bubblemfg coefficient table v1", "# table step time center scale c0 c1 c2 ..."]
    for name, table in (("y0", family.y0), ("z0", family.z0), ("y1", family.y1), ("z1", family.z1)):
        for i in range(table.start, table.stop + 1):
            if np.isnan(table.center[i]):
                continue
            cs = " ".join(f"{c:.17g}" for c in table.coeffs[i])
            lines.append(f"{name} {i} {grid.times[i]:.17g} {table.center[i]:.17g} {table.scale[i]:.17g} {cs}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
