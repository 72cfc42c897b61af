"""Model configuration: price bubble, burst thresholds, costs and entry law.

A :class:`Scenario` collects every model function the solver needs.  The
pre-burst price carries a power-law bubble component on top of the usual
permanent/temporary-impact execution model; the bubble dies either
endogenously (average inventory crosses a rising threshold) or exogenously
(a random time with linear intensity ``k*t``).  All functions here are pure
and vectorized over time, so they are safe to share between threads.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PRESET_NAMES = ("Default", "BigBubble", "NoBubble", "FearExo", "LowImpact")


@dataclass(frozen=True)
class ModelParams:
    """Execution-model constants.

    kappa   temporary impact (cost per squared trading rate), > 0
    delta   permanent impact slope: drift contribution ``delta * mean rate``
    phi     running inventory penalty weight, >= 0
    c       terminal inventory penalty weight, > 0
    sigma   inventory noise volatility, > 0
    sigma0  fundamental price volatility (display only)
    P0      initial price
    T       trading horizon
    a_lo, a_hi   admissible trading-rate interval, must contain 0
    """

    kappa: float = 0.5
    delta: float = 0.5
    phi: float = 0.1
    c: float = 10.0
    sigma: float = 1.0
    sigma0: float = 1.0
    P0: float = 10.0
    T: float = 1.0
    a_lo: float = -50.0
    a_hi: float = 50.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.phi < 0:
            raise ValueError("phi must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not (self.a_lo <= 0.0 <= self.a_hi):
            raise ValueError("trading-rate interval must contain 0")


@dataclass(frozen=True)
class BubbleSpec:
    """Power-law bubble shape.

    B0 scales the power law (0 disables the bubble entirely), ell in (0,1)
    controls the growth rate, and the critical time sits at ``tc_mult * T``
    so the trend stays finite on the horizon.  ``beta_const`` is the fraction
    of the bubble consumed at the crash; a piecewise-linear schedule can be
    supplied instead via ``beta_table`` (times, values).
    """

    B0: float = math.log(20.0)
    ell: float = 0.5
    tc_mult: float = 1.1
    beta_const: float = 1.0
    beta_table: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.B0 < 0:
            raise ValueError("B0 must be non-negative")
        if self.B0 > 0 and not (0.0 < self.ell < 1.0):
            raise ValueError("ell must lie in (0, 1) when the bubble is active")
        if self.tc_mult <= 1.0:
            raise ValueError("critical-time multiplier must exceed 1")
        if not (0.0 <= self.beta_const <= 1.0):
            raise ValueError("loss amplitude must lie in [0, 1]")
        if self.beta_table is not None:
            ts, vs = self.beta_table
            if len(ts) != len(vs) or len(ts) < 2:
                raise ValueError("beta_table needs matching times/values, length >= 2")
            if np.any(np.diff(ts) <= 0) or np.any(np.diff(vs) < 0):
                raise ValueError("beta_table must be increasing in time and monotone in value")
            if min(vs) < 0 or max(vs) > 1:
                raise ValueError("beta_table values must lie in [0, 1]")


@dataclass(frozen=True)
class BurstSpec:
    """Burst mechanics: exogenous intensity slope and endogenous threshold.

    The exogenous burst arrives with intensity ``k * t``; ``k = 0`` disables
    it.  The endogenous threshold is ``zeta0 + zeta_slope * t``; the crash
    triggers when the running minimum of the mean inventory reaches it.
    """

    k: float = 2.0
    zeta0: float = 2.0
    zeta_slope: float = 1e-6

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("intensity slope k must be non-negative")
        if self.zeta0 <= 0:
            raise ValueError("zeta0 must be positive")
        if self.zeta_slope < 0:
            raise ValueError("zeta_slope must be non-negative")
        if self.zeta_slope == 0:
            warnings.warn(
                "zeta_slope = 0 gives a flat threshold; the burst map is only "
                "guaranteed continuous for strictly increasing thresholds",
                stacklevel=2,
            )


@dataclass(frozen=True)
class EntrySpec:
    """Entry-time law on [0, eta]: an atom at 0 plus a uniform layer.

    ``p0`` is the mass entering at time 0 (must be positive so the market is
    never empty); the remaining ``1 - p0`` enters uniformly on (0, eta].
    ``kind == "fixed"`` means everyone enters at 0, i.e. ``p0 == 1``.
    """

    kind: str = "fixed"
    eta: float = 0.0
    p0: float = 1.0
    n_entry_grid: int | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "atom-plus-uniform"):
            raise ValueError(f"unknown entry kind {self.kind!r}")
        if not (0.0 < self.p0 <= 1.0):
            raise ValueError("p0 must lie in (0, 1]")
        if (self.kind == "fixed") != (self.p0 == 1.0):
            raise ValueError("fixed entry is equivalent to p0 = 1")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.kind == "atom-plus-uniform" and self.eta <= 0:
            raise ValueError("atom-plus-uniform entry needs eta > 0")


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian initial inventory, optionally truncated at zero."""

    mean: float = 10.0
    std: float = 2.0
    truncate_at_zero: bool = False

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("initial mean inventory must be positive")
        if self.std < 0:
            raise ValueError("initial inventory std must be non-negative")


@dataclass(frozen=True)
class NumericsSpec:
    """Discretization and fixed-point controls.

    n_entry_grid defaults to 1 for fixed entry and 8 otherwise.  ``winsor_q``
    optionally clips regression evaluations at the (q, 1-q) quantiles;
    activations are reported in the solve diagnostics.  ``redraw_paths``
    draws a fresh path bundle each fixed-point iteration instead of reusing
    common random numbers.
    """

    n_steps: int = 100
    n_paths: int = 20_000
    basis_degree: int = 2
    damping: float = 0.5
    tol: float = 1e-3
    max_iter: int = 50
    seed: int = 0
    n_entry_grid: int | None = None
    winsor_q: float | None = None
    redraw_paths: bool = False

    def __post_init__(self):
        if self.n_steps <= 0 or self.n_paths <= 0:
            raise ValueError("grid sizes must be positive")
        if self.basis_degree < 1:
            raise ValueError("basis degree must be at least 1")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0 or self.max_iter <= 0:
            raise ValueError("tol and max_iter must be positive")
        if self.winsor_q is not None and not (0.0 < self.winsor_q < 0.5):
            raise ValueError("winsor_q must lie in (0, 0.5)")


@dataclass(frozen=True)
class Scenario:
    """Full parameterization of one model run."""

    model: ModelParams = field(default_factory=ModelParams)
    bubble: BubbleSpec = field(default_factory=BubbleSpec)
    burst: BurstSpec = field(default_factory=BurstSpec)
    entry: EntrySpec = field(default_factory=EntrySpec)
    init: InitialLaw = field(default_factory=InitialLaw)
    numerics: NumericsSpec = field(default_factory=NumericsSpec)

    def __post_init__(self):
        if self.burst.zeta0 >= self.init.mean:
            raise ValueError("zeta0 must stay below the mean initial inventory")
        if self.entry.eta > self.model.T:
            raise ValueError("awareness window cannot exceed the horizon")


# ---------------------------------------------------------------------------
# Model functions
# ---------------------------------------------------------------------------

def bubble_component(t, s: Scenario):
    """Price offset of the bubble at time ``t`` (gap above the fundamental).

    With critical time ``tc = tc_mult * T`` the offset is
    ``P0 * (exp(B0 * (tc**ell - (tc - t)**ell)) - 1)``: zero at t = 0 and
    increasing on [0, T].  Identically zero when B0 = 0.
    """
    t = np.asarray(t, dtype=float)
    bb, m = s.bubble, s.model
    if bb.B0 == 0.0:
        return np.zeros_like(t)
    tc = bb.tc_mult * m.T
    return m.P0 * np.expm1(bb.B0 * (tc**bb.ell - (tc - t) ** bb.ell))


def bubble_trend(t, s: Scenario):
    """Drift rate of the bubble component; its time integral is the offset."""
    t = np.asarray(t, dtype=float)
    bb, m = s.bubble, s.model
    if bb.B0 == 0.0:
        return np.zeros_like(t)
    tc = bb.tc_mult * m.T
    u = tc - t
    return m.P0 * np.exp(bb.B0 * (tc**bb.ell - u**bb.ell)) * bb.ell * bb.B0 * u ** (bb.ell - 1.0)


def threshold(t, s: Scenario):
    """Endogenous-burst threshold ``zeta0 + zeta_slope * t``."""
    return s.burst.zeta0 + s.burst.zeta_slope * np.asarray(t, dtype=float)


def loss_amplitude(t, s: Scenario):
    """Fraction of the bubble consumed at a crash occurring at time ``t``."""
    t = np.asarray(t, dtype=float)
    bb = s.bubble
    if bb.beta_table is None:
        return np.full_like(t, bb.beta_const)
    ts, vs = bb.beta_table
    return np.interp(t, ts, vs)


def entry_cdf(t, s: Scenario):
    """Fraction of the population that has entered by time ``t``."""
    t = np.asarray(t, dtype=float)
    e = s.entry
    if e.kind == "fixed":
        return np.ones_like(t)
    ramp = np.clip(t / e.eta, 0.0, 1.0)
    return np.where(t < 0, 0.0, e.p0 + (1.0 - e.p0) * ramp)


def running_cost(t, x, theta_bar, a, pre_burst, s: Scenario):
    """Instantaneous cost rate.

    ``kappa*a**2 + phi*x**2 - x*delta*theta_bar``, minus the bubble-trend
    term ``x * b(t)`` while the bubble is alive (``pre_burst``).  Rejects
    rates outside the admissible interval.
    """
    a = np.asarray(a, dtype=float)
    m = s.model
    if np.any(a < m.a_lo - 1e-12) or np.any(a > m.a_hi + 1e-12):
        raise ValueError("trading rate outside the admissible interval")
    x = np.asarray(x, dtype=float)
    out = m.kappa * a**2 + m.phi * x**2 - x * m.delta * np.asarray(theta_bar, dtype=float)
    pre = np.asarray(pre_burst, dtype=bool)
    return out - np.where(pre, x * bubble_trend(t, s), 0.0)


def terminal_cost(x_at_burst, x_T, tau_star, s: Scenario):
    """Crash loss plus quadratic liquidation penalty.

    ``x_at_burst * beta(tau_star) * gamma(tau_star) + c * x_T**2``.
    """
    loss = np.asarray(x_at_burst, dtype=float) * loss_amplitude(tau_star, s) * bubble_component(tau_star, s)
    return loss + s.model.c * np.asarray(x_T, dtype=float) ** 2


# ---------------------------------------------------------------------------
# Presets (shared constants: sigma=1, zeta=2, T=1, c=10, phi=0.1, P0=10)
# ---------------------------------------------------------------------------

def preset(name: str) -> Scenario:
    """Build one of the named scenarios: Default, BigBubble, NoBubble,
    FearExo, LowImpact."""
    base = Scenario()
    if name == "Default":
        return base
    if name == "BigBubble":
        return replace(base, bubble=replace(base.bubble, B0=1.3 * math.log(20.0), ell=0.65))
    if name == "NoBubble":
        return replace(base, bubble=replace(base.bubble, B0=0.0))
    if name == "FearExo":
        return replace(base, burst=replace(base.burst, k=5.0))
    if name == "LowImpact":
        return replace(base, model=replace(base.model, kappa=0.1, delta=0.3))
    raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


# ---------------------------------------------------------------------------
# Flat key=value scenario files
# ---------------------------------------------------------------------------

_MODEL_KEYS = ("kappa", "delta", "phi", "c", "sigma", "sigma0", "P0", "T", "a_lo", "a_hi")
_NUMERIC_INT_KEYS = ("n_steps", "n_paths", "basis_degree", "max_iter", "seed")


def scenario_to_text(s: Scenario) -> str:
    """Serialize to the flat key=value format (round-trips via
    :func:`scenario_from_text`)."""
    m, bb, bu, e, init, n = s.model, s.bubble, s.burst, s.entry, s.init, s.numerics
    lines = [
        f"kappa = {m.kappa!r}",
        f"delta = {m.delta!r}",
        f"phi = {m.phi!r}",
        f"c = {m.c!r}",
        f"sigma = {m.sigma!r}",
        f"sigma0 = {m.sigma0!r}",
        f"P0 = {m.P0!r}",
        f"T = {m.T!r}",
        f"a_lo = {m.a_lo!r}",
        f"a_hi = {m.a_hi!r}",
        f"B0 = {bb.B0!r}",
        f"ell = {bb.ell!r}",
        f"tc_mult = {bb.tc_mult!r}",
        f"beta = {bb.beta_const!r}",
        f"k = {bu.k!r}",
        f"zeta0 = {bu.zeta0!r}",
        f"zeta_slope = {bu.zeta_slope!r}",
        f"eta = {e.eta!r}",
        f"p0 = {e.p0!r}",
        f"init_mean = {init.mean!r}",
        f"init_std = {init.std!r}",
        f"truncate_init = {int(init.truncate_at_zero)}",
        f"n_steps = {n.n_steps}",
        f"n_paths = {n.n_paths}",
        f"basis_degree = {n.basis_degree}",
        f"damping = {n.damping!r}",
        f"tol = {n.tol!r}",
        f"max_iter = {n.max_iter}",
        f"seed = {n.seed}",
    ]
    if e.n_entry_grid is not None:
        lines.append(f"n_entry_grid = {e.n_entry_grid}")
    return "\n".join(lines) + "\n"


def scenario_from_text(text: str) -> Scenario:
    """Parse the flat key=value format; unknown keys are rejected."""
    raw: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = float(value)

    def pop(key, default):
        return raw.pop(key, default)

    model = ModelParams(**{k: pop(k, getattr(ModelParams, k)) for k in _MODEL_KEYS})
    bubble = BubbleSpec(
        B0=pop("B0", math.log(20.0)),
        ell=pop("ell", 0.5),
        tc_mult=pop("tc_mult", 1.1),
        beta_const=pop("beta", 1.0),
    )
    burst = BurstSpec(k=pop("k", 2.0), zeta0=pop("zeta0", 2.0), zeta_slope=pop("zeta_slope", 1e-6))
    p0 = pop("p0", 1.0)
    eta = pop("eta", 0.0)
    n_entry = raw.pop("n_entry_grid", None)
    entry = EntrySpec(
        kind="fixed" if p0 == 1.0 else "atom-plus-uniform",
        eta=eta,
        p0=p0,
        n_entry_grid=None if n_entry is None else int(n_entry),
    )
    init = InitialLaw(
        mean=pop("init_mean", 10.0),
        std=pop("init_std", 2.0),
        truncate_at_zero=bool(int(pop("truncate_init", 0))),
    )
    numerics = NumericsSpec(
        n_steps=int(pop("n_steps", 100)),
        n_paths=int(pop("n_paths", 20_000)),
        basis_degree=int(pop("basis_degree", 2)),
        damping=pop("damping", 0.5),
        tol=pop("tol", 1e-3),
        max_iter=int(pop("max_iter", 50)),
        seed=int(pop("seed", 0)),
    )
    if raw:
        raise ValueError(f"unknown scenario keys: {sorted(raw)}")
    return Scenario(model=model, bubble=bubble, burst=burst, entry=entry, init=init, numerics=numerics)


def load_scenario(path) -> Scenario:
    return scenario_from_text(Path(path).read_text())


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(scenario_to_text(s))


def scenario_hash(s: Scenario) -> str:
    """Short fingerprint of the full parameterization, used in reports and
    bundle cache files."""
    return hashlib.sha256(scenario_to_text(s).encode()).hexdigest()[:16]
