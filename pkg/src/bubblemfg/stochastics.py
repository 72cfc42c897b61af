"""Seeded sampling of Brownian increments, initial inventories and burst times.

A single 64-bit seed determines the whole :class:`PathBundle` bit-for-bit.
Independent sub-streams (inventory, trading noise, burst times, price noise)
are split off one ``SeedSequence`` so adding consumers never perturbs the
others, and generation is a fixed-order vectorized draw, independent of any
thread scheduling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .scenario import Scenario

_CACHE_MAGIC = b"BMFGBNDL"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class PathBundle:
    """Raw randomness for one Monte Carlo run.

    dW        Brownian increments, shape (n_paths, n_steps), each N(0, dt)
    dW0       independent increments driving the fundamental price
    iota      initial inventory per path
    tau_exo   exogenous burst time per path; +inf or any value > T means
              "no burst by the horizon"
    """

    n_paths: int
    n_steps: int
    dt: float
    dW: np.ndarray
    dW0: np.ndarray
    iota: np.ndarray
    tau_exo: np.ndarray
    seed: int

    def brownian(self) -> np.ndarray:
        """Cumulative Brownian path, shape (n_paths, n_steps + 1), W_0 = 0."""
        W = np.empty((self.n_paths, self.n_steps + 1))
        W[:, 0] = 0.0
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return W


def sample_exogenous(k: float, n: int, seed) -> np.ndarray:
    """Draw ``n`` exogenous burst times for intensity ``k * t``.

    Inverse-transform sampling: with E ~ Exp(1), ``tau = sqrt(2 E / k)``,
    matching the survival function ``P(tau > t) = exp(-k t**2 / 2)``.
    ``k = 0`` returns +inf for every draw (no exogenous burst, ever).
    """
    if k < 0:
        raise ValueError("intensity slope k must be non-negative")
    if k == 0.0:
        return np.full(n, np.inf)
    rng = np.random.default_rng(seed)
    e = rng.standard_exponential(n)
    return np.sqrt(2.0 * e / k)


def sample_bundle(s: Scenario, seed: int, antithetic: bool = False) -> PathBundle:
    """Draw a complete :class:`PathBundle` for the scenario's numerics sizes.

    With ``antithetic`` the second half of the paths mirrors the first
    (negated noise, reflected inventory, complementary burst uniforms);
    ``n_paths`` must then be even.
    """
    num = s.numerics
    n_paths, n_steps = num.n_paths, num.n_steps
    dt = s.model.T / n_steps
    ss = np.random.SeedSequence(seed)
    iota_ss, dw_ss, tau_ss, dw0_ss = ss.spawn(4)

    half = n_paths
    if antithetic:
        if n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        half = n_paths // 2

    rng_w = np.random.default_rng(dw_ss)
    dW = rng_w.standard_normal((half, n_steps)) * np.sqrt(dt)
    rng_w0 = np.random.default_rng(dw0_ss)
    dW0 = rng_w0.standard_normal((half, n_steps)) * np.sqrt(dt)

    init = s.init
    rng_i = np.random.default_rng(iota_ss)
    if init.std == 0.0:
        iota = np.full(half, init.mean)
    elif init.truncate_at_zero:
        lo = (0.0 - init.mean) / init.std
        iota = truncnorm.rvs(lo, np.inf, loc=init.mean, scale=init.std, size=half, random_state=rng_i)
    else:
        iota = init.mean + init.std * rng_i.standard_normal(half)

    k = s.burst.k
    if k == 0.0:
        tau = np.full(half, np.inf)
        u = None
    else:
        rng_t = np.random.default_rng(tau_ss)
        u = rng_t.random(half)
        tau = np.sqrt(-2.0 * np.log1p(-u) / k)

    if antithetic:
        dW = np.vstack([dW, -dW])
        dW0 = np.vstack([dW0, -dW0])
        iota = np.concatenate([iota, 2.0 * init.mean - iota])
        if u is None:
            tau = np.concatenate([tau, tau])
        else:
            tau = np.concatenate([tau, np.sqrt(-2.0 * np.log(np.maximum(u, 1e-300)) / k)])

    return PathBundle(
        n_paths=n_paths, n_steps=n_steps, dt=dt,
        dW=dW, dW0=dW0, iota=iota, tau_exo=tau, seed=seed,
    )


# ---------------------------------------------------------------------------
# Binary bundle cache: versioned header + row-major float64 blocks
# ---------------------------------------------------------------------------

def save_bundle(bundle: PathBundle, path) -> None:
    """Write the bundle to a cache file (magic, version, sizes, then the
    iota/tau/dW/dW0 blocks as row-major float64)."""
    header = _CACHE_MAGIC + struct.pack(
        "<IQQdq", _CACHE_VERSION, bundle.n_paths, bundle.n_steps, bundle.dt, bundle.seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (bundle.iota, bundle.tau_exo, bundle.dW, bundle.dW0):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_bundle(path) -> PathBundle:
    data = Path(path).read_bytes()
    if data[:8] != _CACHE_MAGIC:
        raise ValueError("not a bundle cache file")
    version, n_paths, n_steps, dt, seed = struct.unpack_from("<IQQdq", data, 8)
    if version != _CACHE_VERSION:
        raise ValueError(f"unsupported bundle cache version {version}")
    off = 8 + struct.calcsize("<IQQdq")
    flat = np.frombuffer(data, dtype="<f8", offset=off)
    iota = flat[:n_paths].copy()
    tau = flat[n_paths : 2 * n_paths].copy()
    m = n_paths * n_steps
    dW = flat[2 * n_paths : 2 * n_paths + m].reshape(n_paths, n_steps).copy()
    dW0 = flat[2 * n_paths + m : 2 * n_paths + 2 * m].reshape(n_paths, n_steps).copy()
    return PathBundle(
        n_paths=int(n_paths), n_steps=int(n_steps), dt=dt,
        dW=dW, dW0=dW0, iota=iota, tau_exo=tau, seed=int(seed),
    )
