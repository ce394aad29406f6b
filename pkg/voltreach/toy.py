"""
Scalar toy environment with an exact dynamic-programming oracle.

    z' = z + (b u - c) dt + sigma sqrt(dt) xi,   xi ~ N(0, 1),   u in [-1, 1]

The unsafe set is z <= 0 (mechanism "Lower"); an optional upper boundary
z >= z_upper adds a second mechanism ("Upper").

The oracle runs the backward recursion on a z grid. Values between nodes are
linearly interpolated and the Gaussian expectation of that interpolant is
computed in closed form segment by segment, so the only discretisation error is
the interpolation itself.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from voltreach.errors import GridCoverageError
from voltreach.models import GridSpec, ToyConfig
from voltreach.reach import ReachEnv

logger = logging.getLogger(__name__)

LOWER, UPPER = 0, 1


class ToyEnv(ReachEnv):
    def __init__(self, config: ToyConfig, horizon: Optional[float] = None, sample_horizon: bool = False,
                 literal: bool = False):
        super().__init__(config.dt, horizon or config.tau_max, config.tau_max,
                         sample_horizon=sample_horizon, literal=literal)
        self.config = config
        self.mechanism_labels = ("Lower",) if config.z_upper is None else ("Lower", "Upper")

    def unsafe(self, z: float) -> Optional[int]:
        if z <= 0.0:
            return LOWER
        if self.config.z_upper is not None and z >= self.config.z_upper:
            return UPPER
        return None

    def drift(self, u: float) -> float:
        return (self.config.b * u - self.config.c) * self.config.dt

    def reference_handle(self) -> Any:
        return 1.0

    def _start(self, rng: np.random.Generator, z0: Optional[float] = None, **kwargs) -> Tuple[float, Optional[int]]:
        if z0 is None:
            z0 = float(rng.uniform(self.config.z0_low, self.config.z0_high))
        return float(z0), self.unsafe(z0)

    def _advance(self, handle: float, action: float, rng: np.random.Generator) -> Tuple[float, Optional[int]]:
        cfg = self.config
        z = handle + self.drift(action) + cfg.sigma * math.sqrt(cfg.dt) * rng.standard_normal()
        return z, self.unsafe(z)

    def _observe(self, handle: float) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self.config.z_range
        return np.array([handle]), np.array([2.0 * (handle - lo) / (hi - lo) - 1.0])

    def obs_at(self, h: float, z: float) -> np.ndarray:
        return np.concatenate([[self.normalise_h(h)], self._observe(z)[1]])

    def log_row(self, s, action, r):
        row = super().log_row(s, action, r)
        row["z"] = float(s.z[0])
        for label, value in zip(self.mechanism_labels, r.mechanisms):
            row[f"r_{label.lower()}"] = value
        return row


@dataclass
class DpTable:
    """
    values[n, i] is v(h, z_i) for h in [n dt, (n + 1) dt), i.e. n transitions
    left before the final reward. Node values on an unsafe boundary hold the
    one-sided limit from the safe side; `value` returns 0 on the unsafe set.
    """
    dt: float
    z: np.ndarray
    u: np.ndarray
    values: np.ndarray
    actions: np.ndarray
    z_upper: Optional[float] = None

    @property
    def horizon_steps(self) -> int:
        return self.values.shape[0] - 1

    def index(self, h: float) -> int:
        if h < 0:
            raise ValueError("h must be non-negative")
        return min(int(math.floor(h / self.dt + 1e-9)), self.horizon_steps)

    def _safe(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        safe = z > 0.0
        if self.z_upper is not None:
            safe &= z < self.z_upper
        return safe

    def value(self, h: float, z):
        z = np.asarray(z, dtype=float)
        v = np.interp(z, self.z, self.values[self.index(h)])
        out = np.where(self._safe(z), v, 0.0)
        return float(out) if out.ndim == 0 else out

    def action(self, h: float, z):
        n = self.index(h)
        a = np.interp(np.asarray(z, dtype=float), self.z, self.actions[max(n, 1)])
        return float(a) if np.ndim(a) == 0 else a

    def to_frame(self) -> pd.DataFrame:
        n_h, n_z = self.values.shape
        return pd.DataFrame({
            "h": np.repeat(np.arange(n_h) * self.dt, n_z),
            "z": np.tile(self.z, n_h),
            "v": self.values.ravel(),
            "u": self.actions.ravel(),
        })


def check_grid(config: ToyConfig, grid: GridSpec) -> np.ndarray:
    """Build the z grid and check that it covers one transition from every safe node."""
    z = np.linspace(grid.z_min, grid.z_max, grid.n_z)
    spacing = z[1] - z[0]
    if not grid.z_min <= 0.0 < grid.z_max:
        raise GridCoverageError(f"grid [{grid.z_min}, {grid.z_max}] must contain the unsafe boundary z = 0")
    if np.min(np.abs(z)) > 1e-9 * max(1.0, spacing):
        raise GridCoverageError("z = 0 must be a grid node")
    if config.z_upper is not None:
        if config.z_upper > grid.z_max:
            raise GridCoverageError(f"z_upper={config.z_upper} lies outside the grid")
        if np.min(np.abs(z - config.z_upper)) > 1e-9 * max(1.0, spacing):
            raise GridCoverageError("z_upper must be a grid node")
    spread = (abs(config.b) + abs(config.c)) * config.dt + 6.0 * config.sigma * math.sqrt(config.dt)
    if config.z_upper is None and grid.z_max - spread <= 0.0:
        raise GridCoverageError(f"grid top {grid.z_max} is within one transition ({spread:.3f}) of the boundary")
    if config.sigma > 0 and spacing > config.sigma * math.sqrt(config.dt):
        raise GridCoverageError(f"grid spacing {spacing:.4f} is coarser than the transition spread")
    return z


def _safe_nodes(z: np.ndarray, config: ToyConfig) -> Tuple[int, int]:
    lo = int(np.argmin(np.abs(z)))
    hi = len(z) - 1 if config.z_upper is None else int(np.argmin(np.abs(z - config.z_upper)))
    return lo, hi


def gaussian_expectation(knots: np.ndarray, vals: np.ndarray, mu: np.ndarray, s: float,
                         tail: float = 0.0, open_top: bool = False) -> np.ndarray:
    """
    E[f(X)] for X ~ N(mu, s^2) and f piecewise linear on `knots` with values
    `vals`, f = 0 at and below the first knot and f = tail above the last
    (`open_top` makes the last knot itself unsafe).
    """
    mu = np.asarray(mu, dtype=float)
    if s == 0.0:
        inside = (mu > knots[0]) & ((mu < knots[-1]) if open_top else (mu <= knots[-1]))
        out = np.where(inside, np.interp(mu, knots, vals), 0.0)
        return np.where(mu > knots[-1], tail, out)
    a = (knots[None, :-1] - mu[:, None]) / s
    b = (knots[None, 1:] - mu[:, None]) / s
    mass = norm.cdf(b) - norm.cdf(a)
    first_moment = mu[:, None] * mass - s * (norm.pdf(b) - norm.pdf(a))
    slope = np.diff(vals) / np.diff(knots)
    intercept = vals[:-1] - slope * knots[:-1]
    expect = (mass * intercept[None, :] + first_moment * slope[None, :]).sum(axis=1)
    if tail:
        expect += tail * norm.sf((knots[-1] - mu) / s)
    return expect


def _backup(config: ToyConfig, z: np.ndarray, lo: int, hi: int, v_prev: np.ndarray, u: float) -> np.ndarray:
    """E[v_prev(z')] for every grid node under action u."""
    knots = z[lo:hi + 1]
    tail = v_prev[hi] if config.z_upper is None else 0.0
    mu = z + (config.b * u - config.c) * config.dt
    return gaussian_expectation(knots, v_prev[lo:hi + 1], mu, config.sigma * math.sqrt(config.dt), tail,
                                open_top=config.z_upper is not None)


def _terminal(z: np.ndarray, lo: int, hi: int) -> np.ndarray:
    v = np.zeros_like(z)
    v[lo:hi + 1] = 1.0
    return v


def _mask(v: np.ndarray, lo: int, hi: int) -> np.ndarray:
    out = np.zeros_like(v)
    out[lo:hi + 1] = v[lo:hi + 1]
    return out


def dp_solve_toy(config: ToyConfig, grid: GridSpec, horizon: Optional[float] = None) -> DpTable:
    """
    Optimal safety probability v*(h, z) = 1_safe(z) max_u E[v*(h - dt, z')],
    v*(h < dt, z) = 1_safe(z).

    Raises:
        GridCoverageError: grid does not contain the boundaries or is too coarse.
    """
    z = check_grid(config, grid)
    lo, hi = _safe_nodes(z, config)
    n_steps = int(math.floor((horizon or config.tau_max) / config.dt + 1e-9))
    u_grid = np.linspace(-1.0, 1.0, grid.n_u) if grid.n_u > 1 else np.array([0.0])

    values = np.empty((n_steps + 1, len(z)))
    actions = np.full((n_steps + 1, len(z)), np.nan)
    values[0] = _terminal(z, lo, hi)
    for n in range(1, n_steps + 1):
        q = np.stack([_backup(config, z, lo, hi, values[n - 1], u) for u in u_grid])
        best = np.argmax(q, axis=0)
        values[n] = _mask(q[best, np.arange(len(z))], lo, hi)
        actions[n] = u_grid[best]
    logger.info(f"DP solved: steps={n_steps}, nodes={len(z)}, actions={len(u_grid)}")
    return DpTable(config.dt, z, u_grid, values, actions, config.z_upper)


def dp_evaluate_policy(config: ToyConfig, grid: GridSpec, policy: Callable[[float, np.ndarray], np.ndarray],
                       horizon: Optional[float] = None) -> DpTable:
    """Safety probability of a fixed policy u = policy(h, z) (same recursion without the max)."""
    z = check_grid(config, grid)
    lo, hi = _safe_nodes(z, config)
    n_steps = int(math.floor((horizon or config.tau_max) / config.dt + 1e-9))
    knots = z[lo:hi + 1]
    s = config.sigma * math.sqrt(config.dt)

    values = np.empty((n_steps + 1, len(z)))
    actions = np.full((n_steps + 1, len(z)), np.nan)
    values[0] = _terminal(z, lo, hi)
    for n in range(1, n_steps + 1):
        u = np.clip(np.broadcast_to(np.asarray(policy(n * config.dt, z), dtype=float), z.shape), -1.0, 1.0)
        mu = z + (config.b * u - config.c) * config.dt
        tail = values[n - 1][hi] if config.z_upper is None else 0.0
        values[n] = _mask(gaussian_expectation(knots, values[n - 1][lo:hi + 1], mu, s, tail,
                                                   open_top=config.z_upper is not None), lo, hi)
        actions[n] = u
    return DpTable(config.dt, z, np.unique(actions[1:]) if n_steps else np.array([]), values, actions, config.z_upper)


def zero_policy(h: float, z: np.ndarray) -> np.ndarray:
    return np.zeros_like(z)
