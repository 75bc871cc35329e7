"""Deterministic solver for the limiting nonlocal reaction-diffusion equation

    d/dt xi(x) = ( b(x, V*xi(x)) - d(x, U*xi(x)) ) xi(x) + D(sigma_tilde xi)(x)

on a truncated uniform grid with zero extension outside, explicit RK4 in
time, and monitored boundary leak (the nonlocal operator transports mass out
of any finite window; that loss is tracked, not hidden).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fractional
from .fractional import QuadratureSpec, DEFAULT_QUADRATURE
from .model import ModelParams, TestFunction

__all__ = ["GridFunction", "PdeRun", "rhs", "solve", "weak_form_residual", "stability_limits"]


class GridFunction:
    """Density carried on a uniform grid over [x_min, x_max]; the function is
    understood as zero outside."""

    __slots__ = ("x_min", "x_max", "values")

    def __init__(self, x_min: float, x_max: float, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 1 or values.size < 3:
            raise ValueError("values must be a 1-d array with >= 3 points")
        if not x_max > x_min:
            raise ValueError("need x_max > x_min")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        if np.any(values < 0):
            raise ValueError("grid values must be nonnegative")
        self.x_min = float(x_min)
        self.x_max = float(x_max)
        self.values = values

    @property
    def n_points(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, dx=self.dx))

    def pair(self, f) -> float:
        """<xi, f> by the trapezoid rule."""
        return float(np.trapezoid(np.asarray(f(self.grid), dtype=float) * self.values, dx=self.dx))

    def copy_with(self, values) -> "GridFunction":
        return GridFunction(self.x_min, self.x_max, values)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points from the normalized density (uniform within each
        trapezoid cell)."""
        cell = 0.5 * (self.values[:-1] + self.values[1:]) * self.dx
        total = cell.sum()
        if total <= 0:
            raise ValueError("cannot sample from a zero density")
        cum = np.cumsum(cell) / total
        u = rng.uniform(size=n)
        idx = np.searchsorted(cum, u, side="right")
        left = self.x_min + idx * self.dx
        return left + rng.uniform(size=n) * self.dx

    @classmethod
    def flat(cls, mass: float, x_min: float, x_max: float, n_points: int) -> "GridFunction":
        vals = np.full(n_points, mass / (x_max - x_min))
        return cls(x_min, x_max, vals)

    @classmethod
    def gaussian(cls, mass: float, center: float, width: float,
                 x_min: float, x_max: float, n_points: int) -> "GridFunction":
        x = np.linspace(x_min, x_max, n_points)
        raw = np.exp(-((x - center) ** 2) / (2.0 * width**2))
        dx = (x_max - x_min) / (n_points - 1)
        raw *= mass / np.trapezoid(raw, dx=dx)
        return cls(x_min, x_max, raw)


class _GridOps:
    """Precomputed grid operators for one (params, grid) pairing."""

    def __init__(self, params: ModelParams, x_min: float, x_max: float, n_points: int):
        self.params = params
        self.x = np.linspace(x_min, x_max, n_points)
        self.dx = (x_max - x_min) / (n_points - 1)
        trap = np.full(n_points, self.dx)
        trap[0] *= 0.5
        trap[-1] *= 0.5
        diff = self.x[:, None] - self.x[None, :]
        self.U_mat = np.asarray(params.U(diff), dtype=float) * trap[None, :]
        self.V_mat = np.asarray(params.V(diff), dtype=float) * trap[None, :]
        self.sigma_tilde = np.asarray(params.sigma_tilde(self.x), dtype=float)
        self.weights = fractional.grid_fraclap_weights(n_points, params.alpha)
        self.trap = trap

    def reaction(self, values: np.ndarray) -> np.ndarray:
        growth = (np.asarray(self.params.b(self.x, self.V_mat @ values), dtype=float)
                  - np.asarray(self.params.d(self.x, self.U_mat @ values), dtype=float))
        return growth * values

    def nonlocal_term(self, values: np.ndarray) -> np.ndarray:
        return fractional.grid_fraclap_apply(self.sigma_tilde * values, self.dx,
                                             self.params.alpha, self.weights)

    def rhs(self, values: np.ndarray):
        nl = self.nonlocal_term(values)
        return self.reaction(values) + nl, float(self.trap @ nl)


@dataclass
class PdeRun:
    params: ModelParams
    x_min: float
    x_max: float
    n_points: int
    times: np.ndarray
    frames: list
    diagnostics: dict = field(default_factory=dict)
    _ops: object = None

    def frame(self, t: float) -> GridFunction:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9:
            raise ValueError(f"time {t} is not among the stored output times")
        return GridFunction(self.x_min, self.x_max, self.frames[idx])

    @property
    def final(self) -> GridFunction:
        return GridFunction(self.x_min, self.x_max, self.frames[-1])


def rhs(xi: GridFunction, params: ModelParams) -> GridFunction:
    """One evaluation of the right-hand side (reaction plus nonlocal term on
    the product sigma_tilde * xi).  The result may be negative; it is a rate,
    not a density, so it is returned as a raw grid array wrapper."""
    ops = _GridOps(params, xi.x_min, xi.x_max, xi.n_points)
    out, _ = ops.rhs(xi.values)
    g = GridFunction.__new__(GridFunction)
    g.x_min, g.x_max, g.values = xi.x_min, xi.x_max, out
    return g


def stability_limits(params: ModelParams, xi0: GridFunction) -> dict:
    """Explicit-scheme step-size heuristics; both constants are reported."""
    lam = fractional.grid_fraclap_diag_coeff(xi0.n_points, xi0.dx, params.alpha)
    smax = float(np.max(params.sigma_tilde(xi0.grid)))
    dt_nonlocal = math.inf if smax * lam == 0 else 0.5 / (smax * lam)
    b = params.bounds
    lip = b.b_bar + b.d_bar * (1.0 + b.U_bar * 4.0 * max(1.0, xi0.mass))
    dt_reaction = math.inf if lip == 0 else 0.1 / lip
    return {
        "dt_nonlocal": dt_nonlocal,
        "dt_reaction": dt_reaction,
        "diag_coeff": lam,
        "sigma_tilde_max": smax,
        "reaction_lipschitz": lip,
    }


def solve(xi0: GridFunction, params: ModelParams, T: float, dt: float | None,
          output_times, blowup_factor: float = 1e6) -> PdeRun:
    """March the density with RK4, clipping the (tiny) negative undershoots
    and logging both the clipped mass and the nonlocal boundary-leak bound.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    output_times = np.asarray(sorted(set(float(t) for t in output_times)), dtype=float)
    if output_times.size == 0 or output_times[0] < 0 or output_times[-1] > T + 1e-12:
        raise ValueError("output_times must lie within [0, T]")
    limits = stability_limits(params, xi0)
    dt_cap = min(limits["dt_nonlocal"], limits["dt_reaction"])
    if dt is None:
        dt = min(0.9 * dt_cap, T / 10.0)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > dt_cap * (1 + 1e-9):
        raise ValueError(
            f"dt={dt:g} violates the stability heuristic: dt_nonlocal="
            f"{limits['dt_nonlocal']:.4g}, dt_reaction={limits['dt_reaction']:.4g}")

    ops = _GridOps(params, xi0.x_min, xi0.x_max, xi0.n_points)
    values = xi0.values.copy()
    mass0 = xi0.mass
    clipped = 0.0
    leak_abs = 0.0

    checkpoints = np.unique(np.concatenate([[0.0], output_times]))
    frames = []
    times = []
    if checkpoints[0] == 0.0:
        frames.append(values.copy())
        times.append(0.0)
        checkpoints = checkpoints[1:]

    t = 0.0
    for target in checkpoints:
        span = target - t
        n_sub = max(1, int(math.ceil(span / dt - 1e-12)))
        h = span / n_sub
        for _ in range(n_sub):
            k1, fl1 = ops.rhs(values)
            k2, fl2 = ops.rhs(values + 0.5 * h * k1)
            k3, fl3 = ops.rhs(values + 0.5 * h * k2)
            k4, fl4 = ops.rhs(values + h * k3)
            values = values + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            leak_abs += (h / 6.0) * (abs(fl1) + 2.0 * abs(fl2) + 2.0 * abs(fl3) + abs(fl4))
            neg = values < 0.0
            if neg.any():
                clipped += float(-np.trapezoid(np.where(neg, values, 0.0), dx=ops.dx))
                values[neg] = 0.0
            t += h
            mass = float(np.trapezoid(values, dx=ops.dx))
            if mass > blowup_factor * max(mass0, 1e-12):
                raise RuntimeError(
                    f"blow-up detected at t={t:.4g}: mass {mass:.3e} exceeds "
                    f"{blowup_factor:g} x initial {mass0:.3e}")
        t = target
        frames.append(values.copy())
        times.append(t)

    diag = dict(limits)
    diag.update({
        "dt_used": dt,
        "clipped_mass": clipped,
        "leak_bound": leak_abs,
        "initial_mass": mass0,
        "final_mass": float(np.trapezoid(values, dx=ops.dx)),
    })
    run = PdeRun(params=params, x_min=xi0.x_min, x_max=xi0.x_max,
                 n_points=xi0.n_points, times=np.asarray(times), frames=frames,
                 diagnostics=diag)
    run._ops = ops
    return run


def weak_form_residual(run: PdeRun, f: TestFunction, t: float,
                       quad: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """|<xi_t, f> - weak-form right side| with the operator moved onto the
    test function and the time integral taken over the stored outputs."""
    times = run.times
    idx = int(np.argmin(np.abs(times - t)))
    if abs(times[idx] - t) > 1e-9:
        raise ValueError(f"time {t} is not among the stored output times")
    ops = run._ops if run._ops is not None else _GridOps(
        run.params, run.x_min, run.x_max, run.n_points)
    x = ops.x
    fx = np.asarray(f(x), dtype=float)
    df = fractional.frac_laplacian_grid(f, x, run.params.alpha, quad)
    integrand = np.empty(idx + 1)
    for j in range(idx + 1):
        vals = run.frames[j]
        growth = (np.asarray(run.params.b(x, ops.V_mat @ vals), dtype=float)
                  - np.asarray(run.params.d(x, ops.U_mat @ vals), dtype=float))
        integrand[j] = float(ops.trap @ ((growth * fx + ops.sigma_tilde * df) * vals))
    lhs = float(ops.trap @ (fx * run.frames[idx]))
    rhs_val = float(ops.trap @ (fx * run.frames[0])) + float(np.trapezoid(integrand, x=times[: idx + 1]))
    return abs(lhs - rhs_val)
