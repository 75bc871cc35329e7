"""Jump SDE driven by the compensated small-jump Levy noise

    dX_t = sigma_hat(X_{t-}) dZ_t,
    Z_t  = int_{(0,t] x (-1,1)} h ( N(ds,dh) - ds dh/|h|^(1+alpha) ),

its Monte-Carlo semigroup P_t f(x) = E f(X^x_t), the truncated generator

    L f(x) = int_{(-1,1)} ( f(x+sigma_hat(x)h) - f(x) - f'(x) sigma_hat(x) h )
             dh/|h|^(1+alpha),

and the mild-formulation residual check against a PDE run.

The driver has infinite activity; jumps with |h| in (eps, 1) are simulated
as a compound Poisson process (the symmetric compensator integrates to an
exactly zero drift, asserted at scheme construction), while jumps below eps
are either dropped or replaced by a Brownian motion matching their variance
2 eps^(2-alpha)/(2-alpha) per unit time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import simpson

from . import fractional
from .fractional import (DEFAULT_QUADRATURE, QuadratureSpec, _as_test_function,
                         _far_plan, _pair_quadrature, _sym_core)
from .model import TestFunction
from .pde import PdeRun, _GridOps

__all__ = [
    "JumpSchemeSpec",
    "SdePath",
    "large_jump_rate",
    "small_jump_var_rate",
    "sample_large_jumps",
    "simulate_path",
    "terminal_values",
    "semigroup_estimate",
    "generator_point",
    "large_jump_integral",
    "mild_residual",
]


def large_jump_rate(alpha: float, eps: float) -> float:
    """Total intensity of driver jumps with |h| in (eps, 1)."""
    return 2.0 * (eps ** (-alpha) - 1.0) / alpha


def small_jump_var_rate(alpha: float, eps: float) -> float:
    """Variance per unit time of the dropped jumps, int_{|h|<eps} h^2 nu(dh)."""
    return 2.0 * eps ** (2.0 - alpha) / (2.0 - alpha)


@dataclass(frozen=True)
class JumpSchemeSpec:
    epsilon_cut: float = 0.1
    small_jump_mode: str = "gaussian_match"  # or "drop"
    dt_max: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.epsilon_cut < 1.0:
            raise ValueError("epsilon_cut must lie in (0,1)")
        if self.small_jump_mode not in ("gaussian_match", "drop"):
            raise ValueError("small_jump_mode must be 'gaussian_match' or 'drop'")
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")

    def assert_zero_compensator(self, alpha: float, tol: float = 1e-12):
        """The compensator drift int_{eps<|h|<1} h dh/|h|^(1+alpha) vanishes
        by symmetry; asserted by quadrature, not assumed."""
        h = np.linspace(self.epsilon_cut, 1.0, 2001)
        one_sided = simpson(h * h ** (-1.0 - alpha), x=h)
        drift = one_sided + simpson(-h * h ** (-1.0 - alpha), x=h)
        if abs(drift) > tol * max(1.0, abs(one_sided)):
            raise AssertionError(f"compensator drift {drift:.3e} is not zero")
        return drift


def sample_large_jumps(alpha: float, eps: float, size, rng: np.random.Generator):
    """Jump sizes with density proportional to |h|^(-1-alpha) on eps<|h|<1,
    by inverse CDF of the magnitude and a fair sign."""
    lo = eps ** (-alpha)
    v = rng.uniform(size=size)
    mag = (lo - v * (lo - 1.0)) ** (-1.0 / alpha)
    sign = np.where(rng.uniform(size=size) < 0.5, -1.0, 1.0)
    return mag * sign


@dataclass
class SdePath:
    times: np.ndarray
    states: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray  # driver jump sizes h (before the sigma_hat factor)


def simulate_path(x0: float, sigma_hat: Callable, alpha: float, T: float,
                  scheme: JumpSchemeSpec, rng: np.random.Generator) -> SdePath:
    """One path with exact large-jump times; sigma_hat is frozen over each
    Gaussian substep (at most dt_max long) and refreshed after every jump."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    scheme.assert_zero_compensator(alpha)
    lam = large_jump_rate(alpha, scheme.epsilon_cut)
    gaussian = scheme.small_jump_mode == "gaussian_match"
    vrate = small_jump_var_rate(alpha, scheme.epsilon_cut)

    t, x = 0.0, float(x0)
    times, states = [0.0], [x]
    jt, js = [], []
    while True:
        tau = rng.exponential(1.0 / lam) if lam > 0 else math.inf
        seg_end = min(t + tau, T)
        if gaussian:
            while t < seg_end - 1e-15:
                dt = min(scheme.dt_max, seg_end - t)
                x += float(sigma_hat(x)) * math.sqrt(vrate * dt) * rng.standard_normal()
                t += dt
                times.append(t)
                states.append(x)
        else:
            t = seg_end
            times.append(t)
            states.append(x)
        if t + 1e-15 >= T or tau == math.inf:
            break
        h = float(sample_large_jumps(alpha, scheme.epsilon_cut, None, rng))
        x += float(sigma_hat(x)) * h
        jt.append(t)
        js.append(h)
        times.append(t)
        states.append(x)
    return SdePath(np.asarray(times), np.asarray(states),
                   np.asarray(jt), np.asarray(js))


def terminal_values(x0, sigma_hat: Callable, alpha: float, T: float,
                    scheme: JumpSchemeSpec, rng: np.random.Generator):
    """Vectorized terminal states for a batch of starting points.

    Time is discretized in steps of at most dt_max; within a step the
    Brownian part uses sigma_hat frozen at the step start and the step's
    Poisson jumps are applied sequentially with sigma_hat refreshed between
    them.  Returns (X_T, large-jump counts); the counts are exactly
    Poisson(large_jump_rate * T).
    """
    x = np.array(x0, dtype=float, copy=True)
    lam = large_jump_rate(alpha, scheme.epsilon_cut)
    gaussian = scheme.small_jump_mode == "gaussian_match"
    vrate = small_jump_var_rate(alpha, scheme.epsilon_cut)
    counts = np.zeros(x.shape, dtype=np.int64)
    if T == 0:
        return x, counts
    n_steps = max(1, int(math.ceil(T / scheme.dt_max))) if gaussian else 1
    dt = T / n_steps
    for _ in range(n_steps):
        if gaussian:
            x += np.asarray(sigma_hat(x), dtype=float) * math.sqrt(vrate * dt) \
                * rng.standard_normal(x.shape)
        k = rng.poisson(lam * dt, x.shape)
        counts += k
        kmax = int(k.max()) if k.size else 0
        for j in range(kmax):
            live = k > j
            h = sample_large_jumps(alpha, scheme.epsilon_cut, int(live.sum()), rng)
            x[live] += np.asarray(sigma_hat(x[live]), dtype=float) * h
    return x, counts


def semigroup_estimate(f, x: float, t: float, sigma_hat: Callable, alpha: float,
                       n_samples: int, scheme: JumpSchemeSpec,
                       rng: np.random.Generator):
    """Monte-Carlo estimate of P_t f(x) = E f(X^x_t) with its standard error."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    if t == 0.0:
        return float(f(x)), 0.0
    x_T, _ = terminal_values(np.full(n_samples, float(x)), sigma_hat, alpha, t,
                             scheme, rng)
    vals = np.asarray(f(x_T), dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def generator_point(f, x: float, sigma_hat_x: float, alpha: float,
                    quad: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """Quadrature of the truncated-jump generator L (driver jumps restricted
    to (-1,1)); the full scaled operator decomposes as

        sigma_tilde D f = L f + int_{|h|>=1} (f(x+sigma_hat(x)h)-f(x)) dh/|h|^(1+alpha).
    """
    s = float(sigma_hat_x)
    if s == 0.0:
        return 0.0
    tf = _as_test_function(f)
    return _sym_core(tf, float(x), s, alpha, quad, upper=1.0)


def large_jump_integral(f, x: float, sigma_hat_x: float, alpha: float,
                        quad: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """int_{|h|>=1} ( f(x + sigma_hat(x) h) - f(x) ) dh/|h|^(1+alpha)."""
    s = float(sigma_hat_x)
    tf = _as_test_function(f)
    fx = float(tf(x))
    if s == 0.0:
        return 0.0
    hi, far_pair, _ = _far_plan(tf, float(x), s, alpha, quad)
    pair = _pair_quadrature(tf, float(x), s, 1.0, hi, alpha, quad)
    return pair + far_pair - 2.0 * fx / alpha


# ---------------------------------------------------------------------------
# Mild formulation residual
# ---------------------------------------------------------------------------


class _WeightedQueries:
    """Linear functional of the lattice values of one P_u estimate: tracks
    interpolation weights so that both the value and its Monte-Carlo variance
    can be evaluated exactly."""

    def __init__(self, lattice: np.ndarray):
        self.lattice = lattice
        self.w = np.zeros(lattice.size)

    def add(self, xs: np.ndarray, weights: np.ndarray):
        xs = np.asarray(xs, dtype=float).ravel()
        weights = np.asarray(weights, dtype=float).ravel()
        lat = self.lattice
        idx = np.clip(np.searchsorted(lat, xs) - 1, 0, lat.size - 2)
        lam = (xs - lat[idx]) / (lat[idx + 1] - lat[idx])
        inside = (xs >= lat[0]) & (xs <= lat[-1])
        lam = np.clip(lam, 0.0, 1.0)
        np.add.at(self.w, idx, weights * (1.0 - lam) * inside)
        np.add.at(self.w, idx + 1, weights * lam * inside)

    def value(self, estimates: np.ndarray) -> float:
        return float(self.w @ estimates)

    def variance(self, std_errors: np.ndarray) -> float:
        return float((self.w**2) @ (std_errors**2))


def mild_residual(run: PdeRun, f: TestFunction, t: float,
                  scheme: JumpSchemeSpec, n_samples: int, base_seed: int,
                  h_cut: float = 30.0, h_step: float = 0.25,
                  lattice_step: float | None = None,
                  quad: QuadratureSpec = DEFAULT_QUADRATURE):
    """|LHS - RHS| of the mild formulation

        <xi_t, f> = <xi_0, P_t f>
                  + int_0^t int [ (b - d)(x, conv) P_{t-s} f(x)
                       + int_{|h|>=1} ( P_{t-s} f(x + sigma_hat(x) h)
                                        - P_{t-s} f(x) ) dh/|h|^(1+alpha) ]
                    xi_s(dx) ds,

    with P_u f estimated by Monte Carlo on a lattice and every appearance of
    its values tracked as a linear functional, so the returned bracket
    3*sqrt(sum w^2 SE^2) is the exact propagated Monte-Carlo band.

    Returns (residual, mc_bracket, notes).
    """
    params = run.params
    alpha = params.alpha
    times = run.times
    idx_t = int(np.argmin(np.abs(times - t)))
    if abs(times[idx_t] - t) > 1e-9:
        raise ValueError(f"t={t} is not among the PDE output times")
    s_times = times[: idx_t + 1]
    if s_times.size < 3:
        raise ValueError("the PDE run must store at least 3 outputs up to t")

    ops = run._ops if run._ops is not None else _GridOps(
        params, run.x_min, run.x_max, run.n_points)
    grid = ops.x
    sig_hat = np.asarray(params.sigma_hat(grid), dtype=float)
    s_max = float(sig_hat.max())

    # The lattice is aligned with the PDE grid so that the grid-point queries
    # (the xi_0 and reaction terms) hit lattice nodes exactly; only the
    # jump-shifted queries interpolate.
    if lattice_step is None:
        lattice_step = ops.dx
    n_align = int(math.ceil(lattice_step / ops.dx))
    lattice_step = n_align * ops.dx
    pad_cells = int(math.ceil((s_max * h_cut + 1.0) / lattice_step))
    lattice = run.x_min + lattice_step * np.arange(-pad_cells,
                                                   int(round((run.x_max - run.x_min) / lattice_step)) + pad_cells + 1)

    # trapezoid weights over the s nodes
    w_s = np.zeros(s_times.size)
    w_s[1:] += 0.5 * np.diff(s_times)
    w_s[:-1] += 0.5 * np.diff(s_times)

    # h nodes for the large-jump integral (driver units, both signs explicit)
    n_h = int(math.ceil((h_cut - 1.0) / h_step)) + 1
    if n_h % 2 == 0:
        n_h += 1
    h_nodes = np.linspace(1.0, h_cut, n_h)
    h_w = np.zeros(n_h)
    # composite Simpson weights
    step = h_nodes[1] - h_nodes[0]
    h_w[0] = h_w[-1] = step / 3.0
    h_w[1:-1:2] = 4.0 * step / 3.0
    h_w[2:-1:2] = 2.0 * step / 3.0
    h_kern = h_nodes ** (-1.0 - alpha)

    # one query bundle per distinct u = t - s, plus u = t for the xi_0 term
    u_vals = [float(t - s) for s in s_times]
    queries = {u: _WeightedQueries(lattice) for u in set(u_vals) | {float(t)}}

    # <xi_0, P_t f>
    queries[float(t)].add(grid, ops.trap * run.frames[0])

    masses = []
    for si, s in enumerate(s_times):
        u = u_vals[si]
        vals = run.frames[si]
        masses.append(float(np.trapezoid(vals, dx=ops.dx)))
        growth = (np.asarray(params.b(grid, ops.V_mat @ vals), dtype=float)
                  - np.asarray(params.d(grid, ops.U_mat @ vals), dtype=float))
        base_w = w_s[si] * ops.trap * vals
        q = queries[u]
        # (b-d) P_u f(x)
        q.add(grid, base_w * growth)
        # large-jump part: pair quadrature minus the analytic DC 2 P_u f(x)/alpha;
        # where sigma_hat vanishes the integrand is identically zero
        moving = sig_hat > 0.0
        if moving.any():
            gm = grid[moving]
            sm = sig_hat[moving]
            bm = base_w[moving]
            for hj, wj, kj in zip(h_nodes, h_w, h_kern):
                q.add(gm + sm * hj, bm * wj * kj)
                q.add(gm - sm * hj, bm * wj * kj)
            q.add(gm, -2.0 * bm / alpha)

    # Monte-Carlo estimates of P_u f on the lattice
    children = np.random.SeedSequence(base_seed).spawn(len(queries))
    rhs = 0.0
    var = 0.0
    for i, (u, q) in enumerate(sorted(queries.items())):
        if not np.any(q.w):
            continue
        if u == 0.0:
            est = np.asarray(f(lattice), dtype=float)
            se = np.zeros_like(est)
        else:
            rng = np.random.default_rng(children[i])
            starts = np.repeat(lattice, n_samples)
            x_T, _ = terminal_values(starts, params.sigma_hat, alpha, u, scheme, rng)
            vals = np.asarray(f(x_T), dtype=float).reshape(lattice.size, n_samples)
            est = vals.mean(axis=1)
            se = vals.std(axis=1, ddof=1) / math.sqrt(n_samples)
        rhs += q.value(est)
        var += q.variance(se)

    lhs = float(ops.trap @ (np.asarray(f(grid), dtype=float) * run.frames[idx_t]))
    residual = abs(lhs - rhs)
    mc_bracket = 3.0 * math.sqrt(var)
    # discretization allowances: dropped far field of the pair integral and
    # the s-trapezoid, reported for the caller's budget
    far_drop = 2.0 * f.sup_norm * h_cut ** (-alpha) / alpha * float(np.dot(w_s, masses))
    notes = {
        "lhs": lhs,
        "rhs": rhs,
        "far_drop_bound": far_drop,
        "lattice_points": int(lattice.size),
        "s_nodes": int(s_times.size),
        "mc_paths": int(lattice.size * n_samples * (len(queries) - 1)),
    }
    return residual, mc_bracket, notes
