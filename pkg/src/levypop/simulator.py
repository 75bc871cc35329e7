"""Exact event-driven simulation of the scaled birth-death-mutation-
competition point process.

Between events every rate is constant, so the classic Gillespie scheme is
exact: the waiting time is exponential in the total rate, the individual and
event type are chosen proportionally, and a birth mutates with probability
p(x), displacing the offspring by X(x) / K^(eta/alpha).

The hot loop is compiled with numba (the per-replica event counts at the
superprocess scaling make an interpreted loop hopeless).  Atoms are stored
as (trait, count) pairs with exact trait equality for clone births; the
interaction convolutions U*nu and V*nu are cached per atom and updated
incrementally in O(atoms) per event, with periodic full rebuilds guarding
against float drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from . import fractional
from .model import ModelParams, PointMeasure, TestFunction

__all__ = [
    "SimState",
    "Event",
    "Trajectory",
    "MartingalePath",
    "EnsembleStats",
    "event_rates",
    "step",
    "run",
    "ensemble_run",
    "martingale_path",
    "Extinction",
]

DEFAULT_EVENT_CEILING = 100_000_000
REBUILD_EVERY = 10_000

_STATUS_OK = 0
_STATUS_CEILING = 1
_STATUS_ATOM_CAP = 2
_STATUS_LOG_CAP = 3
_STATUS_NEGATIVE_RATE = 4

_EV_CLONE = 0
_EV_MUTANT = 1
_EV_DEATH = 2


class Extinction:
    """Absorbing marker returned by step() once the population is empty."""

    def __repr__(self):
        return "Extinction()"


# ---------------------------------------------------------------------------
# Compiled helpers
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _unary(form, p0, p1, p2, x):
    if form == 0:      # constant
        return p0
    if form == 1:      # gaussian
        return p0 * math.exp(-((x - p1) ** 2) / (2.0 * p2 * p2))
    if p1 >= x >= p0:  # indicator [lo, hi]
        return p2
    return 0.0


@njit(cache=True, inline="always")
def _binary(form, p0, p1, p2, x, z):
    if form == 0:      # constant
        return p0
    if form == 1:      # gaussian in x
        return p0 * math.exp(-((x - p1) ** 2) / (2.0 * p2 * p2))
    return p0 + p1 * z  # competition: baseline + slope * z


@njit(cache=True, inline="always")
def _psi(y):
    return y * y * y * (10.0 + y * (-15.0 + 6.0 * y))


@njit(cache=True, inline="always")
def _cutoff(n, x):
    y = abs(x) - (n - 1.0)
    if y <= 0.0:
        return 0.0
    if y >= 1.0:
        return 1.0
    return _psi(y)


@njit(cache=True, inline="always")
def _draw_step(kern_kind, alpha, a, inv_scale):
    """One mutation displacement h = X / K^(eta/alpha)."""
    if kern_kind == 0:  # pareto: |X| = U^(-1/alpha), fair sign
        mag = np.random.random() ** (-1.0 / alpha)
    else:               # truncated pareto: uniform body, pareto tail
        if np.random.random() < alpha / (alpha + 1.0):
            return (2.0 * np.random.random() - 1.0) * a * inv_scale
        mag = a * np.random.random() ** (-1.0 / alpha)
    if np.random.random() < 0.5:
        mag = -mag
    return mag * inv_scale


@njit(cache=True)
def _sim_core(seed, traits0, counts0,
              K, eta, alpha, kern_kind, kern_a,
              r_form, r_par, p_form, p_par, u_form, u_par, v_form, v_par,
              b_form, b_par, d_form, d_par,
              r_bar, b_bar, d_bar, u_bar,
              T, out_times, atom_cap, max_events, rebuild_every,
              fn_levels, record_log, log_cap):
    np.random.seed(seed)
    n0 = traits0.size
    n_out = out_times.size
    n_fn = fn_levels.size

    traits = np.empty(atom_cap)
    counts = np.zeros(atom_cap, dtype=np.int64)
    cu = np.zeros(atom_cap)
    cv = np.zeros(atom_cap)
    birth = np.empty(atom_cap)
    death = np.empty(atom_cap)
    traits[:n0] = traits0
    counts[:n0] = counts0
    A = n0
    I = np.int64(0)
    for i in range(n0):
        I += counts0[i]

    keta = float(K) ** eta
    inv_scale = float(K) ** (-eta / alpha)
    invK = 1.0 / K
    u_const = u_form == 0
    v_const = v_form == 0
    u0 = u_par[0]
    v0 = v_par[0]

    # initial convolution caches
    if not u_const or not v_const:
        for i in range(A):
            su = 0.0
            sv = 0.0
            for j in range(A):
                dxx = traits[i] - traits[j]
                if not u_const:
                    su += counts[j] * _unary(u_form, u_par[0], u_par[1], u_par[2], dxx)
                if not v_const:
                    sv += counts[j] * _unary(v_form, v_par[0], v_par[1], v_par[2], dxx)
            cu[i] = su * invK
            cv[i] = sv * invK

    snap_traits = np.zeros((n_out, atom_cap))
    snap_counts = np.zeros((n_out, atom_cap), dtype=np.int64)
    snap_natoms = np.full(n_out, -1, dtype=np.int64)

    log_times = np.empty(log_cap if record_log else 1)
    log_kinds = np.empty(log_cap if record_log else 1, dtype=np.int8)
    log_parent = np.empty(log_cap if record_log else 1)
    log_child = np.empty(log_cap if record_log else 1)
    n_logged = np.int64(0)

    fn_cur = np.zeros(n_fn)
    fn_sup = np.zeros(n_fn)
    for q in range(n_fn):
        s = 0.0
        for i in range(A):
            s += counts[i] * _cutoff(fn_levels[q], traits[i])
        fn_cur[q] = s * invK
        fn_sup[q] = fn_cur[q]

    t = 0.0
    oi = 0
    n_events = np.int64(0)
    int_mass = 0.0
    sup_mass = I * invK
    extinct_at = -1.0
    max_drift = 0.0
    max_rate_excess = 0.0
    status = _STATUS_OK

    while True:
        if I == 0:
            extinct_at = t
            while oi < n_out:
                snap_natoms[oi] = 0
                oi += 1
            break

        # per-atom rates and total
        total = 0.0
        negative = False
        for i in range(A):
            x = traits[i]
            kr = keta * _unary(r_form, r_par[0], r_par[1], r_par[2], x)
            zu = u0 * I * invK if u_const else cu[i]
            zv = v0 * I * invK if v_const else cv[i]
            bi = kr + _binary(b_form, b_par[0], b_par[1], b_par[2], x, zv)
            di = kr + _binary(d_form, d_par[0], d_par[1], d_par[2], x, zu)
            if bi < 0.0 or di < 0.0:
                negative = True
            birth[i] = bi
            death[i] = di
            total += counts[i] * (bi + di)
        if negative:
            status = _STATUS_NEGATIVE_RATE
            break

        bound = (2.0 * r_bar * keta + b_bar + d_bar) * I + d_bar * u_bar * I * I * invK
        if total > bound * (1.0 + 1e-9) + 1e-12:
            excess = total / max(bound, 1e-300)
            if excess > max_rate_excess:
                max_rate_excess = excess

        if total <= 0.0:
            # frozen configuration: nothing will ever happen again
            int_mass += (T - t) * I * invK
            while oi < n_out:
                snap_natoms[oi] = A
                for i in range(A):
                    snap_traits[oi, i] = traits[i]
                    snap_counts[oi, i] = counts[i]
                oi += 1
            t = T
            break

        dt = np.random.exponential(1.0 / total)
        t_next = t + dt
        # emit snapshots strictly before the event time
        while oi < n_out and out_times[oi] < t_next:
            snap_natoms[oi] = A
            for i in range(A):
                snap_traits[oi, i] = traits[i]
                snap_counts[oi, i] = counts[i]
            oi += 1
        if t_next >= T:
            int_mass += (T - t) * I * invK
            t = T
            break
        int_mass += dt * I * invK
        t = t_next

        if n_events >= max_events:
            status = _STATUS_CEILING
            break
        n_events += 1

        # pick the individual
        u = np.random.random() * total
        acc = 0.0
        sel = A - 1
        for i in range(A):
            acc += counts[i] * (birth[i] + death[i])
            if u <= acc:
                sel = i
                break
        x_sel = traits[sel]
        is_birth = np.random.random() * (birth[sel] + death[sel]) < birth[sel]

        if is_birth:
            p_x = _unary(p_form, p_par[0], p_par[1], p_par[2], x_sel)
            mutant = p_x > 0.0 and np.random.random() < p_x
            if mutant:
                child = x_sel + _draw_step(kern_kind, alpha, kern_a, inv_scale)
                if A >= atom_cap:
                    status = _STATUS_ATOM_CAP
                    break
                # caches for everyone gain the new individual; the new atom
                # gets a fresh convolution over the post-insertion state
                if not u_const or not v_const:
                    su = 0.0
                    sv = 0.0
                    for j in range(A):
                        if not u_const:
                            cu[j] += _unary(u_form, u_par[0], u_par[1], u_par[2], traits[j] - child) * invK
                            su += counts[j] * _unary(u_form, u_par[0], u_par[1], u_par[2], child - traits[j])
                        if not v_const:
                            cv[j] += _unary(v_form, v_par[0], v_par[1], v_par[2], traits[j] - child) * invK
                            sv += counts[j] * _unary(v_form, v_par[0], v_par[1], v_par[2], child - traits[j])
                    cu[A] = (su + _unary(u_form, u_par[0], u_par[1], u_par[2], 0.0)) * invK
                    cv[A] = (sv + _unary(v_form, v_par[0], v_par[1], v_par[2], 0.0)) * invK
                traits[A] = child
                counts[A] = 1
                A += 1
            else:
                child = x_sel
                counts[sel] += 1
                if not u_const or not v_const:
                    for j in range(A):
                        if not u_const:
                            cu[j] += _unary(u_form, u_par[0], u_par[1], u_par[2], traits[j] - child) * invK
                        if not v_const:
                            cv[j] += _unary(v_form, v_par[0], v_par[1], v_par[2], traits[j] - child) * invK
            I += 1
            for q in range(n_fn):
                fn_cur[q] += _cutoff(fn_levels[q], child) * invK
                if fn_cur[q] > fn_sup[q]:
                    fn_sup[q] = fn_cur[q]
            if record_log:
                if n_logged >= log_cap:
                    status = _STATUS_LOG_CAP
                    break
                log_times[n_logged] = t
                log_kinds[n_logged] = _EV_MUTANT if mutant else _EV_CLONE
                log_parent[n_logged] = x_sel
                log_child[n_logged] = child
                n_logged += 1
        else:
            counts[sel] -= 1
            I -= 1
            if not u_const or not v_const:
                for j in range(A):
                    if not u_const:
                        cu[j] -= _unary(u_form, u_par[0], u_par[1], u_par[2], traits[j] - x_sel) * invK
                    if not v_const:
                        cv[j] -= _unary(v_form, v_par[0], v_par[1], v_par[2], traits[j] - x_sel) * invK
            if counts[sel] == 0:
                last = A - 1
                traits[sel] = traits[last]
                counts[sel] = counts[last]
                cu[sel] = cu[last]
                cv[sel] = cv[last]
                A = last
            for q in range(n_fn):
                fn_cur[q] -= _cutoff(fn_levels[q], x_sel) * invK
            if record_log:
                if n_logged >= log_cap:
                    status = _STATUS_LOG_CAP
                    break
                log_times[n_logged] = t
                log_kinds[n_logged] = _EV_DEATH
                log_parent[n_logged] = x_sel
                log_child[n_logged] = np.nan
                n_logged += 1

        mass = I * invK
        if mass > sup_mass:
            sup_mass = mass

        if (not u_const or not v_const) and rebuild_every > 0 and n_events % rebuild_every == 0:
            for i in range(A):
                su = 0.0
                sv = 0.0
                for j in range(A):
                    dxx = traits[i] - traits[j]
                    if not u_const:
                        su += counts[j] * _unary(u_form, u_par[0], u_par[1], u_par[2], dxx)
                    if not v_const:
                        sv += counts[j] * _unary(v_form, v_par[0], v_par[1], v_par[2], dxx)
                su *= invK
                sv *= invK
                if not u_const:
                    drift = abs(cu[i] - su) / max(abs(su), 1e-12)
                    if drift > max_drift:
                        max_drift = drift
                    cu[i] = su
                if not v_const:
                    drift = abs(cv[i] - sv) / max(abs(sv), 1e-12)
                    if drift > max_drift:
                        max_drift = drift
                    cv[i] = sv

    # snapshots that fall at T exactly (loop exits before emitting them)
    while oi < n_out and status == _STATUS_OK:
        snap_natoms[oi] = A
        for i in range(A):
            snap_traits[oi, i] = traits[i]
            snap_counts[oi, i] = counts[i]
        oi += 1

    return (status, t, n_events, extinct_at, A,
            traits[:A].copy(), counts[:A].copy(),
            snap_natoms, snap_traits, snap_counts,
            int_mass, sup_mass, fn_sup,
            max_drift, max_rate_excess,
            log_times[:n_logged], log_kinds[:n_logged],
            log_parent[:n_logged], log_child[:n_logged])


def _pack(params: ModelParams):
    if params.kernel.kind not in (0, 1):
        raise ValueError("the simulator core supports the built-in pareto and "
                         "truncated_pareto kernels only")
    r_form, r_par = params.r.packed()
    p_form, p_par = params.p.packed()
    u_form, u_par = params.U.packed()
    v_form, v_par = params.V.packed()
    b_form, b_par = params.b.packed()
    d_form, d_par = params.d.packed()
    return (params.K, params.eta, params.alpha, params.kernel.kind,
            float(getattr(params.kernel, "a", 1.0)),
            r_form, r_par, p_form, p_par, u_form, u_par, v_form, v_par,
            b_form, b_par, d_form, d_par,
            params.bounds.r_bar, params.bounds.b_bar, params.bounds.d_bar,
            params.bounds.U_bar)


# ---------------------------------------------------------------------------
# Python-facing state and results
# ---------------------------------------------------------------------------


@dataclass
class SimState:
    """Mutable simulation state with per-atom convolution caches."""

    time: float
    traits: np.ndarray
    counts: np.ndarray
    cached_U: np.ndarray
    cached_V: np.ndarray
    event_count: int
    K: int

    @classmethod
    def from_measure(cls, nu: PointMeasure, params: ModelParams) -> "SimState":
        traits = nu.traits.copy()
        counts = nu.counts.copy()
        diff = traits[:, None] - traits[None, :]
        cu = (np.asarray(params.U(diff), dtype=float) @ counts) / nu.K
        cv = (np.asarray(params.V(diff), dtype=float) @ counts) / nu.K
        return cls(0.0, traits, counts, cu, cv, 0, nu.K)

    @property
    def n_individuals(self) -> int:
        return int(self.counts.sum())

    def measure(self) -> PointMeasure:
        if self.traits.size == 0:
            return PointMeasure.empty(self.K)
        return PointMeasure(self.traits.copy(), self.counts.copy(), self.K)


@dataclass(frozen=True)
class Event:
    kind: str  # "clone" | "mutant" | "death"
    parent_trait: float
    offspring_trait: Optional[float]
    time: float


@dataclass
class Trajectory:
    times: np.ndarray
    snapshots: list          # list[PointMeasure]
    seed: int
    params: ModelParams
    event_count: int
    extinction_time: Optional[float]
    final_state: PointMeasure
    int_mass: float          # int_0^T <nu_s, 1> ds, accumulated exactly
    sup_mass: float          # sup_t <nu_t, 1>
    sup_cutoffs: dict        # n -> sup_t <nu_t, f_n>
    max_cache_drift: float
    events: Optional[dict] = None  # times/kinds/parents/children arrays

    def mass_path(self) -> np.ndarray:
        return np.array([m.mass for m in self.snapshots])


def event_rates(state: SimState, params: ModelParams):
    """Per-atom (birth, death) rates at the current state."""
    x = state.traits
    keta_r = params.K**params.eta * np.asarray(params.r(x), dtype=float)
    birth = keta_r + np.asarray(params.b(x, state.cached_V), dtype=float)
    death = keta_r + np.asarray(params.d(x, state.cached_U), dtype=float)
    if np.any(birth < 0) or np.any(death < 0):
        raise ValueError("negative event rate: model misconfiguration")
    return birth, death


def step(state: SimState, params: ModelParams, rng: np.random.Generator):
    """One exact Gillespie event; reference implementation used by the tests
    (production runs go through the compiled core in run())."""
    if state.n_individuals == 0:
        return state, Extinction()
    birth, death = event_rates(state, params)
    weights = state.counts * (birth + death)
    total = float(weights.sum())
    if total <= 0:
        state.time = math.inf
        return state, Extinction()
    dt = rng.exponential(1.0 / total)
    state.time += dt
    sel = int(np.searchsorted(np.cumsum(weights), rng.uniform() * total))
    sel = min(sel, state.traits.size - 1)
    x = float(state.traits[sel])
    if rng.uniform() * (birth[sel] + death[sel]) < birth[sel]:
        p_x = float(params.p(x))
        if p_x > 0 and rng.uniform() < p_x:
            from .model import sample_mutation_step
            child = x + float(sample_mutation_step(params.kernel, x, params.K, params.eta, rng))
            state.traits = np.append(state.traits, child)
            state.counts = np.append(state.counts, np.int64(1))
            state.cached_U = np.append(
                state.cached_U + np.asarray(params.U(state.traits[:-1] - child), dtype=float) / state.K,
                (np.asarray(params.U(child - state.traits), dtype=float) @ state.counts) / state.K)
            state.cached_V = np.append(
                state.cached_V + np.asarray(params.V(state.traits[:-1] - child), dtype=float) / state.K,
                (np.asarray(params.V(child - state.traits), dtype=float) @ state.counts) / state.K)
            ev = Event("mutant", x, child, state.time)
        else:
            state.counts[sel] += 1
            state.cached_U = state.cached_U + np.asarray(params.U(state.traits - x), dtype=float) / state.K
            state.cached_V = state.cached_V + np.asarray(params.V(state.traits - x), dtype=float) / state.K
            ev = Event("clone", x, x, state.time)
    else:
        state.counts[sel] -= 1
        state.cached_U = state.cached_U - np.asarray(params.U(state.traits - x), dtype=float) / state.K
        state.cached_V = state.cached_V - np.asarray(params.V(state.traits - x), dtype=float) / state.K
        if state.counts[sel] == 0:
            keep = np.arange(state.traits.size) != sel
            state.traits = state.traits[keep]
            state.counts = state.counts[keep]
            state.cached_U = state.cached_U[keep]
            state.cached_V = state.cached_V[keep]
        ev = Event("death", x, None, state.time)
    state.event_count += 1
    return state, ev


def _estimate_caps(params: ModelParams, nu0: PointMeasure, T: float):
    b = params.bounds
    keta = params.K**params.eta
    i_scale = max(nu0.n_individuals, 2 * params.K, 1)
    per_ind = 2.0 * b.r_bar * keta + b.b_bar + b.d_bar * (1.0 + b.U_bar * 4.0 * i_scale / params.K)
    events = per_ind * i_scale * T
    p_sup = params.p.sup
    mutants = p_sup * (b.r_bar * keta + b.b_bar) * i_scale * T
    atom_cap = int(nu0.traits.size + 4 * mutants + 4096)
    return atom_cap, events


def run(params: ModelParams, nu0: PointMeasure, T: float, output_times,
        seed: int, record_events: bool = False,
        cutoff_levels: Sequence[int] = (),
        max_events: int = DEFAULT_EVENT_CEILING,
        rebuild_every: int = REBUILD_EVERY) -> Trajectory:
    """Simulate one trajectory; bit-identical for identical (seed, params,
    nu0, output grid)."""
    if T <= 0:
        raise ValueError("T must be positive")
    out_times = np.asarray(sorted(float(t) for t in output_times), dtype=float)
    if out_times.size and (out_times[0] < 0 or out_times[-1] > T + 1e-12):
        raise ValueError("output_times must lie within [0, T]")
    packed = _pack(params)
    atom_cap, est_events = _estimate_caps(params, nu0, T)
    log_cap = int(min(max(2 * est_events + 10_000, 100_000), max_events)) if record_events else 1
    fn_levels = np.asarray(list(cutoff_levels), dtype=np.int64)

    while True:
        res = _sim_core(seed, nu0.traits.astype(float), nu0.counts.astype(np.int64),
                        *packed, float(T), out_times,
                        atom_cap, max_events, rebuild_every,
                        fn_levels, record_events, log_cap)
        status = res[0]
        if status == _STATUS_ATOM_CAP:
            atom_cap *= 4
            continue
        if status == _STATUS_LOG_CAP:
            log_cap = int(min(log_cap * 4, max_events))
            continue
        break

    (status, t_end, n_events, extinct_at, n_atoms, traits, counts,
     snap_natoms, snap_traits, snap_counts, int_mass, sup_mass, fn_sup,
     max_drift, max_rate_excess, log_t, log_k, log_p, log_c) = res

    if status == _STATUS_NEGATIVE_RATE:
        raise ValueError("negative event rate encountered: model misconfiguration")
    if status == _STATUS_CEILING:
        raise RuntimeError(
            f"event ceiling of {max_events} events exceeded at t={t_end:.6g} "
            f"(raise max_events for supercritical parameter sets)")
    if max_rate_excess > 1.0 + 1e-6:
        raise AssertionError(
            f"total event rate exceeded the declared envelope by x{max_rate_excess:.3f}")

    snapshots = []
    for oi in range(out_times.size):
        na = int(snap_natoms[oi])
        if na <= 0:
            snapshots.append(PointMeasure.empty(params.K))
        else:
            snapshots.append(PointMeasure(snap_traits[oi, :na].copy(),
                                          snap_counts[oi, :na].copy(), params.K))
    final = (PointMeasure(traits, counts, params.K) if n_atoms > 0
             else PointMeasure.empty(params.K))
    events = None
    if record_events:
        events = {"times": log_t, "kinds": log_k, "parents": log_p, "children": log_c}
    return Trajectory(
        times=out_times,
        snapshots=snapshots,
        seed=int(seed),
        params=params,
        event_count=int(n_events),
        extinction_time=None if extinct_at < 0 else float(extinct_at),
        final_state=final,
        int_mass=float(int_mass),
        sup_mass=float(sup_mass),
        sup_cutoffs={int(n): float(v) for n, v in zip(fn_levels, fn_sup)},
        max_cache_drift=float(max_drift),
        events=events,
    )


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleStats:
    """Cross-replica statistics of <nu_t, f> for a dictionary of test
    functions, plus the in-run accumulators."""

    times: np.ndarray
    f_names: list
    values: np.ndarray        # (replicas, times, functions)
    int_mass: np.ndarray      # (replicas,)
    sup_mass: np.ndarray
    sup_cutoffs: np.ndarray   # (replicas, levels)
    cutoff_levels: tuple
    extinct: np.ndarray       # bool (replicas,)
    event_counts: np.ndarray
    seeds: np.ndarray

    @property
    def n_replicas(self) -> int:
        return self.values.shape[0]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def variance(self) -> np.ndarray:
        if self.n_replicas < 2:
            return np.zeros_like(self.values[0])
        return self.values.var(axis=0, ddof=1)

    def std_error(self) -> np.ndarray:
        return np.sqrt(self.variance() / self.n_replicas)


def ensemble_run(params: ModelParams, nu0, T: float, output_times,
                 n_replicas: int, base_seed: int,
                 dictionary: Sequence[TestFunction],
                 cutoff_levels: Sequence[int] = (),
                 max_events: int = DEFAULT_EVENT_CEILING,
                 keep_final: bool = False):
    """Independent replicas on derived seeds.

    ``nu0`` is either a PointMeasure (shared initial condition) or a callable
    rng -> PointMeasure drawing a fresh initial condition per replica.
    """
    if n_replicas < 1:
        raise ValueError("n_replicas must be >= 1")
    out_times = np.asarray(sorted(float(t) for t in output_times), dtype=float)
    ss = np.random.SeedSequence(base_seed)
    sim_seeds = ss.generate_state(n_replicas)
    init_ss = ss.spawn(n_replicas)
    levels = tuple(int(n) for n in cutoff_levels)

    values = np.empty((n_replicas, out_times.size, len(dictionary)))
    int_mass = np.empty(n_replicas)
    sup_mass = np.empty(n_replicas)
    sup_fn = np.empty((n_replicas, len(levels)))
    extinct = np.zeros(n_replicas, dtype=bool)
    event_counts = np.empty(n_replicas, dtype=np.int64)
    finals = [] if keep_final else None

    for rep in range(n_replicas):
        if callable(nu0):
            nu_init = nu0(np.random.default_rng(init_ss[rep]))
        else:
            nu_init = nu0
        traj = run(params, nu_init, T, out_times, int(sim_seeds[rep]),
                   cutoff_levels=levels, max_events=max_events)
        for ti, snap in enumerate(traj.snapshots):
            for fi, f in enumerate(dictionary):
                values[rep, ti, fi] = snap.pair(f)
        int_mass[rep] = traj.int_mass
        sup_mass[rep] = traj.sup_mass
        for li, lev in enumerate(levels):
            sup_fn[rep, li] = traj.sup_cutoffs[lev]
        extinct[rep] = traj.extinction_time is not None
        event_counts[rep] = traj.event_count
        if keep_final:
            finals.append(traj.final_state)

    stats = EnsembleStats(times=out_times, f_names=[f.name for f in dictionary],
                          values=values, int_mass=int_mass, sup_mass=sup_mass,
                          sup_cutoffs=sup_fn, cutoff_levels=levels,
                          extinct=extinct, event_counts=event_counts,
                          seeds=sim_seeds)
    return (stats, finals) if keep_final else stats


# ---------------------------------------------------------------------------
# Martingale extraction from the event log
# ---------------------------------------------------------------------------


@dataclass
class MartingalePath:
    times: np.ndarray
    values: np.ndarray    # M^{K,f} at the output times
    bracket: np.ndarray   # predicted <M^{K,f}> at the output times


def _squared(f: TestFunction) -> TestFunction:
    return TestFunction(
        name=f.name + "^2",
        fn=lambda x: np.asarray(f(x), dtype=float) ** 2,
        dfn=lambda x: 2.0 * np.asarray(f(x), dtype=float) * np.asarray(f.derivative(x), dtype=float),
        sup_norm=f.sup_norm**2,
        far_value=None if f.far_value is None else f.far_value**2,
        far_radius=f.far_radius,
    )


def martingale_path(traj: Trajectory, f: TestFunction, params: ModelParams,
                    quad=None) -> MartingalePath:
    """Replay the event log and assemble the finite-K martingale

        M_t = <nu_t,f> - <nu_0,f> - growth compensator - mutation compensator

    together with its predicted bracket.  The mutation-kernel pairings
    int (f(x+h)-f(x)) M_K(x,dh) are evaluated by the exact-tail quadrature
    and cached per atom trait.
    """
    if traj.events is None:
        raise ValueError("trajectory was recorded without an event log")
    quad = quad or fractional.DEFAULT_QUADRATURE
    K, eta, alpha = params.K, params.eta, params.alpha
    keta = float(K) ** eta
    f2 = _squared(f)

    nu0 = traj.snapshots[0] if traj.times.size and traj.times[0] == 0.0 else None
    if nu0 is None:
        raise ValueError("the trajectory must include t=0 among its output times")

    # Replay state: atom arrays with incremental convolution caches, exactly
    # mirroring the core's O(atoms)-per-event bookkeeping.  Dead atoms keep a
    # zero count; trait values identify atoms exactly.
    cap = int(nu0.traits.size + (traj.events["kinds"] == _EV_MUTANT).sum() + 16)
    tr = np.zeros(cap)
    ct = np.zeros(cap)
    zu = np.zeros(cap)
    zv = np.zeros(cap)
    A = nu0.traits.size
    tr[:A] = nu0.traits
    ct[:A] = nu0.counts
    if A:
        diff = tr[:A, None] - tr[None, :A]
        zu[:A] = (np.asarray(params.U(diff), dtype=float) @ ct[:A]) / K
        zv[:A] = (np.asarray(params.V(diff), dtype=float) @ ct[:A]) / K
    index = {float(x): i for i, x in enumerate(tr[:A])}

    kappa_cache: dict = {}

    def kappas(x: float):
        got = kappa_cache.get(x)
        if got is None:
            got = (fractional.kernel_pairing(params.kernel, f, x, K, eta, quad),
                   fractional.kernel_pairing(params.kernel, f2, x, K, eta, quad))
            kappa_cache[x] = got
        return got

    kap = np.zeros(cap)
    kap2 = np.zeros(cap)
    for i in range(A):
        kap[i], kap2[i] = kappas(float(tr[i]))

    def integrands():
        if A == 0:
            return 0.0, 0.0
        x = tr[:A]
        c = ct[:A]
        fx = np.asarray(f(x), dtype=float)
        rr = np.asarray(params.r(x), dtype=float)
        pp = np.asarray(params.p(x), dtype=float)
        bb = np.asarray(params.b(x, zv[:A]), dtype=float)
        dd = np.asarray(params.d(x, zu[:A]), dtype=float)
        drift = float(c @ ((bb - dd) * fx + pp * (keta * rr + bb) * kap[:A])) / K
        qv = float(c @ ((2.0 * keta * rr + bb + dd) * fx**2
                        + pp * (keta * rr + bb) * kap2[:A])) / K / K
        return drift, qv

    ev = traj.events
    ev_times = ev["times"]
    ev_kinds = ev["kinds"]
    ev_parent = ev["parents"]
    ev_child = ev["children"]

    out_times = traj.times
    M = np.zeros(out_times.size)
    B = np.zeros(out_times.size)
    pair0 = nu0.pair(f)
    pair_cur = pair0
    drift_cur, qv_cur = integrands()
    acc_drift = 0.0
    acc_qv = 0.0
    t_cur = 0.0
    oi = 0

    def emit_until(t_stop):
        nonlocal oi
        while oi < out_times.size and out_times[oi] <= t_stop + 1e-15:
            dt_out = out_times[oi] - t_cur
            M[oi] = pair_cur - pair0 - (acc_drift + drift_cur * dt_out)
            B[oi] = acc_qv + qv_cur * dt_out
            oi += 1

    for e in range(ev_times.size):
        te = float(ev_times[e])
        emit_until(te - 1e-15)
        acc_drift += drift_cur * (te - t_cur)
        acc_qv += qv_cur * (te - t_cur)
        t_cur = te
        kind = int(ev_kinds[e])
        if kind == _EV_DEATH:
            x = float(ev_parent[e])
            ct[index[x]] -= 1
            zu[:A] -= np.asarray(params.U(tr[:A] - x), dtype=float) / K
            zv[:A] -= np.asarray(params.V(tr[:A] - x), dtype=float) / K
            pair_cur -= float(f(x)) / K
        else:
            child = float(ev_child[e])
            i = index.get(child)
            if i is None:
                i = A
                index[child] = i
                tr[i] = child
                ct[i] = 0.0
                kap[i], kap2[i] = kappas(child)
                A += 1
                # the new atom sees the population before its own arrival
                zu[i] = float(np.asarray(params.U(child - tr[:A]), dtype=float) @ ct[:A]) / K
                zv[i] = float(np.asarray(params.V(child - tr[:A]), dtype=float) @ ct[:A]) / K
            ct[i] += 1
            zu[:A] += np.asarray(params.U(tr[:A] - child), dtype=float) / K
            zv[:A] += np.asarray(params.V(tr[:A] - child), dtype=float) / K
            pair_cur += float(f(child)) / K
        drift_cur, qv_cur = integrands()
    emit_until(out_times[-1] if out_times.size else 0.0)
    return MartingalePath(times=out_times, values=M, bracket=B)
