"""Model ingredients shared by the particle simulator, the PDE solver and the
verification harness: mutation kernels with heavy tails, the closed registry
of rate functions, weighted point measures and test-function dictionaries.

Traits are one-dimensional reals.  A population state is the finite atomic
measure nu = (1/K) * sum_i delta_{x_i}, stored as (trait, count) atoms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ParetoKernel",
    "TruncatedParetoKernel",
    "CustomKernel",
    "make_kernel",
    "sample_mutation_step",
    "tail_function",
    "sigma_coefficient",
    "UnaryRate",
    "BinaryRate",
    "Bounds",
    "ModelParams",
    "PointMeasure",
    "integrate",
    "convolve_at",
    "TestFunction",
    "constant_one",
    "gaussian_bump",
    "sinusoid",
    "default_dictionary",
    "test_distance",
    "validate_assumptions",
    "ValidationReport",
]


# ---------------------------------------------------------------------------
# Mutation kernels
# ---------------------------------------------------------------------------

# Integer tags used by the compiled simulator core.
KERNEL_PARETO = 0
KERNEL_TRUNCATED_PARETO = 1


class ParetoKernel:
    """Symmetric Pareto mutation variable with density
    (alpha/2) * 1_{|h|>=1} / |h|^(1+alpha).

    The survival function of |X| is exactly min(1, u^-alpha), so the
    heavy-tail coefficient is sigma = alpha/2, independent of the trait.
    """

    kind = KERNEL_PARETO

    def __init__(self, alpha: float):
        if not 0.0 < alpha < 2.0:
            raise ValueError(f"alpha must lie in (0,2), got {alpha}")
        self.alpha = float(alpha)
        self.a = 1.0  # scale of the jump floor; kept for core packing

    def tail(self, x: float, u) -> np.ndarray:
        """P(|X(x)| >= u), exact."""
        u = np.asarray(u, dtype=float)
        return np.where(u <= 1.0, 1.0, np.maximum(u, 1.0) ** (-self.alpha))

    def sigma(self, x) -> np.ndarray:
        return np.broadcast_to(self.alpha / 2.0, np.shape(x)) if np.ndim(x) else self.alpha / 2.0

    def sample(self, x: float, rng: np.random.Generator, size=None):
        """Draw X(x) by inverse CDF: |X| = U^(-1/alpha), fair sign."""
        mag = rng.uniform(size=size) ** (-1.0 / self.alpha)
        sign = np.where(rng.uniform(size=size) < 0.5, -1.0, 1.0)
        return mag * sign


class TruncatedParetoKernel:
    """Mutation law that is uniform on [-a, a] and Pareto outside.

    Density: g(h) = c on |h| <= a and c * (a/|h|)^(1+alpha) beyond, with
    c = alpha / (2 a (alpha+1)) so that g integrates to one.  The induced
    tail coefficient is sigma = alpha * a^alpha / (2 (alpha+1)).
    """

    kind = KERNEL_TRUNCATED_PARETO

    def __init__(self, alpha: float, a: float):
        if not 0.0 < alpha < 2.0:
            raise ValueError(f"alpha must lie in (0,2), got {alpha}")
        if a <= 0:
            raise ValueError(f"truncation radius a must be positive, got {a}")
        self.alpha = float(alpha)
        self.a = float(a)
        self._c = self.alpha / (2.0 * self.a * (self.alpha + 1.0))

    def tail(self, x: float, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        alpha, a, c = self.alpha, self.a, self._c
        inside = 1.0 - 2.0 * c * np.minimum(u, a)
        outside = a**alpha * np.maximum(u, a) ** (-alpha) / (alpha + 1.0)
        return np.where(u <= a, inside, outside)

    def sigma(self, x):
        val = self.alpha * self.a**self.alpha / (2.0 * (self.alpha + 1.0))
        return np.broadcast_to(val, np.shape(x)) if np.ndim(x) else val

    def sample(self, x: float, rng: np.random.Generator, size=None):
        alpha, a = self.alpha, self.a
        pick = rng.uniform(size=size)
        u = rng.uniform(size=size)
        body = (2.0 * u - 1.0) * a
        mag = a * u ** (-1.0 / alpha)
        sign = np.where(rng.uniform(size=size) < 0.5, -1.0, 1.0)
        return np.where(pick < alpha / (alpha + 1.0), body, mag * sign)


class CustomKernel:
    """User-supplied kernel: sampler, tail closure and trait-dependent sigma.

    Only usable by the quadrature/validation layers; the compiled simulator
    core accepts the built-in variants.
    """

    kind = -1

    def __init__(self, alpha: float, sampler: Callable, tail_fn: Callable, sigma_fn: Callable):
        if not 0.0 < alpha < 2.0:
            raise ValueError(f"alpha must lie in (0,2), got {alpha}")
        self.alpha = float(alpha)
        self.a = 1.0
        self._sampler = sampler
        self._tail = tail_fn
        self._sigma = sigma_fn

    def tail(self, x, u):
        return np.asarray(self._tail(x, np.asarray(u, dtype=float)), dtype=float)

    def sigma(self, x):
        return self._sigma(x)

    def sample(self, x, rng, size=None):
        return self._sampler(x, rng, size)


def make_kernel(kind: str, alpha: float, a: Optional[float] = None):
    if kind == "pareto":
        return ParetoKernel(alpha)
    if kind == "truncated_pareto":
        if a is None:
            raise ValueError("truncated_pareto kernel requires the radius 'a'")
        return TruncatedParetoKernel(alpha, a)
    raise ValueError(f"unknown kernel type {kind!r}")


def tail_function(kernel, x: float, u):
    """P(|X(x)| >= u) for the given kernel."""
    return kernel.tail(x, u)


def sigma_coefficient(kernel, x: float):
    """The coefficient sigma(x) = (alpha/2) * lim_u u^alpha P(|X(x)| >= u)."""
    return kernel.sigma(x)


def sample_mutation_step(kernel, x: float, K: int, eta: float, rng: np.random.Generator, size=None):
    """Draw a mutation step h = X(x) / K^(eta/alpha)."""
    return kernel.sample(x, rng, size=size) * K ** (-eta / kernel.alpha)


# ---------------------------------------------------------------------------
# Rate-function registry
# ---------------------------------------------------------------------------

# Unary forms f(x); integer tags shared with the compiled core.
UNARY_CONSTANT = 0
UNARY_GAUSSIAN = 1
UNARY_INDICATOR = 2

# Binary forms f(x, z).
BINARY_CONSTANT = 0
BINARY_GAUSSIAN_X = 1
BINARY_COMPETITION = 2

_UNARY_FORMS = {
    "constant": (UNARY_CONSTANT, ("value",)),
    "gaussian": (UNARY_GAUSSIAN, ("height", "center", "width")),
    "indicator": (UNARY_INDICATOR, ("lo", "hi", "value")),
}

_BINARY_FORMS = {
    "constant": (BINARY_CONSTANT, ("value",)),
    "gaussian_x": (BINARY_GAUSSIAN_X, ("height", "center", "width")),
    "competition": (BINARY_COMPETITION, ("baseline", "slope")),
}


@dataclass(frozen=True)
class UnaryRate:
    """A named analytic trait function from the closed registry."""

    form: str
    params: dict

    def __post_init__(self):
        if self.form not in _UNARY_FORMS:
            raise ValueError(f"unknown unary form {self.form!r}")
        _, names = _UNARY_FORMS[self.form]
        if set(self.params) != set(names):
            raise ValueError(f"form {self.form!r} expects params {names}, got {tuple(self.params)}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.form == "constant":
            return np.broadcast_to(float(p["value"]), x.shape).copy() if x.ndim else float(p["value"])
        if self.form == "gaussian":
            return p["height"] * np.exp(-((x - p["center"]) ** 2) / (2.0 * p["width"] ** 2))
        lo, hi, v = p["lo"], p["hi"], p["value"]
        out = np.where((x >= lo) & (x <= hi), float(v), 0.0)
        return out if x.ndim else float(out)

    @property
    def sup(self) -> float:
        p = self.params
        if self.form == "constant":
            return abs(p["value"])
        if self.form == "gaussian":
            return abs(p["height"])
        return abs(p["value"])

    def packed(self):
        code, names = _UNARY_FORMS[self.form]
        vals = [float(self.params[n]) for n in names]
        return code, np.asarray(vals + [0.0] * (3 - len(vals)), dtype=float)


@dataclass(frozen=True)
class BinaryRate:
    """A named analytic rate f(x, z); z is the local convolution value."""

    form: str
    params: dict

    def __post_init__(self):
        if self.form not in _BINARY_FORMS:
            raise ValueError(f"unknown binary form {self.form!r}")
        _, names = _BINARY_FORMS[self.form]
        if set(self.params) != set(names):
            raise ValueError(f"form {self.form!r} expects params {names}, got {tuple(self.params)}")

    def __call__(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        p = self.params
        if self.form == "constant":
            out = np.broadcast_to(float(p["value"]), np.broadcast_shapes(x.shape, z.shape))
            return out.copy() if out.ndim else float(p["value"])
        if self.form == "gaussian_x":
            return p["height"] * np.exp(-((x - p["center"]) ** 2) / (2.0 * p["width"] ** 2)) + 0.0 * z
        return p["baseline"] + p["slope"] * z

    @property
    def sup(self) -> float:
        # Supremum over x for fixed z=0; competition grows with z and is
        # only admissible for the death rate (checked by validation).
        p = self.params
        if self.form == "constant":
            return abs(p["value"])
        if self.form == "gaussian_x":
            return abs(p["height"])
        return abs(p["baseline"])

    @property
    def linear_bound(self) -> float:
        """Smallest c with |f(x,z)| <= c (1 + |z|) over the registry form."""
        p = self.params
        if self.form == "competition":
            return max(abs(p["baseline"]), abs(p["slope"]))
        return self.sup

    def packed(self):
        code, names = _BINARY_FORMS[self.form]
        vals = [float(self.params[n]) for n in names]
        return code, np.asarray(vals + [0.0] * (3 - len(vals)), dtype=float)


def constant_rate(value: float) -> UnaryRate:
    return UnaryRate("constant", {"value": float(value)})


def constant_binary(value: float) -> BinaryRate:
    return BinaryRate("constant", {"value": float(value)})


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bounds:
    """Declared envelope constants for the rate functions."""

    r_bar: float
    b_bar: float
    d_bar: float
    U_bar: float
    V_bar: float


@dataclass(frozen=True)
class ModelParams:
    """All coefficients of the scaled birth-death-mutation-competition model.

    Per-individual rates are
        birth(x) = K^eta r(x) + b(x, V*nu(x))
        death(x) = K^eta r(x) + d(x, U*nu(x))
    and a birth is a mutant with probability p(x), the mutant step being
    X(x) / K^(eta/alpha).
    """

    r: UnaryRate
    b: BinaryRate
    d: BinaryRate
    p: UnaryRate
    U: UnaryRate
    V: UnaryRate
    kernel: object
    alpha: float
    eta: float
    K: int
    bounds: Optional[Bounds] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0,2), got {self.alpha}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0,1], got {self.eta}")
        if self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if abs(self.kernel.alpha - self.alpha) > 1e-12:
            raise ValueError("kernel alpha does not match model alpha")
        if self.bounds is None:
            object.__setattr__(self, "bounds", self.derived_bounds())

    def derived_bounds(self) -> Bounds:
        return Bounds(
            r_bar=self.r.sup,
            b_bar=self.b.sup,
            d_bar=self.d.linear_bound,
            U_bar=self.U.sup,
            V_bar=self.V.sup,
        )

    def sigma_tilde(self, x):
        """Diffusion coefficient of the limit equation: p(x) r(x) sigma(x)."""
        return self.p(x) * self.r(x) * self.kernel.sigma(x)

    def sigma_hat(self, x):
        """SDE coefficient sigma_tilde(x)^(1/alpha)."""
        return self.sigma_tilde(x) ** (1.0 / self.alpha)


# ---------------------------------------------------------------------------
# Point measures
# ---------------------------------------------------------------------------


class PointMeasure:
    """Finite atomic measure (1/K) * sum_i count_i * delta_{trait_i}.

    Atoms with zero count are never stored; the individual count sum is kept
    exact so that mass * K is always an integer.
    """

    __slots__ = ("traits", "counts", "K")

    def __init__(self, traits, counts, K: int):
        traits = np.asarray(traits, dtype=float)
        counts = np.asarray(counts, dtype=np.int64)
        if traits.shape != counts.shape or traits.ndim != 1:
            raise ValueError("traits and counts must be 1-d arrays of equal length")
        if np.any(counts <= 0):
            raise ValueError("atom counts must be positive")
        if traits.size and not np.all(np.isfinite(traits)):
            raise ValueError("traits must be finite")
        if K < 1:
            raise ValueError("K must be >= 1")
        self.traits = traits
        self.counts = counts
        self.K = int(K)

    @classmethod
    def empty(cls, K: int) -> "PointMeasure":
        return cls(np.empty(0), np.empty(0, dtype=np.int64), K)

    @classmethod
    def from_samples(cls, xs, K: int) -> "PointMeasure":
        """Build a measure from individual positions, merging equal traits."""
        xs = np.asarray(xs, dtype=float)
        if xs.size == 0:
            return cls.empty(K)
        traits, counts = np.unique(xs, return_counts=True)
        return cls(traits, counts.astype(np.int64), K)

    @classmethod
    def dirac(cls, x: float, n: int, K: int) -> "PointMeasure":
        return cls(np.array([float(x)]), np.array([n], dtype=np.int64), K)

    @property
    def n_individuals(self) -> int:
        return int(self.counts.sum())

    @property
    def mass(self) -> float:
        return self.n_individuals / self.K

    def pair(self, f) -> float:
        """<nu, f> = (1/K) sum_i count_i f(x_i)."""
        if self.traits.size == 0:
            return 0.0
        return float(np.dot(self.counts, np.asarray(f(self.traits), dtype=float))) / self.K

    def convolve_at(self, W, x: float) -> float:
        """(W * nu)(x) = (1/K) sum_i count_i W(x - x_i)."""
        if self.traits.size == 0:
            return 0.0
        return float(np.dot(self.counts, np.asarray(W(x - self.traits), dtype=float))) / self.K


def integrate(nu: PointMeasure, f) -> float:
    return nu.pair(f)


def convolve_at(nu: PointMeasure, W, x: float) -> float:
    return nu.convolve_at(W, x)


# ---------------------------------------------------------------------------
# Test functions and dictionaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """A bounded C^2 test function with derivative and far-field structure.

    ``far_value``/``far_radius`` declare that f is identically far_value on
    {|x| >= far_radius}; the quadratures exploit this to integrate the far
    field exactly.  A compactly supported function has far_value 0.
    """

    name: str
    fn: Callable
    dfn: Callable
    sup_norm: float
    far_value: Optional[float] = None
    far_radius: Optional[float] = None

    def __call__(self, x):
        return self.fn(x)

    def derivative(self, x):
        return self.dfn(x)

    @property
    def support_radius(self) -> Optional[float]:
        if self.far_value == 0.0:
            return self.far_radius
        return None


def constant_one() -> TestFunction:
    return TestFunction(
        name="one",
        fn=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        dfn=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        sup_norm=1.0,
        far_value=1.0,
        far_radius=0.0,
    )


def gaussian_bump(center: float = 0.0, width: float = 1.0, height: float = 1.0) -> TestFunction:
    c, w, h = float(center), float(width), float(height)

    def fn(x):
        return h * np.exp(-((np.asarray(x, dtype=float) - c) ** 2) / (2.0 * w * w))

    def dfn(x):
        x = np.asarray(x, dtype=float)
        return -h * (x - c) / (w * w) * np.exp(-((x - c) ** 2) / (2.0 * w * w))

    # Beyond ~9 widths the Gaussian is below double precision noise; declare
    # it flat zero there so far fields are handled exactly.
    return TestFunction(
        name=f"bump({c:g},{w:g})",
        fn=fn,
        dfn=dfn,
        sup_norm=abs(h),
        far_value=0.0,
        far_radius=abs(c) + 9.0 * w,
    )


def sinusoid(k: float, phase: float = 0.0) -> TestFunction:
    k, phase = float(k), float(phase)

    def fn(x):
        return np.sin(k * np.asarray(x, dtype=float) + phase)

    def dfn(x):
        return k * np.cos(k * np.asarray(x, dtype=float) + phase)

    return TestFunction(name=f"sin({k:g}x+{phase:g})", fn=fn, dfn=dfn, sup_norm=1.0)


def default_dictionary() -> list[TestFunction]:
    """Dictionary used for weak-convergence proxies: total mass, local bumps
    at three stations and one slow sinusoid."""
    return [
        constant_one(),
        gaussian_bump(0.0, 1.0),
        gaussian_bump(-2.5, 1.0),
        gaussian_bump(2.5, 1.0),
        sinusoid(0.5),
    ]


def test_distance(mu, nu, dictionary: Sequence[TestFunction]) -> float:
    """max_f |<mu,f> - <nu,f>| / max(1, sup|f|) over the dictionary.

    Both arguments may be PointMeasure or GridFunction (anything exposing
    ``pair``).
    """
    if not dictionary:
        raise ValueError("dictionary must be non-empty")
    worst = 0.0
    for f in dictionary:
        gap = abs(mu.pair(f) - nu.pair(f)) / max(1.0, f.sup_norm)
        worst = max(worst, gap)
    return worst


# ---------------------------------------------------------------------------
# Assumption validation
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)
    tail_residual: float = math.nan

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, witness=None, detail=""):
        self.checks.append(CheckResult(name, bool(passed), witness, detail))

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            line = f"[{'ok' if c.passed else 'FAIL'}] {c.name}"
            if not c.passed and c.witness is not None:
                line += f"  witness={c.witness} {c.detail}"
            lines.append(line)
        return "\n".join(lines)


def _bound_check(report, name, values, bound, probes):
    values = np.asarray(values, dtype=float)
    bad_low = values < 0.0
    bad_high = values > bound + 1e-12
    if bad_low.any() or bad_high.any():
        idx = int(np.argmax(bad_low | bad_high))
        report.add(name, False, witness=(probes[idx], float(values[idx])),
                   detail=f"value {values[idx]:.6g} outside [0, {bound:.6g}]")
    else:
        report.add(name, True)


def validate_assumptions(params: ModelParams, probe_traits, probe_z, u_grid) -> ValidationReport:
    """Probe-based check of the boundedness/linearity envelopes and of the
    heavy-tail coefficient limit.  Reports violations with witnesses and
    never raises.
    """
    probe_traits = np.asarray(probe_traits, dtype=float)
    probe_z = np.asarray(probe_z, dtype=float)
    u_grid = np.asarray(u_grid, dtype=float)
    if probe_traits.size == 0 or probe_z.size == 0 or u_grid.size == 0:
        raise ValueError("probe sets must be non-empty")

    rep = ValidationReport()
    bd = params.bounds

    _bound_check(rep, "r in [0, r_bar]", params.r(probe_traits), bd.r_bar, probe_traits)
    _bound_check(rep, "U in [0, U_bar]", params.U(probe_traits), bd.U_bar, probe_traits)
    _bound_check(rep, "V in [0, V_bar]", params.V(probe_traits), bd.V_bar, probe_traits)
    _bound_check(rep, "p in [0, 1]", params.p(probe_traits), 1.0, probe_traits)

    xg, zg = np.meshgrid(probe_traits, probe_z, indexing="ij")
    bvals = params.b(xg.ravel(), zg.ravel())
    pairs = list(zip(xg.ravel(), zg.ravel()))
    _bound_check(rep, "b in [0, b_bar]", bvals, bd.b_bar, pairs)

    dvals = np.asarray(params.d(xg.ravel(), zg.ravel()), dtype=float)
    dbound = bd.d_bar * (1.0 + np.abs(zg.ravel()))
    bad = (dvals < 0.0) | (dvals > dbound + 1e-12)
    if bad.any():
        idx = int(np.argmax(bad))
        rep.add("d in [0, d_bar(1+|z|)]", False, witness=pairs[idx],
                detail=f"value {dvals[idx]:.6g} exceeds {dbound[idx]:.6g}")
    else:
        rep.add("d in [0, d_bar(1+|z|)]", True)

    # Heavy-tail limit: u^alpha P(|X| >= u) -> 2 sigma / alpha, checked on the
    # largest probe u values, uniformly over the trait probes.
    alpha = params.alpha
    u_top = np.sort(u_grid)[-max(1, u_grid.size // 4):]
    worst = 0.0
    for x in probe_traits:
        target = 2.0 * float(params.kernel.sigma(x)) / alpha
        resid = np.abs(u_top**alpha * params.kernel.tail(float(x), u_top) - target)
        worst = max(worst, float(resid.max()))
    rep.tail_residual = worst
    rep.add("tail coefficient limit", worst < 1e-6,
            detail=f"max residual {worst:.3e} on largest u probes")

    # Tail function sanity: value one at zero, non-increasing on the grid.
    for x in probe_traits[: min(probe_traits.size, 3)]:
        t = params.kernel.tail(float(x), np.sort(u_grid))
        ok = abs(float(params.kernel.tail(float(x), 0.0)) - 1.0) < 1e-12 and np.all(np.diff(t) <= 1e-15)
        rep.add(f"tail monotone at x={x:g}", ok)

    return rep
