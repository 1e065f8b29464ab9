"""Young-function machinery: φ families, Φ, Φ*, indices and Luxemburg norms.

All evaluators are vectorized over numpy arrays. Scalar inputs return
floats.
"""

import logging
import math
import threading
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicHermiteSpline

from app.config import Config

logger = logging.getLogger(__name__)

DEFAULT_TOL = Config.YOUNG["tol"]

# Points far outside any sampling window, in log-coordinates t = e^x,
# where the log-log slope of φ has settled to its limit.
_TAIL_X = 1.0e6
_TAIL_DX = 1.0e-2

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(8)


class QuadratureFailure(Exception):
    pass


class Family(str, Enum):
    POWER = "power"
    LOG_POWER = "log_power"
    POWER_OVER_LOG = "power_over_log"


def _as_output(values, like):
    if np.ndim(like) == 0:
        return float(values)
    return values


def _log_softplus(z):
    """log(log(1 + e^z)) without overflow or underflow."""
    z = np.asarray(z, dtype=float)
    small = z < -30.0
    out = np.empty_like(z)
    zs = z[small]
    out[small] = zs + np.log1p(-0.5 * np.exp(zs))
    out[~small] = np.log(np.logaddexp(0.0, z[~small]))
    return out


@dataclass(frozen=True)
class PhiSpec:
    """Generating function φ of one of the three supported families.

    power:           φ(t) = p |t|^(p-2) t,            p > 1
    log_power:       φ(t) = log(1+|t|^s) |t|^(p-2) t, p > 1, s >= 1
    power_over_log:  φ(t) = |t|^(p-2) t / log(1+|t|), p > 2
    """

    family: Family
    p_exp: float
    s_exp: Optional[float] = None

    def __post_init__(self):
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        p = float(self.p_exp)
        object.__setattr__(self, "p_exp", p)
        if not math.isfinite(p):
            raise ValueError(f"p_exp must be finite, got {self.p_exp}")
        if family is Family.LOG_POWER:
            if self.s_exp is None:
                raise ValueError("log_power family requires s_exp")
            s = float(self.s_exp)
            if not (math.isfinite(s) and s >= 1.0):
                raise ValueError(f"log_power requires s_exp >= 1, got {self.s_exp}")
            object.__setattr__(self, "s_exp", s)
            if p <= 1.0:
                raise ValueError(f"log_power requires p_exp > 1, got {p}")
        elif family is Family.POWER:
            if p <= 1.0:
                raise ValueError(f"power requires p_exp > 1, got {p}")
            object.__setattr__(self, "s_exp", None)
        else:
            if p <= 2.0:
                raise ValueError(f"power_over_log requires p_exp > 2, got {p}")
            object.__setattr__(self, "s_exp", None)

    # ── Serialization ────────────────────────────────────────────

    @classmethod
    def from_config(cls, data: dict) -> "PhiSpec":
        s = data.get("s")
        return cls(
            family=Family(data["family"]),
            p_exp=float(data["p"]),
            s_exp=None if s in (None, "") else float(s),
        )

    def to_config(self) -> dict:
        data = {"family": self.family.value, "p": self.p_exp}
        if self.s_exp is not None:
            data["s"] = self.s_exp
        return data

    def label(self) -> str:
        if self.family is Family.LOG_POWER:
            return f"{self.family.value}(p={self.p_exp:g},s={self.s_exp:g})"
        return f"{self.family.value}(p={self.p_exp:g})"

    # ── Evaluation ───────────────────────────────────────────────

    def phi(self, t):
        """φ(t), odd in t."""
        t_arr = np.asarray(t, dtype=float)
        r = np.abs(t_arr)
        p = self.p_exp
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family is Family.POWER:
                mag = p * r ** (p - 1.0)
            elif self.family is Family.LOG_POWER:
                mag = np.log1p(r**self.s_exp) * r ** (p - 1.0)
            else:
                mag = np.where(r > 0.0, r ** (p - 1.0) / np.log1p(r), 0.0)
        return _as_output(np.sign(t_arr) * mag, t)

    def a(self, t):
        """a(t) = φ(t)/t for t >= 0, continued at 0 by its limit."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0.0):
            raise ValueError("a(t) is defined for t >= 0")
        p = self.p_exp
        positive = t_arr > 0.0
        safe = np.where(positive, t_arr, 1.0)
        with np.errstate(over="ignore"):
            if self.family is Family.POWER:
                val = p * safe ** (p - 2.0)
            elif self.family is Family.LOG_POWER:
                val = np.log1p(safe**self.s_exp) * safe ** (p - 2.0)
            else:
                val = safe ** (p - 3.0) * (safe / np.log1p(safe))
        return _as_output(np.where(positive, val, self.a_at_zero()), t)

    def dphi(self, t):
        """φ'(t) for t > 0."""
        r = np.asarray(t, dtype=float)
        p = self.p_exp
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.family is Family.POWER:
                val = p * (p - 1.0) * r ** (p - 2.0)
            elif self.family is Family.LOG_POWER:
                s = self.s_exp
                val = r ** (p - 2.0) * (s / (1.0 + r ** (-s)) + (p - 1.0) * np.log1p(r**s))
            else:
                log_r = np.log1p(r)
                val = r ** (p - 2.0) / log_r * ((p - 1.0) - r / ((1.0 + r) * log_r))
        return _as_output(val, t)

    def a_at_zero(self) -> float:
        p = self.p_exp
        if self.family is Family.POWER:
            if p > 2.0:
                return 0.0
            return 2.0 if p == 2.0 else math.inf
        if self.family is Family.LOG_POWER:
            return 0.0
        if p > 3.0:
            return 0.0
        return 1.0 if p == 3.0 else math.inf

    def log_phi(self, x):
        """log φ(e^x), stable for |x| far beyond the float range of t."""
        x = np.asarray(x, dtype=float)
        p = self.p_exp
        if self.family is Family.POWER:
            return math.log(p) + (p - 1.0) * x
        if self.family is Family.LOG_POWER:
            return _log_softplus(self.s_exp * x) + (p - 1.0) * x
        return (p - 1.0) * x - _log_softplus(x)

    def tail_ratios(self) -> Tuple[float, float]:
        """Limits of tφ(t)/Φ(t) as t -> 0+ and t -> inf.

        For regularly varying φ the ratio tends to one plus the index of
        regular variation, which is the limiting log-log slope of φ.
        """
        if self.family is Family.POWER:
            return self.p_exp, self.p_exp

        def slope(x0):
            hi, lo = self.log_phi(x0 + _TAIL_DX), self.log_phi(x0 - _TAIL_DX)
            return float((hi - lo) / (2.0 * _TAIL_DX))

        return 1.0 + slope(-_TAIL_X), 1.0 + slope(_TAIL_X)


class StrategyKind(str, Enum):
    CLOSED_FORM = "closed_form"
    ADAPTIVE_QUADRATURE = "adaptive_quadrature"


@dataclass(frozen=True)
class BigPhiStrategy:
    kind: StrategyKind
    tol: float = Config.YOUNG["quad_tol"]

    @classmethod
    def closed_form(cls):
        return cls(StrategyKind.CLOSED_FORM)

    @classmethod
    def adaptive(cls, tol=None):
        return cls(StrategyKind.ADAPTIVE_QUADRATURE, tol or Config.YOUNG["quad_tol"])


@dataclass
class YoungPair:
    """Φ and its complementary function Φ* for a given φ.

    The Φ table and the index estimates are computed once and then only
    read, so a pair can be shared between threads.
    """

    phi: PhiSpec
    big_phi_strategy: BigPhiStrategy = None
    _indices: Optional[Tuple[float, float]] = field(default=None, init=False, repr=False)
    _table: Optional[dict] = field(default=None, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        if self.big_phi_strategy is None:
            if self.phi.family is Family.POWER:
                self.big_phi_strategy = BigPhiStrategy.closed_form()
            else:
                self.big_phi_strategy = BigPhiStrategy.adaptive()
        if (
            self.big_phi_strategy.kind is StrategyKind.CLOSED_FORM
            and self.phi.family is not Family.POWER
        ):
            raise ValueError(f"no closed form for Φ of {self.phi.label()}")

    @classmethod
    def from_config(cls, data: dict) -> "YoungPair":
        return cls(PhiSpec.from_config(data))

    @property
    def closed_form(self) -> bool:
        return self.big_phi_strategy.kind is StrategyKind.CLOSED_FORM

    # ── Φ ───────────────────────────────────────────────────────

    def big_phi(self, t):
        """Φ(|t|), vectorized. Non-closed-form families use the memoized table."""
        t_arr = np.abs(np.asarray(t, dtype=float))
        if self.closed_form:
            return _as_output(t_arr**self.phi.p_exp, t)
        return _as_output(self._table_eval(t_arr), t)

    def _table_eval(self, t):
        table = self._ensure_table()
        lo, hi = table["lo"], table["hi"]
        out = np.zeros_like(t)
        mid = (t >= lo) & (t <= hi)
        out[mid] = table["spline"](t[mid])
        low = (t > 0.0) & (t < lo)
        out[low] = table["phi_lo"] * (t[low] / lo) ** table["kappa_lo"]
        high = t > hi
        with np.errstate(over="ignore"):
            out[high] = table["phi_hi"] * (t[high] / hi) ** table["kappa_hi"]
        return out

    def _ensure_table(self) -> dict:
        if self._table is not None:
            return self._table
        with self._lock:
            if self._table is None:
                self._table = self._build_table()
        return self._table

    def _build_table(self) -> dict:
        cfg = Config.YOUNG
        lo, hi, n = cfg["table_lo"], cfg["table_hi"], cfg["table_nodes"]
        logger.debug(f"Building Φ table for {self.phi.label()} on [{lo:g}, {hi:g}] ({n} nodes)")
        nodes = _log_chebyshev_nodes(lo, hi, n)
        left, right = nodes[:-1], nodes[1:]
        half = 0.5 * (right - left)
        centre = 0.5 * (right + left)
        pts = centre[:, None] + half[:, None] * _GAUSS_X[None, :]
        increments = half * (self.phi.phi(pts) @ _GAUSS_W)
        start = _quad(self.phi.phi, 0.0, lo, 1e-10, relative_only=True)
        values = start + np.concatenate(([0.0], np.cumsum(increments)))
        slopes = self.phi.phi(nodes)
        return {
            "lo": lo,
            "hi": hi,
            "spline": CubicHermiteSpline(nodes, values, slopes),
            "phi_lo": values[0],
            "phi_hi": values[-1],
            "kappa_lo": lo * slopes[0] / values[0],
            "kappa_hi": hi * slopes[-1] / values[-1],
        }

    # ── Φ* ──────────────────────────────────────────────────────

    def big_phi_star(self, t):
        """Φ*(|t|) through the Legendre identity Φ*(t) = tτ - Φ(τ), τ = φ⁻¹(t)."""
        t_arr = np.abs(np.asarray(t, dtype=float))
        if self.closed_form:
            p = self.phi.p_exp
            val = (p - 1.0) * (t_arr / p) ** (p / (p - 1.0))
        else:
            tau = phi_inverse(self.phi, t_arr)
            val = t_arr * tau - self.big_phi(tau)
        return _as_output(val, t)

    # ── Indices ─────────────────────────────────────────────────

    @property
    def indices(self) -> Tuple[float, float]:
        if self._indices is None:
            estimate_indices(self)
        return self._indices

    def _store_indices(self, indices):
        with self._lock:
            if self._indices is None:
                self._indices = indices


def _log_chebyshev_nodes(lo: float, hi: float, n: int):
    """Chebyshev-Lobatto points in log t, ascending, with both endpoints exact."""
    a, b = math.log(lo), math.log(hi)
    x = 0.5 * (a + b) - 0.5 * (b - a) * np.cos(np.pi * np.arange(n) / (n - 1))
    nodes = np.exp(x)
    nodes[0], nodes[-1] = lo, hi
    return nodes


def _quad(func, a, b, tol, limit=None, relative_only=False):
    """scipy quad with failures raised as QuadratureFailure."""
    if b <= a:
        return 0.0
    limit = limit or Config.YOUNG["quad_limit"]
    epsabs = 0.0 if relative_only else tol
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, err = integrate.quad(func, a, b, epsabs=epsabs, epsrel=tol, limit=limit)
        except integrate.IntegrationWarning as e:
            raise QuadratureFailure(f"quadrature on [{a:g}, {b:g}] failed: {e}") from e
    if err > max(epsabs, tol * abs(value)) * 10.0:
        raise QuadratureFailure(
            f"quadrature on [{a:g}, {b:g}] reached error {err:.3e} > {tol:.1e}"
        )
    return value


# ── Scalar operations ───────────────────────────────────────────


def phi_eval(spec: PhiSpec, t):
    return spec.phi(t)


def a_eval(spec: PhiSpec, t):
    return spec.a(t)


def big_phi_eval(pair: YoungPair, t: float) -> float:
    """Φ(t) by closed form or adaptive quadrature of φ."""
    if t < 0:
        raise ValueError("Φ is evaluated at t >= 0")
    if pair.closed_form:
        return float(t**pair.phi.p_exp)
    return _quad(pair.phi.phi, 0.0, float(t), pair.big_phi_strategy.tol)


def phi_inverse(spec: PhiSpec, y, max_expand: int = 1100, max_bisect: int = 64):
    """Solve φ(t) = y by geometric bracketing and log-space bisection."""
    y_arr = np.asarray(y, dtype=float)
    target = np.abs(y_arr)
    p = spec.p_exp
    if spec.family is Family.POWER:
        out = (target / p) ** (1.0 / (p - 1.0))
        return _as_output(np.sign(y_arr) * out, y)

    flat = target.ravel()
    out = np.zeros_like(flat)
    idx = np.nonzero(flat > 0.0)[0]
    goal = flat[idx]
    lo = np.ones_like(goal)
    hi = np.ones_like(goal)
    for _ in range(max_expand):
        grow = spec.phi(hi) < goal
        if not grow.any():
            break
        hi[grow] *= 2.0
        lo[grow] = hi[grow] / 2.0
    for _ in range(max_expand):
        shrink = spec.phi(lo) > goal
        if not shrink.any():
            break
        lo[shrink] /= 2.0
        hi[shrink] = lo[shrink] * 2.0
    for _ in range(max_bisect):
        if np.all(hi <= lo * (1.0 + 1e-15)):
            break
        mid = np.sqrt(lo * hi)
        below = spec.phi(mid) < goal
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out[idx] = np.sqrt(lo * hi)
    return _as_output(np.sign(y_arr) * out.reshape(target.shape), y)


def big_phi_star_eval(pair: YoungPair, t: float, method: str = "quadrature") -> float:
    """Φ*(t) = ∫₀ᵗ φ⁻¹(s) ds.

    method: "quadrature" integrates φ⁻¹, "legendre" uses tφ⁻¹(t) - Φ(φ⁻¹(t)),
    "sup" maximizes st - Φ(s) over s >= 0.
    """
    if t < 0:
        raise ValueError("Φ* is evaluated at t >= 0")
    t = float(t)
    if t == 0.0:
        return 0.0
    if pair.closed_form and method != "sup":
        return pair.big_phi_star(t)
    if method == "legendre":
        return pair.big_phi_star(t)
    if method == "quadrature":
        return _quad(lambda s: phi_inverse(pair.phi, s), 0.0, t, pair.big_phi_strategy.tol)
    if method == "sup":
        upper = 1.0
        while pair.big_phi(upper) < upper * t:
            upper *= 2.0
        res = optimize.minimize_scalar(
            lambda s: pair.big_phi(s) - s * t,
            bounds=(0.0, upper),
            method="bounded",
            options={"xatol": 1e-12 * upper},
        )
        return float(-res.fun)
    raise ValueError(f"unknown Φ* method {method!r}")


def young_gap(pair: YoungPair, s, t):
    """Φ(s) + Φ*(t) - st, nonnegative by Young's inequality."""
    s_arr = np.asarray(s, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(s_arr < 0) or np.any(t_arr < 0):
        raise ValueError("young_gap takes s, t >= 0")
    gap = np.asarray(pair.big_phi(s_arr) + pair.big_phi_star(t_arr) - s_arr * t_arr)
    return float(gap) if gap.ndim == 0 else gap


def index_ratio(pair: YoungPair, t):
    """tφ(t)/Φ(t) for t > 0."""
    t_arr = np.asarray(t, dtype=float)
    return _as_output(t_arr * pair.phi.phi(t_arr) / pair.big_phi(t_arr), t)


def estimate_indices(
    pair: YoungPair,
    t_min: float = None,
    t_max: float = None,
    n_samples: int = None,
    include_tails: bool = True,
) -> Tuple[float, float]:
    """Estimate φ₀ = inf tφ/Φ and φ⁰ = sup tφ/Φ.

    Samples a log-spaced grid, refines the grid extremes by bounded
    golden-section search in log t and, with include_tails, folds in the
    limits of the ratio at 0+ and infinity. The first result is cached
    on the pair.
    """
    cfg = Config.YOUNG
    t_min = t_min or cfg["index_t_min"]
    t_max = t_max or cfg["index_t_max"]
    n_samples = n_samples or cfg["index_samples"]
    if not (0.0 < t_min < t_max):
        raise ValueError(f"need 0 < t_min < t_max, got {t_min}, {t_max}")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")

    log_grid = np.linspace(math.log(t_min), math.log(t_max), n_samples)
    ratios = index_ratio(pair, np.exp(log_grid))

    def refine(k, sign):
        lo_x = log_grid[max(k - 1, 0)]
        hi_x = log_grid[min(k + 1, n_samples - 1)]
        res = optimize.minimize_scalar(
            lambda x: sign * index_ratio(pair, math.exp(x)),
            bounds=(lo_x, hi_x),
            method="bounded",
            options={"xatol": 1e-10},
        )
        return sign * float(res.fun)

    k_min, k_max = int(np.argmin(ratios)), int(np.argmax(ratios))
    low = min(float(ratios[k_min]), refine(k_min, 1.0))
    high = max(float(ratios[k_max]), refine(k_max, -1.0))
    if include_tails:
        tails = pair.phi.tail_ratios()
        low = min(low, *tails)
        high = max(high, *tails)
    if not (1.0 < low <= high < math.inf):
        raise ValueError(f"index estimates out of range: ({low}, {high})")
    logger.debug(f"Indices of {pair.phi.label()}: φ₀≈{low:.6f}, φ⁰≈{high:.6f}")
    pair._store_indices((low, high))
    return low, high


def delta2_ratio(pair: YoungPair, t_grid) -> float:
    """max over the grid of Φ(2t)/Φ(t)."""
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise ValueError("delta2_ratio needs a grid of positive t")
    return float(np.max(pair.big_phi(2.0 * t) / pair.big_phi(t)))


def sqrt_convexity_slack(pair: YoungPair, t_grid) -> float:
    """Smallest normalized second divided difference of t -> Φ(√t)."""
    t = np.asarray(t_grid, dtype=float)
    if t.size < 3 or np.any(np.diff(t) <= 0) or t[0] <= 0:
        raise ValueError("sqrt_convexity_slack needs a sorted positive grid of >= 3 points")
    f = pair.big_phi(np.sqrt(t))
    slopes = np.diff(f) / np.diff(t)
    scale = 1.0 + np.abs(slopes[1:]) + np.abs(slopes[:-1])
    return float(np.min(np.diff(slopes) / scale))


def sqrt_convexity_check(pair: YoungPair, t_grid, tol: float = DEFAULT_TOL) -> bool:
    return sqrt_convexity_slack(pair, t_grid) >= -tol


def convexity_gap(pair: YoungPair, u_val, v_val):
    """½Φ(|x|) + ½Φ(|y|) - Φ(|x+y|/2) - Φ(|x-y|/2)."""
    x = np.asarray(u_val, dtype=float)
    y = np.asarray(v_val, dtype=float)
    gap = (
        0.5 * pair.big_phi(x)
        + 0.5 * pair.big_phi(y)
        - pair.big_phi(0.5 * (x + y))
        - pair.big_phi(0.5 * (x - y))
    )
    return float(gap) if np.ndim(gap) == 0 else gap


def modular_sum(pair: YoungPair, values, weights) -> float:
    """Σ wᵢ Φ(|vᵢ|)."""
    return float(np.dot(weights, pair.big_phi(values)))


def luxemburg_norm(pair: YoungPair, values, weights, rtol: float = None) -> float:
    """inf{k > 0 : Σ wᵢ Φ(|vᵢ|/k) <= 1} over weighted samples."""
    v = np.abs(np.asarray(values, dtype=float)).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if v.shape != w.shape:
        raise ValueError("values and weights must have the same length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if not np.any(v > 0):
        return 0.0
    if pair.closed_form:
        p = pair.phi.p_exp
        return float(np.dot(w, v**p) ** (1.0 / p))

    rtol = rtol or Config.YOUNG["luxemburg_rtol"]

    def excess(k):
        return modular_sum(pair, v / k, w) - 1.0

    k_hi = k_lo = float(v.max())
    while excess(k_hi) > 0.0:
        k_hi *= 2.0
    while excess(k_lo) < 0.0:
        k_lo /= 2.0
    if k_lo == k_hi:
        return k_lo
    return float(optimize.brentq(excess, k_lo, k_hi, xtol=1e-300, rtol=rtol))


def index_condition_report(pair: YoungPair, p: float, q: float, nominal_n: int) -> dict:
    """Condition 1 < q < p < φ₀ and φ⁰ < min{N, Nφ₀/(N-φ₀)} for a nominal N."""
    phi0, phi0_hi = pair.indices
    n = float(nominal_n)
    critical = n * phi0 / (n - phi0) if n > phi0 else math.inf
    bound = min(n, critical)
    return {
        "phi0": phi0,
        "phi0_hi": phi0_hi,
        "exponents_ok": bool(1.0 < q < p < phi0),
        "nominal_n": nominal_n,
        "growth_bound": bound,
        "growth_ok": bool(phi0_hi < bound),
    }
