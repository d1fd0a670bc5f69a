"""Canonical score distributions with exact tail-quantile geometry.

Each distribution exposes sampling, survival, density, hazard, and the
tail-quantile curve ``q(y) = S^{-1}(e^{-y})`` together with its first two
derivatives. The derivatives come from the survival identity
``S(q(y)) = e^{-y}``:

    q'(y)  = e^{-y} / f(q(y))
    q''(y) = -q'(y) - (f'/f)(q(y)) * q'(y)^2

so every family with a closed-form log-density slope gets exact q', q''.
The curvature also satisfies ``q''(y) = -h'(q)/h(q)^3`` with ``h = f/S``
the hazard rate; the test suite asserts the two routes agree.

A two-component mixture (common bulk plus rare high-score component)
models the hidden-mode regime: the rare component is missed by small fit
samples but present at deployment scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

__all__ = [
    "TailDistribution",
    "Exponential",
    "ShiftedExponential",
    "Gamma",
    "Pareto",
    "Lognormal",
    "Gaussian",
    "Uniform",
    "Beta",
    "Mixture",
    "QuantileCurvePoint",
    "parse_distribution",
]


@dataclass(frozen=True)
class QuantileCurvePoint:
    """Tail-quantile curve evaluated at one log-survival depth."""

    y: float
    q: float
    q1: float
    q2: float


class TailDistribution:
    """Base class; subclasses implement the survival-side primitives."""

    #: True when q, q', q'' are closed-form (no numeric inversion).
    analytic = True

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return self._sample(n, rng)

    def _sample(self, n, rng):
        # default: inverse-survival sampling
        return self.isf(rng.uniform(size=n))

    def survival(self, tau) -> np.ndarray | float:
        raise NotImplementedError

    def pdf(self, tau) -> np.ndarray | float:
        raise NotImplementedError

    def logpdf_slope(self, tau):
        """d/dtau log f(tau), used for the exact q'' formula."""
        raise NotImplementedError

    def isf(self, p):
        """Inverse survival: the score tau with S(tau) = p."""
        raise NotImplementedError

    def quantile_curve(self, y: float) -> QuantileCurvePoint:
        """q, q', q'' at log-survival depth ``y > 0``."""
        if y <= 0:
            raise ValueError("depth y must be positive")
        p = math.exp(-y)
        q = float(self.isf(p))
        f = float(self.pdf(q))
        if f <= 0.0 or not math.isfinite(f):
            raise ValueError(
                f"depth y={y} is beyond the resolvable support of {self!r}"
            )
        q1 = p / f
        q2 = -q1 - float(self.logpdf_slope(q)) * q1 * q1
        return QuantileCurvePoint(y=y, q=q, q1=q1, q2=q2)

    def hazard(self, tau):
        """Return (H, h, h') at tau: cumulative hazard, hazard, derivative."""
        s = self.survival(tau)
        if np.any(np.asarray(s) <= 0.0):
            raise ValueError("hazard undefined where survival is zero")
        f = self.pdf(tau)
        h = f / s
        # h' = (f' S + f^2)/S^2 with f' = f * dlogf
        h1 = (self.logpdf_slope(tau) * f * s + f * f) / (s * s)
        H = -np.log(s)
        return H, h, h1

    # -- fast exact order-statistic sampling ------------------------------

    def sample_max(self, n: int, rng: np.random.Generator, size: int = 1):
        """Draw the maximum of ``n`` i.i.d. scores, ``size`` times.

        Uses the exact representation max = S^{-1}(V) with V ~ Beta(1, n)
        (the minimum of n uniforms), so cost is O(size) not O(n*size).
        """
        v = rng.beta(1.0, n, size=size)
        return self.isf(v)

    def sample_topk(self, m: int, k: int, rng: np.random.Generator, size: int = 1):
        """Draw the descending top-``k`` order statistics of ``m`` draws.

        Exact via the Renyi representation: the top-k survival values of m
        uniforms are (G_1/G_{m+1}, ..., G_k/G_{m+1}) with G_j unit-exponential
        partial sums. Shape (size, k), descending along axis 1.
        """
        if k > m:
            raise ValueError("k must be <= m")
        e = rng.exponential(size=(size, k))
        g = np.cumsum(e, axis=1)
        gm1 = g[:, -1] + rng.gamma(m + 1 - k, size=size)
        return self.isf(g / gm1[:, None])


def _validate_positive(**params):
    for name, value in params.items():
        if not (value > 0):
            raise ValueError(f"{name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class Exponential(TailDistribution):
    rate: float = 1.0

    def __post_init__(self):
        _validate_positive(rate=self.rate)

    def _sample(self, n, rng):
        return rng.exponential(1.0 / self.rate, size=n)

    def survival(self, tau):
        return np.where(np.asarray(tau) <= 0, 1.0, np.exp(-self.rate * np.maximum(tau, 0.0)))

    def pdf(self, tau):
        return np.where(np.asarray(tau) < 0, 0.0, self.rate * np.exp(-self.rate * np.maximum(tau, 0.0)))

    def logpdf_slope(self, tau):
        return np.full_like(np.asarray(tau, dtype=float), -self.rate)

    def isf(self, p):
        return -np.log(p) / self.rate


@dataclass(frozen=True)
class ShiftedExponential(TailDistribution):
    """Exp(rate) translated by ``shift``; the rare mixture component."""

    rate: float = 1.0
    shift: float = 4.0

    def __post_init__(self):
        _validate_positive(rate=self.rate)

    def _sample(self, n, rng):
        return self.shift + rng.exponential(1.0 / self.rate, size=n)

    def survival(self, tau):
        z = np.maximum(np.asarray(tau, dtype=float) - self.shift, 0.0)
        return np.exp(-self.rate * z)

    def pdf(self, tau):
        t = np.asarray(tau, dtype=float)
        return np.where(t < self.shift, 0.0, self.rate * np.exp(-self.rate * np.maximum(t - self.shift, 0.0)))

    def logpdf_slope(self, tau):
        return np.full_like(np.asarray(tau, dtype=float), -self.rate)

    def isf(self, p):
        return self.shift - np.log(p) / self.rate


@dataclass(frozen=True)
class Gamma(TailDistribution):
    shape: float = 2.0
    rate: float = 1.0

    def __post_init__(self):
        _validate_positive(shape=self.shape, rate=self.rate)

    def _frozen(self):
        return stats.gamma(self.shape, scale=1.0 / self.rate)

    def _sample(self, n, rng):
        return rng.gamma(self.shape, 1.0 / self.rate, size=n)

    def survival(self, tau):
        return self._frozen().sf(tau)

    def pdf(self, tau):
        return self._frozen().pdf(tau)

    def logpdf_slope(self, tau):
        return (self.shape - 1.0) / np.asarray(tau, dtype=float) - self.rate

    def isf(self, p):
        return self._frozen().isf(p)


@dataclass(frozen=True)
class Pareto(TailDistribution):
    alpha: float = 3.0
    xmin: float = 1.0

    def __post_init__(self):
        _validate_positive(alpha=self.alpha, xmin=self.xmin)

    def _sample(self, n, rng):
        return self.xmin * np.exp(rng.exponential(1.0 / self.alpha, size=n))

    def survival(self, tau):
        t = np.asarray(tau, dtype=float)
        return np.where(t <= self.xmin, 1.0, (np.maximum(t, self.xmin) / self.xmin) ** (-self.alpha))

    def pdf(self, tau):
        t = np.asarray(tau, dtype=float)
        return np.where(t < self.xmin, 0.0, self.alpha * self.xmin**self.alpha / np.maximum(t, self.xmin) ** (self.alpha + 1.0))

    def logpdf_slope(self, tau):
        return -(self.alpha + 1.0) / np.asarray(tau, dtype=float)

    def isf(self, p):
        return self.xmin * np.asarray(p, dtype=float) ** (-1.0 / self.alpha)


@dataclass(frozen=True)
class Lognormal(TailDistribution):
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        _validate_positive(sigma=self.sigma)

    def _sample(self, n, rng):
        return np.exp(self.mu + self.sigma * rng.standard_normal(n))

    def survival(self, tau):
        t = np.asarray(tau, dtype=float)
        z = (np.log(np.maximum(t, 1e-300)) - self.mu) / self.sigma
        return np.where(t <= 0, 1.0, special.ndtr(-z))

    def pdf(self, tau):
        t = np.asarray(tau, dtype=float)
        z = (np.log(np.maximum(t, 1e-300)) - self.mu) / self.sigma
        return np.where(t <= 0, 0.0, np.exp(-0.5 * z * z) / (np.maximum(t, 1e-300) * self.sigma * math.sqrt(2 * math.pi)))

    def logpdf_slope(self, tau):
        t = np.asarray(tau, dtype=float)
        return -(np.log(t) - self.mu) / (self.sigma**2 * t) - 1.0 / t

    def isf(self, p):
        return np.exp(self.mu - self.sigma * special.ndtri(np.asarray(p, dtype=float)))


@dataclass(frozen=True)
class Gaussian(TailDistribution):
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        _validate_positive(sigma=self.sigma)

    def _sample(self, n, rng):
        return self.mu + self.sigma * rng.standard_normal(n)

    def survival(self, tau):
        return special.ndtr(-(np.asarray(tau, dtype=float) - self.mu) / self.sigma)

    def pdf(self, tau):
        z = (np.asarray(tau, dtype=float) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def logpdf_slope(self, tau):
        return -(np.asarray(tau, dtype=float) - self.mu) / self.sigma**2

    def isf(self, p):
        return self.mu - self.sigma * special.ndtri(np.asarray(p, dtype=float))


@dataclass(frozen=True)
class Uniform(TailDistribution):
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (self.hi > self.lo):
            raise ValueError("need hi > lo")

    def _sample(self, n, rng):
        return rng.uniform(self.lo, self.hi, size=n)

    def survival(self, tau):
        t = np.asarray(tau, dtype=float)
        return np.clip((self.hi - t) / (self.hi - self.lo), 0.0, 1.0)

    def pdf(self, tau):
        t = np.asarray(tau, dtype=float)
        inside = (t >= self.lo) & (t <= self.hi)
        return np.where(inside, 1.0 / (self.hi - self.lo), 0.0)

    def logpdf_slope(self, tau):
        return np.zeros_like(np.asarray(tau, dtype=float))

    def isf(self, p):
        return self.hi - (self.hi - self.lo) * np.asarray(p, dtype=float)

    def quantile_curve(self, y):
        if y <= 0:
            raise ValueError("depth y must be positive")
        p = math.exp(-y)
        width = self.hi - self.lo
        if p * width < np.finfo(float).eps * width * 0.5 or p == 0.0:
            raise ValueError("depth beyond the resolvable endpoint of the support")
        return QuantileCurvePoint(y=y, q=self.hi - width * p, q1=width * p, q2=-width * p)


@dataclass(frozen=True)
class Beta(TailDistribution):
    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        _validate_positive(a=self.a, b=self.b)

    def _sample(self, n, rng):
        return rng.beta(self.a, self.b, size=n)

    def survival(self, tau):
        return stats.beta(self.a, self.b).sf(tau)

    def pdf(self, tau):
        return stats.beta(self.a, self.b).pdf(tau)

    def logpdf_slope(self, tau):
        t = np.asarray(tau, dtype=float)
        return (self.a - 1.0) / t - (self.b - 1.0) / (1.0 - t)

    def isf(self, p):
        return stats.beta(self.a, self.b).isf(p)


@dataclass(frozen=True)
class Mixture(TailDistribution):
    """(1 - eps) * bulk + eps * rare; components must not themselves be mixtures."""

    bulk: TailDistribution = field(default_factory=Exponential)
    rare: TailDistribution = field(default_factory=ShiftedExponential)
    eps: float = 1e-3

    analytic = False  # q(y) needs numeric inversion of the mixed survival

    def __post_init__(self):
        if not (0.0 <= self.eps < 1.0):
            raise ValueError("eps must lie in [0, 1)")
        if isinstance(self.bulk, Mixture) or isinstance(self.rare, Mixture):
            raise ValueError("mixture components must be non-mixture (depth 1)")

    def _sample(self, n, rng):
        rare_mask = rng.uniform(size=n) < self.eps
        out = np.asarray(self.bulk.sample(n, rng), dtype=float)
        n_rare = int(rare_mask.sum())
        if n_rare:
            out[rare_mask] = self.rare.sample(n_rare, rng)
        return out

    def survival(self, tau):
        return (1.0 - self.eps) * self.bulk.survival(tau) + self.eps * self.rare.survival(tau)

    def pdf(self, tau):
        return (1.0 - self.eps) * self.bulk.pdf(tau) + self.eps * self.rare.pdf(tau)

    def logpdf_slope(self, tau):
        fb = (1.0 - self.eps) * self.bulk.pdf(tau)
        fr = self.eps * self.rare.pdf(tau)
        slope_b = np.where(fb > 0, self.bulk.logpdf_slope(tau), 0.0)
        slope_r = np.where(fr > 0, self.rare.logpdf_slope(tau), 0.0)
        return (fb * slope_b + fr * slope_r) / (fb + fr)

    def isf(self, p):
        p_arr = np.atleast_1d(np.asarray(p, dtype=float))
        out = np.empty_like(p_arr)
        for i, pi in enumerate(p_arr.ravel()):
            out.ravel()[i] = self._isf_scalar(float(pi))
        return out if np.ndim(p) else float(out[0])

    def _isf_scalar(self, p: float) -> float:
        lo = min(float(self.bulk.isf(p)), float(self.rare.isf(min(1.0 - 1e-15, p / max(self.eps, 1e-300)))) if self.eps > 0 else float(self.bulk.isf(p)))
        hi = max(float(self.bulk.isf(p)), float(self.rare.isf(p)) if self.eps > 0 else float(self.bulk.isf(p)))
        if hi <= lo:
            hi = lo + 1.0
        # expand until bracketed, then bisect on the monotone survival
        f = lambda t: self.survival(t) - p
        flo, fhi = f(lo), f(hi)
        w = hi - lo
        while fhi > 0:
            hi += w
            w *= 2
            fhi = f(hi)
        while flo < 0:
            lo -= w
            w *= 2
            flo = f(lo)
        return float(optimize.brentq(f, lo, hi, xtol=1e-13, rtol=8.9e-16))

    def sample_max(self, n, rng, size=1):
        # composition: the rare count is Binomial(n, eps); maxima combine
        L = rng.binomial(n, self.eps, size=size)
        out = np.full(size, -np.inf)
        has_bulk = L < n
        if np.any(has_bulk):
            # vectorized via per-element beta draws
            nb = n - L
            v = rng.beta(1.0, np.maximum(nb, 1))
            out = np.where(has_bulk, np.asarray(self.bulk.isf(v), dtype=float), out)
        has_rare = L > 0
        if np.any(has_rare):
            v = rng.beta(1.0, np.maximum(L, 1))
            rare_max = np.asarray(self.rare.isf(v), dtype=float)
            out = np.where(has_rare, np.maximum(out, rare_max), out)
        return out

    def sample_topk(self, m, k, rng, size=1):
        # no closed-form joint top-k across components: sample fully, chunked
        if k > m:
            raise ValueError("k must be <= m")
        out = np.empty((size, k))
        chunk = max(1, int(2e7) // m)
        for lo in range(0, size, chunk):
            n = min(chunk, size - lo)
            x = self._sample_matrix(n, m, rng)
            part = -np.partition(-x, k - 1, axis=1)[:, :k]
            part.sort(axis=1)
            out[lo : lo + n] = part[:, ::-1]
        return out

    def _sample_matrix(self, rows, cols, rng):
        x = np.asarray(self.bulk.sample(rows * cols, rng), dtype=float)
        rare_mask = rng.uniform(size=rows * cols) < self.eps
        n_rare = int(rare_mask.sum())
        if n_rare:
            x[rare_mask] = self.rare.sample(n_rare, rng)
        return x.reshape(rows, cols)


# ---------------------------------------------------------------------------
# distribution specification grammar, e.g.
#   exp:rate=1
#   pareto:alpha=3,xmin=1
#   mixture:bulk=exp:rate=1,rare=expshift:rate=1,shift=4,eps=1e-3
# ---------------------------------------------------------------------------

_FAMILIES = {
    "exp": (Exponential, {"rate"}),
    "expshift": (ShiftedExponential, {"rate", "shift"}),
    "gamma": (Gamma, {"shape", "rate"}),
    "pareto": (Pareto, {"alpha", "xmin"}),
    "lognormal": (Lognormal, {"mu", "sigma"}),
    "gaussian": (Gaussian, {"mu", "sigma"}),
    "uniform": (Uniform, {"lo", "hi"}),
    "beta": (Beta, {"a", "b"}),
}


def parse_distribution(spec: str) -> TailDistribution:
    """Parse the CLI/config distribution grammar into a TailDistribution."""
    spec = spec.strip()
    name, _, rest = spec.partition(":")
    name = name.lower()
    if name == "mixture":
        return _parse_mixture(rest)
    if name not in _FAMILIES:
        raise ValueError(f"unknown distribution family {name!r}")
    cls, allowed = _FAMILIES[name]
    kwargs = {}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in allowed:
                raise ValueError(f"unknown parameter {key!r} for family {name!r}")
            kwargs[key] = float(value)
    return cls(**kwargs)


def _parse_mixture(rest: str) -> Mixture:
    # grammar: bulk=<family:params>,rare=<family:params>,eps=<float>
    # component params use '=' inside, so split on the keys, not on commas.
    fields = {}
    for key in ("bulk", "rare", "eps"):
        marker = key + "="
        idx = rest.find(marker)
        if idx < 0:
            raise ValueError(f"mixture spec missing {key!r}")
        fields[key] = idx
    order = sorted(fields, key=fields.get)
    parts = {}
    for i, key in enumerate(order):
        start = fields[key] + len(key) + 1
        end = fields[order[i + 1]] if i + 1 < len(order) else len(rest)
        parts[key] = rest[start:end].rstrip(",")
    bulk = parse_distribution(parts["bulk"])
    rare = parse_distribution(parts["rare"])
    return Mixture(bulk=bulk, rare=rare, eps=float(parts["eps"]))
