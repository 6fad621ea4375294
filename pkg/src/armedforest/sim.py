"""Simulators for models whose response hides behind pairwise independence.

Three families are covered:

* Bernstein triples: three fair coins ``B1, B2, B3`` give indicators
  ``X0 = 1{B1=B2}``, ``X1 = 1{B1=B3}``, ``X2 = 1{B2=B3}`` that are pairwise
  independent while ``X0 = delta(X1, X2)``.
* The two-branch linear model on ``d = 10`` columns, where ``(X1, X2)`` pick
  the branch through ``delta(X1, X2)`` and ``X3..X10`` are correlated
  Gaussians.
* Pairwise-independent densities ``f0 f1 f2 (1 - phi)`` sampled by
  rejection, with ``X0`` re-coupled to the blocks through the inverse of its
  conditional CDF.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate, optimize, stats
from scipy.interpolate import CubicHermiteSpline

from .dataset import Dataset
from .errors import NumericError, RejectedParametersError, SamplerStallError

__all__ = [
    "BernsteinTriple", "Model8Params", "PairwiseDensitySpec", "ProductPerturbation",
    "Dataset", "bernstein_from_coins", "sample_bernstein", "sample_bernstein_array",
    "sample_gaussian_block", "model8_response", "simulate_model8",
    "sample_pairwise_density", "sample_pairwise_batch", "conditional_cdf",
    "conditional_cdf_inverse", "simulate_model3",
]


# --------------------------------------------------------------------------
# Bernstein triples


class BernsteinTriple(NamedTuple):
    x0: int
    x1: int
    x2: int


def bernstein_from_coins(b1: int, b2: int, b3: int) -> BernsteinTriple:
    return BernsteinTriple(int(b1 == b2), int(b1 == b3), int(b2 == b3))


def sample_bernstein(rng: np.random.Generator) -> BernsteinTriple:
    b1, b2, b3 = rng.integers(0, 2, size=3)
    return bernstein_from_coins(b1, b2, b3)


def sample_bernstein_array(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 3) integer array of triples ``(x0, x1, x2)``."""
    b = rng.integers(0, 2, size=(n, 3))
    return np.column_stack([b[:, 0] == b[:, 1], b[:, 0] == b[:, 2], b[:, 1] == b[:, 2]]).astype(np.int64)


# --------------------------------------------------------------------------
# Two-branch linear model


def _default_alpha() -> np.ndarray:
    return np.arange(1, 9) / 8.0


def _default_sigma() -> np.ndarray:
    j = np.arange(8)
    return 2.0 ** -np.abs(j[:, None] - j[None, :])


@dataclass
class Model8Params:
    """Parameters of ``Y = d (alpha.X' + eps) + (1 - d)(beta.X' + zeta) + eta``.

    ``d = delta(X1, X2)`` and ``X' = (X3, ..., X10) ~ N(mu, sigma)``.
    ``noise_sd`` holds the standard deviations of ``eps, zeta, eta``.
    """

    alpha: np.ndarray = field(default_factory=_default_alpha)
    beta: np.ndarray = field(default_factory=lambda: 0.75 * _default_alpha())
    sigma: np.ndarray = field(default_factory=_default_sigma)
    mu: np.ndarray | None = None
    noise_sd: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.mu = np.diag(self.sigma).copy() if self.mu is None else np.asarray(self.mu, dtype=np.float64)
        k = self.alpha.shape[0]
        if self.beta.shape != (k,) or self.mu.shape != (k,) or self.sigma.shape != (k, k):
            raise RejectedParametersError("alpha, beta, mu and sigma dimensions disagree")
        if not np.allclose(self.sigma, self.sigma.T):
            raise RejectedParametersError("sigma must be symmetric")
        if len(self.noise_sd) != 3 or min(self.noise_sd) < 0:
            raise RejectedParametersError("noise_sd must be three nonnegative values")

    @classmethod
    def beta_setting(cls, name: str, **kw) -> "Model8Params":
        """``'3alpha/4'`` or ``'-alpha'``."""
        alpha = _default_alpha()
        betas = {"3alpha/4": 0.75 * alpha, "-alpha": -alpha}
        if name not in betas:
            raise ValueError(f"unknown beta setting {name!r}; choose from {sorted(betas)}")
        return cls(alpha=alpha, beta=betas[name], **kw)

    @property
    def d(self) -> int:
        return self.alpha.shape[0] + 2


def sample_gaussian_block(n: int, params: Model8Params, rng: np.random.Generator) -> np.ndarray:
    """(n, k) rows i.i.d. ``N(mu, sigma)`` via the Cholesky factor of sigma."""
    try:
        chol = np.linalg.cholesky(params.sigma)
    except np.linalg.LinAlgError as exc:
        raise RejectedParametersError(f"sigma is not positive definite: {exc}") from exc
    z = rng.standard_normal((n, params.sigma.shape[0]))
    return params.mu + z @ chol.T


def model8_response(x1, x2, x_prime, params: Model8Params, eps=0.0, zeta=0.0, eta=0.0):
    """Response of the two-branch model for given covariates and noise."""
    x_prime = np.asarray(x_prime, dtype=np.float64)
    same = np.asarray(x1) == np.asarray(x2)
    return np.where(same, x_prime @ params.alpha + eps, x_prime @ params.beta + zeta) + eta


def simulate_model8(n: int, params: Model8Params, rng: np.random.Generator) -> Dataset:
    """Columns ``x1, x2`` (Bernstein pair, X0 dropped), ``x3..x10`` and ``y``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    triples = sample_bernstein_array(n, rng)
    x_prime = sample_gaussian_block(n, params, rng)
    sd_eps, sd_zeta, sd_eta = params.noise_sd
    noise = rng.standard_normal((n, 3)) * np.array([sd_eps, sd_zeta, sd_eta])
    x1, x2 = triples[:, 1], triples[:, 2]
    y = model8_response(x1, x2, x_prime, params, noise[:, 0], noise[:, 1], noise[:, 2])
    features = np.column_stack([x1, x2, x_prime]).astype(np.float64)
    return Dataset(features, y)


# --------------------------------------------------------------------------
# Pairwise-independent densities


def _squash(t, c):
    return t / np.sqrt(c * c + t * t)


@dataclass(frozen=True)
class ProductPerturbation:
    """``phi = scale * s(x0; c0) s(x1.1; c1) s(x2.1; c2)`` with ``s(t; c) = t / sqrt(c^2 + t^2)``.

    ``|phi| <= |scale| < 1`` for ``|scale| <= 1``; each factor is odd, so phi
    integrates to zero against any even marginal. Because it factors as
    ``x0_factor(x0) * block_factor(x1, x2)``, conditional CDFs of ``X0``
    reduce to one tabulated integral.
    """

    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    scale: float = 1.0

    def x0_factor(self, x0):
        return _squash(np.asarray(x0, dtype=np.float64), self.c0)

    def block_factor(self, x1_block, x2_block):
        s1 = np.sum(np.asarray(x1_block, dtype=np.float64), axis=-1)
        s2 = np.sum(np.asarray(x2_block, dtype=np.float64), axis=-1)
        return self.scale * _squash(s1, self.c1) * _squash(s2, self.c2)

    def __call__(self, x0, x1_block, x2_block):
        return self.x0_factor(x0) * self.block_factor(x1_block, x2_block)


@dataclass
class PairwiseDensitySpec:
    """Density ``f0(x0) f1(x1) f2(x2) (1 - phi(x0, x1, x2))`` over a scalar and two blocks.

    ``f0``, ``f1``, ``f2`` are frozen scipy distributions; block coordinates
    are i.i.d. from ``f1`` (``f2``). ``phi`` defaults to
    :class:`ProductPerturbation` with constants ``c0, c1, c2``. Any callable
    ``phi(x0, x1_block, x2_block)`` vectorised over leading axes also works,
    through the slower generic quadrature path.
    """

    f0: stats.rv_continuous = field(default_factory=stats.norm)
    f1: stats.rv_continuous = field(default_factory=stats.norm)
    f2: stats.rv_continuous = field(default_factory=stats.norm)
    phi: Callable | None = None
    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    d1: int = 2
    d2: int = 3
    d3: int = 5
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.phi is None:
            self.phi = ProductPerturbation(self.c0, self.c1, self.c2)
        if min(self.d1, self.d2) < 1 or self.d3 < 0:
            raise RejectedParametersError("block dimensions must be d1, d2 >= 1 and d3 >= 0")
        if isinstance(self.phi, ProductPerturbation) and abs(self.phi.scale) > 1:
            raise RejectedParametersError("|phi| must be bounded by 1")


class PairwiseSample(NamedTuple):
    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    attempts: int


def sample_pairwise_batch(n: int, spec: PairwiseDensitySpec, rng: np.random.Generator) -> PairwiseSample:
    """Draw ``n`` points by rejection from the independent product of marginals.

    A proposal is accepted with probability ``(1 - phi) / 2``. Proposals are
    made in rounds for all rows still pending; a row pending after
    ``spec.max_attempts`` rounds raises :class:`SamplerStallError`.
    """
    x0 = np.empty(n)
    x1 = np.empty((n, spec.d1))
    x2 = np.empty((n, spec.d2))
    pending = np.arange(n)
    attempts = 0
    for _ in range(spec.max_attempts):
        if pending.size == 0:
            break
        k = pending.size
        p0 = spec.f0.rvs(size=k, random_state=rng)
        p1 = spec.f1.rvs(size=(k, spec.d1), random_state=rng)
        p2 = spec.f2.rvs(size=(k, spec.d2), random_state=rng)
        phi = np.asarray(spec.phi(p0, p1, p2), dtype=np.float64)
        if np.any(np.abs(phi) > 1):
            raise RejectedParametersError("perturbation exceeds 1 in absolute value")
        accept = rng.random(k) < 0.5 * (1.0 - phi)
        attempts += k
        rows = pending[accept]
        x0[rows], x1[rows], x2[rows] = p0[accept], p1[accept], p2[accept]
        pending = pending[~accept]
    if pending.size:
        raise SamplerStallError(f"{pending.size} draws still rejected after {spec.max_attempts} attempts")
    return PairwiseSample(x0, x1, x2, attempts)


def sample_pairwise_density(spec: PairwiseDensitySpec, rng: np.random.Generator):
    """One draw ``(x0, x1_block, x2_block)``."""
    s = sample_pairwise_batch(1, spec, rng)
    return float(s.x0[0]), s.x1[0], s.x2[0]


def _support(dist) -> tuple[float, float]:
    mean, sd = float(dist.mean()), float(dist.std())
    lo, hi = dist.support()
    return max(lo, mean - 8 * sd), min(hi, mean + 8 * sd)


def _quad(func, a, b) -> float:
    val, err = integrate.quad(func, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)
    if not np.isfinite(val) or err > 1e-10:
        raise NumericError(f"quadrature on [{a}, {b}] did not converge (error estimate {err:.3g})")
    return val


def conditional_cdf(x: float, x1_block, x2_block, spec: PairwiseDensitySpec) -> float:
    """``P(X0 <= x | X1 = x1_block, X2 = x2_block)`` by direct quadrature."""
    lo, hi = _support(spec.f0)
    dens = _conditional_density(x1_block, x2_block, spec)
    total = _quad(dens, lo, hi)
    x = min(max(x, lo), hi)
    return _quad(dens, lo, x) / total


def _conditional_density(x1_block, x2_block, spec):
    x1_block = np.asarray(x1_block, dtype=np.float64)
    x2_block = np.asarray(x2_block, dtype=np.float64)

    def dens(t):
        return float(spec.f0.pdf(t) * (1.0 - spec.phi(t, x1_block, x2_block)))

    return dens


def conditional_cdf_inverse(u: float, x1_block, x2_block, spec: PairwiseDensitySpec) -> float:
    """Generalized inverse ``min{x : H(x) >= u}`` of the conditional CDF of X0.

    ``H`` is computed by adaptive quadrature on ``mean +- 8 sd`` of ``f0``
    and inverted with Brent's method; the result satisfies ``H(x) >= u``
    and ``|H(x) - u| <= 1e-8``.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    lo, hi = _support(spec.f0)
    dens = _conditional_density(x1_block, x2_block, spec)
    total = _quad(dens, lo, hi)
    if total <= 0:
        raise NumericError("conditional density integrates to zero")

    def h(x):
        return _quad(dens, lo, x) / total - u

    try:
        root = optimize.brentq(h, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
    except (ValueError, RuntimeError) as exc:
        raise NumericError(f"root search failed: {exc}") from exc
    step = 1e-13
    while h(root) < 0:
        root += step
        step *= 2
    return float(root)


class _SeparableInverse:
    """Vectorised ``H^{-1}`` for a :class:`ProductPerturbation`.

    With ``phi = a(x1, x2) * g(x0)``, ``H(x) = (F0(x) - a G(x)) / (1 - a G_total)``
    where ``G(x) = int_{-inf}^x f0(t) g(t) dt``. ``G`` is tabulated on a grid
    by quadrature and interpolated with cubic Hermite splines using the exact
    derivative ``f0 g``.
    """

    def __init__(self, spec: PairwiseDensitySpec, step: float = 0.01):
        self.spec = spec
        self.lo, self.hi = _support(spec.f0)
        grid = np.linspace(self.lo, self.hi, int(round((self.hi - self.lo) / step)) + 1)
        g = spec.phi.x0_factor

        def integrand(t):
            return float(spec.f0.pdf(t) * g(t))

        cells = [_quad(integrand, a, b) for a, b in zip(grid[:-1], grid[1:])]
        values = np.concatenate([[0.0], np.cumsum(cells)])
        self.g_total = values[-1]
        self.f0_lo = spec.f0.cdf(self.lo)
        self.f0_mass = spec.f0.cdf(self.hi) - self.f0_lo
        self.G = CubicHermiteSpline(grid, values, spec.f0.pdf(grid) * g(grid))

    def cdf(self, x, a):
        x = np.clip(x, self.lo, self.hi)
        num = self.spec.f0.cdf(x) - self.f0_lo - a * self.G(x)
        return num / (self.f0_mass - a * self.g_total)

    def inverse(self, u, a, iters: int = 60):
        u = np.asarray(u, dtype=np.float64)
        lo = np.full(u.shape, self.lo)
        hi = np.full(u.shape, self.hi)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid, a) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi


def _default_psi(h, x_prime, e):
    return h + x_prime.sum(axis=1) + e


def simulate_model3(n: int, spec: PairwiseDensitySpec, psi: Callable | None = None,
                    rng: np.random.Generator | None = None) -> Dataset:
    """Dataset with the X1 block, X2 block, X' block and ``Y = psi(H^{-1}(xi; X1, X2), X', eps)``.

    ``psi(h, x_prime, eps)`` is vectorised: ``h`` and ``eps`` have shape
    ``(n,)`` and ``x_prime`` has shape ``(n, d3)``. Defaults to
    ``h + sum(x_prime) + eps``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng)
    psi = psi or _default_psi
    draw = sample_pairwise_batch(n, spec, rng)
    xi = rng.random(n)
    x_prime = rng.standard_normal((n, spec.d3))
    eps = rng.standard_normal(n)
    # xi == 0 has probability zero but would be outside the inverse's domain
    xi = np.where(xi > 0, xi, np.nextafter(0.0, 1.0))
    if isinstance(spec.phi, ProductPerturbation):
        inv = _SeparableInverse(spec)
        h = inv.inverse(xi, spec.phi.block_factor(draw.x1, draw.x2))
    else:
        h = np.array([conditional_cdf_inverse(u, a, b, spec) for u, a, b in zip(xi, draw.x1, draw.x2)])
    y = np.asarray(psi(h, x_prime, eps), dtype=np.float64)
    features = np.column_stack([draw.x1, draw.x2, x_prime])
    return Dataset(features, y)
