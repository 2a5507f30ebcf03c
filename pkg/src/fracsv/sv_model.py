"""Fractional stochastic volatility model.

Log-price ``U`` and log-volatility ``X`` follow

    dU = (mu - exp(X)/2) dt + exp(X/2) {sqrt(1 - rho^2) dW + rho dB^H}
    dX = kappa (mu_x - X) dt + sigma_x dB^H

with ``B^H`` produced from latent normals ``z`` by the Davies-Harte map.
``X`` is integrated with an Euler scheme on the latent grid, and the
conditional Gaussian transition of ``U`` between observation times uses
left-point Riemann sums.  All three sums are evaluated on the same sub-grid.

The potential ``phi(z, u)`` is the negative log posterior in the
unconstrained parameter vector ``u`` minus the standard normal ``z`` term,
which the samplers carry separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.signal import lfilter
from scipy.special import betaln, expit, gammaln

from .errors import DataError, DegenerateVariance, InvalidParameter, NonFiniteState
from .fbm import (GridSpec, check_hurst, davies_harte_adjoint, davies_harte_map,
                  davies_harte_map_dH)

PARAM_NAMES = ("mu", "kappa", "mu_x", "sigma_x", "hurst", "rho", "x0")
N_PARAMS = len(PARAM_NAMES)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Theta:
    mu: float
    kappa: float
    mu_x: float
    sigma_x: float
    hurst: float
    rho: float
    x0: float

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))
        if not self.kappa > 0:
            raise InvalidParameter(f"kappa must be positive, got {self.kappa}")
        if not self.sigma_x > 0:
            raise InvalidParameter(f"sigma_x must be positive, got {self.sigma_x}")
        if not -1.0 < self.rho < 1.0:
            raise InvalidParameter(f"rho must lie in (-1, 1), got {self.rho}")
        check_hurst(self.hurst)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_array(cls, values) -> "Theta":
        return cls(*np.asarray(values, dtype=float))

    def to_unconstrained(self) -> np.ndarray:
        h, r = self.hurst, self.rho
        return np.array([
            self.mu,
            math.log(self.kappa),
            self.mu_x,
            math.log(self.sigma_x),
            math.log(h) - math.log1p(-h),
            math.log1p(r) - math.log1p(-r),
            self.x0,
        ])

    @classmethod
    def from_unconstrained(cls, u) -> "Theta":
        u = np.asarray(u, dtype=float)
        try:
            return cls(u[0], math.exp(u[1]), u[2], math.exp(u[3]),
                       expit(u[4]), math.tanh(0.5 * u[5]), u[6])
        except (OverflowError, InvalidParameter) as exc:
            # saturated transforms (exp overflow, H or rho rounding onto the boundary)
            raise NonFiniteState(f"unconstrained point maps outside the support: {exc}") from exc

    def replace(self, **changes) -> "Theta":
        return replace(self, **changes)


def theta_jacobian(theta: Theta) -> np.ndarray:
    """Diagonal of ``d theta / d u``."""
    h, r = theta.hurst, theta.rho
    return np.array([1.0, theta.kappa, 1.0, theta.sigma_x, h * (1.0 - h), 0.5 * (1.0 - r * r), 1.0])


def log_jacobian(theta: Theta) -> float:
    return float(np.sum(np.log(theta_jacobian(theta))))


def log_jacobian_grad(theta: Theta) -> np.ndarray:
    """Gradient of :func:`log_jacobian` with respect to ``u``."""
    return np.array([0.0, 1.0, 0.0, 1.0, 1.0 - 2.0 * theta.hurst, -theta.rho, 0.0])


def mu_x_prior_from_range(lo: float, hi: float) -> tuple[float, float]:
    """Normal ``(mean, sd)`` whose central 95% interval spans ``[lo, hi]``."""
    if not hi > lo:
        raise InvalidParameter("range must satisfy hi > lo")
    return 0.5 * (lo + hi), (hi - lo) / (2.0 * 1.96)


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the parameter prior.

    ``hurst_beta`` is a Beta prior on ``H`` and ``rho_beta`` a Beta prior on
    ``(rho + 1)/2``; ``(1, 1)`` gives the uniform priors.  ``kappa_gamma`` is
    an optional ``(shape, rate)`` gamma prior; ``None`` means flat on
    ``kappa > 0``.  ``x0_mean`` defaults to ``mu_x_mean``.
    """

    mu_sd: float = 1e3
    mu_x_mean: float = 0.0
    mu_x_sd: float = 10.0
    ig_shape: float = 2.0
    ig_scale: float = 2.0 * 0.03 * math.sqrt(252.0)
    x0_mean: Optional[float] = None
    x0_sd: float = 2.0
    hurst_beta: tuple = (1.0, 1.0)
    rho_beta: tuple = (1.0, 1.0)
    kappa_gamma: Optional[tuple] = None

    def __post_init__(self):
        positive = [self.mu_sd, self.mu_x_sd, self.ig_shape, self.ig_scale, self.x0_sd,
                    *self.hurst_beta, *self.rho_beta, *(self.kappa_gamma or ())]
        if not all(v > 0 for v in positive):
            raise InvalidParameter("prior scales and shapes must be positive")
        object.__setattr__(self, "hurst_beta", tuple(float(v) for v in self.hurst_beta))
        object.__setattr__(self, "rho_beta", tuple(float(v) for v in self.rho_beta))
        if self.kappa_gamma is not None:
            object.__setattr__(self, "kappa_gamma", tuple(float(v) for v in self.kappa_gamma))

    @property
    def x0_center(self) -> float:
        return self.mu_x_mean if self.x0_mean is None else self.x0_mean

    @classmethod
    def from_mu_x_range(cls, lo: float, hi: float, **kwargs) -> "PriorSpec":
        mean, sd = mu_x_prior_from_range(lo, hi)
        return cls(mu_x_mean=mean, mu_x_sd=sd, **kwargs)

    def center(self) -> Theta:
        """A deterministic, prior-typical parameter value used for initialisation."""
        a, b = self.hurst_beta
        ra, rb = self.rho_beta
        kappa = 1.0 if self.kappa_gamma is None else self.kappa_gamma[0] / self.kappa_gamma[1]
        sigma2 = self.ig_scale / (self.ig_shape + 1.0)  # inverse gamma mode
        return Theta(0.0, kappa, self.mu_x_mean, math.sqrt(sigma2), a / (a + b),
                     2.0 * ra / (ra + rb) - 1.0, self.x0_center)


def _normal_logpdf(x, mean, sd):
    return -0.5 * _LOG_2PI - math.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def _beta_logpdf(t, one_minus_t, a, b):
    return (a - 1.0) * math.log(t) + (b - 1.0) * math.log(one_minus_t) - betaln(a, b)


def log_prior_terms(theta: Theta, spec: PriorSpec) -> dict:
    """Per-parameter log prior densities in natural coordinates."""
    alpha, beta = spec.ig_shape, spec.ig_scale
    s = theta.sigma_x
    # inverse gamma on sigma_x^2, written as a density in sigma_x
    log_sig = (alpha * math.log(beta) - gammaln(alpha) - (alpha + 1.0) * math.log(s * s)
               - beta / (s * s) + math.log(2.0 * s))
    if spec.kappa_gamma is None:
        log_kappa = 0.0
    else:
        k, r = spec.kappa_gamma
        log_kappa = k * math.log(r) - gammaln(k) + (k - 1.0) * math.log(theta.kappa) - r * theta.kappa
    return {
        "mu": _normal_logpdf(theta.mu, 0.0, spec.mu_sd),
        "kappa": log_kappa,
        "mu_x": _normal_logpdf(theta.mu_x, spec.mu_x_mean, spec.mu_x_sd),
        "sigma_x": log_sig,
        "hurst": _beta_logpdf(theta.hurst, 1.0 - theta.hurst, *spec.hurst_beta),
        "rho": _beta_logpdf(0.5 * (1.0 + theta.rho), 0.5 * (1.0 - theta.rho), *spec.rho_beta)
        - math.log(2.0),
        "x0": _normal_logpdf(theta.x0, spec.x0_center, spec.x0_sd),
    }


def log_prior(theta, spec: PriorSpec) -> float:
    """Joint log prior density; ``-inf`` outside the parameter support."""
    if not isinstance(theta, Theta):
        try:
            theta = Theta(**theta) if isinstance(theta, dict) else Theta.from_array(theta)
        except InvalidParameter:
            return -math.inf
    return float(sum(log_prior_terms(theta, spec).values()))


def log_prior_grad(theta: Theta, spec: PriorSpec) -> np.ndarray:
    """Gradient of :func:`log_prior` in natural coordinates."""
    alpha, beta = spec.ig_shape, spec.ig_scale
    s = theta.sigma_x
    ha, hb = spec.hurst_beta
    ra, rb = spec.rho_beta
    t, one_minus_t = 0.5 * (1.0 + theta.rho), 0.5 * (1.0 - theta.rho)
    dkappa = 0.0
    if spec.kappa_gamma is not None:
        k, r = spec.kappa_gamma
        dkappa = (k - 1.0) / theta.kappa - r
    return np.array([
        -theta.mu / spec.mu_sd ** 2,
        dkappa,
        -(theta.mu_x - spec.mu_x_mean) / spec.mu_x_sd ** 2,
        -(2.0 * alpha + 1.0) / s + 2.0 * beta / s ** 3,
        (ha - 1.0) / theta.hurst - (hb - 1.0) / (1.0 - theta.hurst),
        0.5 * ((ra - 1.0) / t - (rb - 1.0) / one_minus_t),
        -(theta.x0 - spec.x0_center) / spec.x0_sd ** 2,
    ])


@dataclass(frozen=True)
class Dataset:
    """Observations of log-price, and optionally log-volatility, on the grid.

    ``obs_index[k]`` is the grid index of the ``k``-th observation time.
    ``proxies`` has the same length as ``y`` with NaN where no proxy exists.
    """

    grid: GridSpec
    obs_index: np.ndarray
    y: np.ndarray
    y0: float = 0.0
    proxies: Optional[np.ndarray] = None
    tau: float = 0.05
    _seg: np.ndarray = field(init=False, repr=False, compare=False)
    _seg_len: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = np.asarray(self.obs_index)
        if idx.ndim != 1 or idx.size == 0:
            raise DataError("obs_index must be a non-empty 1-d array")
        if not np.all(idx == np.round(idx)):
            raise DataError("obs_index must be integers")
        idx = idx.astype(np.int64)
        if idx[0] < 1 or idx[-1] > self.grid.n_steps or np.any(np.diff(idx) <= 0):
            raise DataError("obs_index must be strictly increasing within 1..N")
        y = np.asarray(self.y, dtype=float)
        if y.shape != idx.shape or not np.all(np.isfinite(y)):
            raise DataError("y must be finite and aligned with obs_index")
        proxies = self.proxies
        if proxies is not None:
            proxies = np.asarray(proxies, dtype=float)
            if proxies.shape != idx.shape:
                raise DataError("proxies must align one-to-one with obs_index")
            if np.all(np.isnan(proxies)):
                proxies = None
        if not self.tau > 0:
            raise DataError("tau must be positive")
        seg = np.full(self.grid.n_steps, -1, dtype=np.int64)
        starts = np.concatenate([[0], idx[:-1]])
        for k, (a, b) in enumerate(zip(starts, idx)):
            seg[a:b] = k
        for name, value in (("obs_index", idx), ("y", y), ("proxies", proxies), ("_seg", seg),
                            ("_seg_len", idx - starts)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "y0", float(self.y0))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def n_obs(self) -> int:
        return self.obs_index.size

    @property
    def has_proxies(self) -> bool:
        return self.proxies is not None

    def with_proxies(self, proxies) -> "Dataset":
        return Dataset(self.grid, self.obs_index, self.y, self.y0, proxies, self.tau)

    def refine(self, factor: int) -> "Dataset":
        """Same observations on a grid ``factor`` times finer."""
        grid = GridSpec(self.grid.n_steps * factor, self.grid.mesh / factor)
        return Dataset(grid, self.obs_index * factor, self.y, self.y0, self.proxies, self.tau)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.array([self.grid.n_steps, self.grid.mesh, self.y0, self.tau]).tobytes())
        h.update(self.obs_index.tobytes())
        h.update(self.y.tobytes())
        if self.proxies is not None:
            h.update(self.proxies.tobytes())
        return h.hexdigest()[:16]


def _ar1(forcing, coef, start):
    """``x[0] = start``, ``x[j+1] = coef x[j] + forcing[j]``."""
    x = np.empty(forcing.size + 1)
    x[0] = start
    x[1:] = lfilter([1.0], [1.0, -coef], forcing, zi=[coef * start])[0]
    return x


def _ar1_adjoint(g, coef):
    """``lam[N] = g[N]``, ``lam[j] = g[j] + coef lam[j+1]``."""
    return lfilter([1.0], [1.0, -coef], g[::-1])[::-1]


def volatility_from_increments(db, theta: Theta, mesh: float) -> np.ndarray:
    a = 1.0 - theta.kappa * mesh
    forcing = theta.kappa * theta.mu_x * mesh + theta.sigma_x * np.asarray(db, dtype=float)
    return _ar1(forcing, a, theta.x0)


def volatility_path(z, theta: Theta, grid: GridSpec) -> np.ndarray:
    """Euler path of the log-volatility at grid points ``0..N``."""
    db = davies_harte_map(z, theta.hurst, grid)
    return volatility_from_increments(db, theta, grid.mesh)


def _likelihood(db, x, theta: Theta, data: Dataset, want_grad: bool):
    """Log-likelihood given increments and path, optionally with adjoints.

    Returns ``(value, None)`` or ``(value, (g_db, g_x, g_mu, g_rho))`` where
    ``g_db`` and ``g_x`` are the direct partials in each argument.
    """
    delta = data.grid.mesh
    n = data.n_obs
    seg = data._seg
    used = seg >= 0
    su = seg[used]
    xl = x[:-1][used]
    dbu = db[used]
    e = np.exp(xl)
    s = np.exp(0.5 * xl)
    rho = theta.rho
    one_m_r2 = 1.0 - rho * rho

    drift = theta.mu * delta * data._seg_len - 0.5 * delta * np.bincount(su, e, n)
    lev = np.bincount(su, s * dbu, n)
    var_int = delta * np.bincount(su, e, n)
    prev = np.concatenate([[data.y0], data.y[:-1]])
    mean = prev + drift + rho * lev
    var = one_m_r2 * var_int
    if not np.all(var > 0) or not np.all(np.isfinite(var)):
        raise DegenerateVariance("conditional price variance is not positive")
    resid = data.y - mean
    value = -0.5 * (n * _LOG_2PI + np.sum(np.log(var)) + np.sum(resid * resid / var))

    if data.has_proxies:
        mask = ~np.isnan(data.proxies)
        xp = x[data.obs_index[mask]]
        pres = data.proxies[mask] - xp
        tau2 = data.tau ** 2
        value += -0.5 * (mask.sum() * (_LOG_2PI + math.log(tau2)) + np.sum(pres * pres) / tau2)

    if not np.isfinite(value):
        raise DegenerateVariance("log-likelihood is not finite")
    if not want_grad:
        return float(value), None

    g_mean = resid / var
    g_var = 0.5 * (resid * resid / var - 1.0) / var
    g_mu = delta * float(g_mean @ data._seg_len)
    g_rho = float(g_mean @ lev) - 2.0 * rho * float(g_var @ var_int)
    gm_i = g_mean[su]
    # d/de_i and d/ds_i per increment, then chain back to x
    g_e = delta * (-0.5 * gm_i + one_m_r2 * g_var[su])
    g_s = rho * gm_i * dbu
    g_x = np.zeros(x.size)
    g_x[:-1][used] = g_e * e + 0.5 * g_s * s
    g_db = np.zeros(db.size)
    g_db[used] = rho * gm_i * s
    if data.has_proxies:
        np.add.at(g_x, data.obs_index[mask], pres / tau2)
    return float(value), (g_db, g_x, g_mu, g_rho)


def loglik(z, theta: Theta, data: Dataset) -> float:
    """Discretised log-likelihood ``log p_N(Y | z, theta)``."""
    db = davies_harte_map(z, theta.hurst, data.grid)
    x = volatility_from_increments(db, theta, data.grid.mesh)
    return _likelihood(db, x, theta, data, want_grad=False)[0]


class SVModel:
    """Potential ``phi`` and its gradient for a fixed dataset and prior.

    The sampler interface is :meth:`potential`, returning ``phi`` together
    with the gradients in ``z`` and ``u``.
    """

    param_names = PARAM_NAMES

    def __init__(self, data: Dataset, prior: Optional[PriorSpec] = None):
        self.data = data
        self.prior = prior or PriorSpec()

    @property
    def dim_z(self) -> int:
        return 2 * self.data.grid.n_steps

    @property
    def dim_u(self) -> int:
        return N_PARAMS

    def transform(self, u) -> Theta:
        return Theta.from_unconstrained(u)

    def phi(self, z, u) -> float:
        theta = Theta.from_unconstrained(u)
        ll = loglik(z, theta, self.data)
        return -log_prior(theta, self.prior) - log_jacobian(theta) - ll

    def grad_phi(self, z, u):
        return self.potential(z, u)[1:]

    def loglik_grad(self, z, u):
        """``(loglik, d loglik / d z, d loglik / d u)`` without the prior terms."""
        theta = Theta.from_unconstrained(u)
        grid = self.data.grid
        delta = grid.mesh
        db, db_dh = davies_harte_map_dH(z, theta.hurst, grid)
        x = volatility_from_increments(db, theta, delta)
        ll, (g_db, g_x, g_mu, g_rho) = _likelihood(db, x, theta, self.data, want_grad=True)

        a = 1.0 - theta.kappa * delta
        lam = _ar1_adjoint(g_x, a)
        lam_next = lam[1:]
        g_db = g_db + theta.sigma_x * lam_next
        sum_lam = lam_next.sum()
        g_nat = np.array([
            g_mu,
            delta * (theta.mu_x * sum_lam - lam_next @ x[:-1]),
            theta.kappa * delta * sum_lam,
            lam_next @ db,
            g_db @ db_dh,
            g_rho,
            lam[0],
        ])
        grad_z = davies_harte_adjoint(g_db, theta.hurst, grid)
        return ll, grad_z, g_nat * theta_jacobian(theta)

    def potential(self, z, u):
        theta = Theta.from_unconstrained(u)
        ll, gz_ll, gu_ll = self.loglik_grad(z, u)
        g_prior = log_prior_grad(theta, self.prior) * theta_jacobian(theta) + log_jacobian_grad(theta)
        value = -ll - log_prior(theta, self.prior) - log_jacobian(theta)
        return value, -gz_ll, -(gu_ll + g_prior)


def phi(z, u, data: Dataset, spec: Optional[PriorSpec] = None) -> float:
    return SVModel(data, spec).phi(z, u)


def grad_phi(z, u, data: Dataset, spec: Optional[PriorSpec] = None):
    """Gradients ``(d phi / d z, d phi / d u)``."""
    return SVModel(data, spec).grad_phi(z, u)


@dataclass(frozen=True)
class SimulationResult:
    data: Dataset
    z: np.ndarray
    x: np.ndarray
    u: np.ndarray
    theta: Theta


def simulate_dataset(theta: Theta, n_obs: int, grid: GridSpec, seed=None, regime: str = "A",
                     obs_per_day: int = 1, tau: float = 0.05, y0: float = 0.0) -> SimulationResult:
    """Simulate prices (and proxies) from the model on ``grid``.

    ``n_obs`` counts days; regime ``"C"`` records ``obs_per_day`` equispaced
    prices per day, regimes ``"B"`` and ``"C"`` add a daily proxy
    ``X_t + N(0, tau^2)`` at each day end.  ``grid.n_steps`` must be a
    multiple of ``n_obs * obs_per_day``.
    """
    regime = regime.upper()
    if regime not in ("A", "B", "C"):
        raise InvalidParameter(f"regime must be A, B or C, got {regime!r}")
    per_day = obs_per_day if regime == "C" else 1
    n_prices = n_obs * per_day
    if grid.n_steps % n_prices:
        raise InvalidParameter(
            f"grid of {grid.n_steps} steps cannot resolve {n_prices} equispaced observations")
    if theta.kappa * grid.mesh >= 1.0:
        raise InvalidParameter(
            f"kappa * mesh = {theta.kappa * grid.mesh:g} >= 1: the Euler scheme for X "
            "does not resolve the mean reversion; refine the grid")
    rng = np.random.default_rng(seed)
    n = grid.n_steps
    delta = grid.mesh
    z = rng.standard_normal(2 * n)
    dw = math.sqrt(delta) * rng.standard_normal(n)
    db = davies_harte_map(z, theta.hurst, grid)
    x = volatility_from_increments(db, theta, delta)
    xl = x[:-1]
    du = ((theta.mu - 0.5 * np.exp(xl)) * delta
          + np.exp(0.5 * xl) * (math.sqrt(1.0 - theta.rho ** 2) * dw + theta.rho * db))
    u = y0 + np.concatenate([[0.0], np.cumsum(du)])
    step = n // n_prices
    obs_index = step * np.arange(1, n_prices + 1)
    proxies = None
    if regime in ("B", "C"):
        noise = tau * rng.standard_normal(n_obs)
        proxies = np.full(n_prices, np.nan)
        day_end = np.arange(per_day - 1, n_prices, per_day)
        proxies[day_end] = x[obs_index[day_end]] + noise
    data = Dataset(grid, obs_index, u[obs_index], y0, proxies, tau)
    return SimulationResult(data, z, x, u, theta)
