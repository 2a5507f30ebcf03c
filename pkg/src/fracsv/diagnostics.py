"""Effective sample sizes, posterior summaries and sampler comparisons."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConstantSeries, EmptyChain, InvalidParameter, MismatchedRuns

DEFAULT_BURN_IN = 0.2
MIN_LENGTH = 10


def autocorrelation(x) -> np.ndarray:
    """Biased empirical autocorrelations at lags ``0..n-1`` via zero-padded FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if not acov[0] > 0:
        raise ConstantSeries("series has zero sample variance")
    return acov / acov[0]


@dataclass(frozen=True)
class GeyerResult:
    ess: float
    tau: float
    lag: int  # first lag of the first non-positive pair; always even


def geyer(series) -> GeyerResult:
    """Geyer's initial monotone positive sequence estimate of the ESS.

    The autocorrelations are grouped in pairs ``G_k = r_{2k} + r_{2k+1}``.
    Summation stops at the first non-positive pair, and the retained pairs
    are forced to be non-increasing.  The estimate is capped at ``n``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < MIN_LENGTH:
        raise InvalidParameter(f"ESS needs at least {MIN_LENGTH} draws, got {n}")
    if not np.all(np.isfinite(x)):
        raise InvalidParameter("series contains non-finite values")
    # exact zero variance is checked before the FFT, which leaves round-off
    if np.ptp(x) == 0.0:
        raise ConstantSeries("series is constant; the chain did not move")
    rho = autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    nonpos = np.flatnonzero(pairs <= 0.0)
    k = int(nonpos[0]) if nonpos.size else n_pairs
    kept = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * float(kept.sum())
    ess = n if tau <= 0 else min(float(n), n / tau)
    return GeyerResult(ess, tau, 2 * k)


def ess(series) -> float:
    """Effective sample size of a scalar chain."""
    return geyer(series).ess


def _burn(n: int, burn_in: float) -> int:
    if not 0.0 <= burn_in < 1.0:
        raise InvalidParameter("burn_in must be a fraction in [0, 1)")
    return int(math.floor(burn_in * n))


@dataclass(frozen=True)
class EssReport:
    names: tuple
    ess: np.ndarray
    n_draws: int
    min_theta: float
    min_z: float
    overall_min: float
    seconds: float
    constant: tuple = ()

    @property
    def percent(self) -> np.ndarray:
        return 100.0 * self.ess / self.n_draws

    @property
    def min_ess_per_second(self) -> float:
        return self.min_theta / self.seconds if self.seconds > 0 else math.inf

    def as_dict(self) -> dict:
        return {
            "n_draws": self.n_draws,
            "ess": dict(zip(self.names, map(float, self.ess))),
            "min_theta": self.min_theta,
            "min_z": self.min_z,
            "overall_min": self.overall_min,
            "seconds": self.seconds,
            "min_ess_per_second": self.min_ess_per_second,
            "constant": list(self.constant),
        }


def _safe_ess(col, label, constant, strict):
    try:
        return ess(col)
    except ConstantSeries:
        if strict:
            raise
        constant.append(label)
        return 0.0


def ess_report(chain, burn_in: float = DEFAULT_BURN_IN, seconds: Optional[float] = None,
               strict: bool = False) -> EssReport:
    """ESS per parameter and over the monitored latent coordinates.

    A constant series raises :class:`ConstantSeries` when ``strict``;
    otherwise it scores 0 and is listed in ``constant``.
    """
    start = _burn(chain.n_iterations, burn_in)
    theta = chain.theta[start:]
    if theta.shape[0] == 0:
        raise EmptyChain("no draws left after burn-in")
    constant: list = []
    names = tuple(chain.param_names)
    values = np.array([_safe_ess(theta[:, j], names[j], constant, strict)
                       for j in range(theta.shape[1])])
    zmon = getattr(chain, "z_monitor", None)
    if zmon is not None and zmon.size:
        zmon = zmon[start:]
        z_ess = [_safe_ess(zmon[:, j], f"z{j}", constant, strict) for j in range(zmon.shape[1])]
        min_z = float(min(z_ess))
    else:
        min_z = math.nan
    min_theta = float(values.min())
    overall = min_theta if math.isnan(min_z) else min(min_theta, min_z)
    if seconds is None:
        seconds = float(np.sum(chain.timing))
    return EssReport(names, values, theta.shape[0], min_theta, min_z, overall, seconds,
                     tuple(constant))


@dataclass(frozen=True)
class PosteriorSummary:
    names: tuple
    draws: np.ndarray = field(repr=False)
    mean: np.ndarray
    median: np.ndarray
    q025: np.ndarray
    q975: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def quantile(self, p):
        """Type-7 quantiles (linear interpolation) of every parameter."""
        return np.quantile(self.draws, p, axis=0, method="linear")

    def interval(self, name: str) -> tuple:
        j = self.names.index(name)
        return float(self.q025[j]), float(self.q975[j])

    def rows(self):
        for j, name in enumerate(self.names):
            yield name, self.q025[j], self.q975[j], self.mean[j], self.median[j]

    def to_text(self, digits: int = 4) -> str:
        header = ("param", "2.5%", "97.5%", "mean", "median")
        body = [(r[0], *(f"{v:.{digits}f}" for v in r[1:])) for r in self.rows()]
        return format_table(header, body)


def summarize(chain, burn_in: float = DEFAULT_BURN_IN) -> PosteriorSummary:
    """Posterior mean, median and central 95% interval per parameter."""
    start = _burn(chain.n_iterations, burn_in)
    draws = np.asarray(chain.theta[start:], dtype=float)
    if draws.shape[0] == 0:
        raise EmptyChain("no draws left after burn-in")
    q = np.quantile(draws, [0.025, 0.5, 0.975], axis=0, method="linear")
    return PosteriorSummary(tuple(chain.param_names), draws, draws.mean(axis=0), q[1], q[0], q[2])


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    min_ess_theta: float
    min_ess_z: float
    leapfrogs: int
    seconds_per_iteration: float
    min_ess_per_second: float
    relative: float


@dataclass(frozen=True)
class Comparison:
    rows: tuple

    HEADER = ("run", "min ESS theta", "min ESS z", "leapfrogs", "sec/iter", "min ESS/sec",
              "relative")

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def records(self):
        for r in self.rows:
            yield (r.label, r.min_ess_theta, r.min_ess_z, r.leapfrogs, r.seconds_per_iteration,
                   r.min_ess_per_second, r.relative)

    def to_text(self) -> str:
        body = [(r[0], f"{r[1]:.1f}", f"{r[2]:.1f}", str(r[3]), f"{r[4]:.4g}", f"{r[5]:.4g}",
                 f"{r[6]:.2f}") for r in self.records()]
        return format_table(self.HEADER, body)


def compare(runs: Sequence, burn_in: float = DEFAULT_BURN_IN) -> Comparison:
    """Efficiency table over ``(label, chain, wall_seconds)`` runs.

    ``wall_seconds`` may be ``None`` to use the chain's own timing.  Ratios
    are relative to the least efficient run, so the worst run scores 1.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise InvalidParameter("compare needs at least two runs")
    ids = {getattr(c, "dataset_id", "") for _, c, _ in runs}
    if len(ids) > 1:
        raise MismatchedRuns(f"runs were made on different datasets: {sorted(ids)}")
    partial = []
    for label, chain, wall in runs:
        rep = ess_report(chain, burn_in, seconds=wall)
        per_iter = rep.seconds / chain.n_iterations if chain.n_iterations else math.nan
        partial.append((label, rep, chain.leapfrogs_per_iteration, per_iter))
    worst = min(p[1].min_ess_per_second for p in partial)
    rows = tuple(
        ComparisonRow(label, rep.min_theta, rep.min_z, lf, spi, rep.min_ess_per_second,
                      rep.min_ess_per_second / worst if worst > 0 else math.inf)
        for label, rep, lf, spi in partial)
    return Comparison(rows)


def format_table(header, rows) -> str:
    """Right-aligned plain-text table."""
    rows = [tuple(map(str, r)) for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    lines = ["  ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)
