"""Exact fractional Gaussian noise on a regular grid via circulant embedding.

The Davies-Harte construction is exposed as a real linear map ``z -> dB``
from ``2N`` standard normals to the ``N`` increments of fractional Brownian
motion on the grid ``{delta, 2 delta, ..., N delta}``.  Alongside the map we
provide its transpose (for reverse-mode gradients) and its derivative in the
Hurst index, both at ``O(N log N)`` cost.

Conventions
-----------
The unitary DFT matrix is ``P[j, k] = (2N)^{-1/2} exp(-2 pi i jk / 2N)``,
which is ``numpy.fft.fft(..., norm="ortho")``.  ``P`` is symmetric, so the
same routine realises ``P^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ImaginaryLeak, InvalidParameter, SpectrumNearZero, SpectrumNegative

EPS_IMAG = 1e-8
EPS_NEG = 1e-10
EPS_POS = 1e-12

_SQRT_HALF = 2.0 ** -0.5


def check_hurst(hurst: float) -> float:
    hurst = float(hurst)
    if not 0.0 < hurst < 1.0:
        raise InvalidParameter(f"Hurst index must lie in (0, 1), got {hurst!r}")
    return hurst


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of ``n_steps`` intervals of width ``mesh``."""

    n_steps: int
    mesh: float

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParameter(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if not self.mesh > 0 or not np.isfinite(self.mesh):
            raise InvalidParameter(f"mesh must be positive, got {self.mesh!r}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "mesh", float(self.mesh))

    @classmethod
    def from_horizon(cls, horizon: float, n_steps: int) -> "GridSpec":
        return cls(n_steps, horizon / n_steps)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.mesh

    @property
    def times(self) -> np.ndarray:
        """Grid times ``0, delta, ..., N delta``."""
        return self.mesh * np.arange(self.n_steps + 1)

    @property
    def latent_dim(self) -> int:
        return 2 * self.n_steps


def fgn_autocov(k, hurst):
    """Autocovariance ``g(k)`` of unit-mesh fractional Gaussian noise."""
    two_h = 2.0 * check_hurst(hurst)
    k = np.abs(np.asarray(k, dtype=float))
    return 0.5 * (np.abs(k + 1) ** two_h + np.abs(k - 1) ** two_h) - k ** two_h


def _xpow_log(x, two_h):
    # x^{2H} ln x with the 0 ln 0 = 0 limit
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] ** two_h * np.log(x[pos])
    return out


def fgn_autocov_dh(k, hurst):
    """Derivative of :func:`fgn_autocov` with respect to the Hurst index."""
    two_h = 2.0 * check_hurst(hurst)
    k = np.abs(np.asarray(k, dtype=float))
    return (_xpow_log(np.abs(k + 1), two_h) + _xpow_log(np.abs(k - 1), two_h)
            - 2.0 * _xpow_log(k, two_h))


def embedding_row(n: int, hurst: float, pad: str = "autocov", deriv: bool = False) -> np.ndarray:
    """First row ``c`` of the ``2N x 2N`` circulant embedding.

    ``pad`` selects the entry at index ``N``: ``"autocov"`` uses ``g(N)``,
    ``"zero"`` uses 0.  Both embed the ``N x N`` Toeplitz covariance; only the
    former has a non-negative spectrum for every ``H`` in (0, 1).
    """
    f = fgn_autocov_dh if deriv else fgn_autocov
    head = f(np.arange(n), hurst)
    if pad == "autocov":
        middle = f(np.array([n]), hurst)
    elif pad == "zero":
        middle = np.zeros(1)
    else:
        raise InvalidParameter(f"unknown pad {pad!r}")
    return np.concatenate([head, middle, head[:0:-1]])


@dataclass(frozen=True)
class CirculantSpectrum:
    """Eigenvalues of the circulant embedding and their derivative in ``H``."""

    lambdas: np.ndarray
    dlambdas: np.ndarray
    hurst: float
    n_steps: int

    @property
    def sqrt_lambdas(self) -> np.ndarray:
        return np.sqrt(self.lambdas)


def _embedding_rows(n: int, hurst: float, pad: str):
    # both rows from one set of powers k^{2H}, k = 0..N+1
    two_h = 2.0 * hurst
    k = np.arange(n + 2, dtype=float)
    p = k ** two_h
    pl = np.zeros_like(p)
    pl[2:] = p[2:] * np.log(k[2:])
    m = np.concatenate([[1.0], np.arange(n)])  # |k-1| for k = 0..N
    m = m.astype(int)
    head = np.empty((2, n + 1))
    head[0] = 0.5 * (p[1:] + p[m]) - p[:-1]
    head[1] = pl[1:] + pl[m] - 2.0 * pl[:-1]
    if pad == "zero":
        head[:, n] = 0.0
    elif pad != "autocov":
        raise InvalidParameter(f"unknown pad {pad!r}")
    return np.concatenate([head, head[:, n - 1:0:-1]], axis=1)


@lru_cache(maxsize=64)
def _cached_spectrum(n: int, hurst: float, pad: str) -> CirculantSpectrum:
    rows = _embedding_rows(n, hurst, pad)
    # symmetric real rows: the half-length real transform carries the whole spectrum
    half = np.fft.rfft(rows, axis=1)
    scale = max(np.abs(half.real).max(), 1.0)
    if np.abs(half.imag).max() > EPS_IMAG * scale:
        raise ImaginaryLeak("circulant spectrum has a non-negligible imaginary part")
    full = np.concatenate([half.real, half.real[:, n - 1:0:-1]], axis=1)
    lambdas, dlambdas = full[0], full[1]
    lam_max = lambdas.max()
    if lambdas.min() < -EPS_NEG * lam_max:
        raise SpectrumNegative(
            f"circulant spectrum for N={n}, H={hurst} has eigenvalue {lambdas.min():.3e}")
    lambdas = np.maximum(lambdas, 0.0)
    lambdas.setflags(write=False)
    dlambdas.setflags(write=False)
    return CirculantSpectrum(lambdas, dlambdas, hurst, n)


def circulant_spectrum(n: int, hurst: float, pad: str = "autocov") -> CirculantSpectrum:
    """Spectrum of the circulant embedding for ``N`` increments at Hurst ``hurst``.

    Results are cached on ``(n, hurst, pad)``; the returned arrays are read-only.
    """
    if int(n) != n or n < 1:
        raise InvalidParameter(f"n must be a positive integer, got {n!r}")
    return _cached_spectrum(int(n), check_hurst(hurst), pad)


def _apply_q(z: np.ndarray) -> np.ndarray:
    """Sparse ``Q z``: a Hermitian-symmetric complex vector from ``2N`` reals."""
    n = z.size // 2
    w = np.empty(2 * n, dtype=complex)
    w[0] = z[0]
    w[n] = z[2 * n - 1]
    if n > 1:
        w[1:n] = _SQRT_HALF * (z[1:n] + 1j * z[n:2 * n - 1])
        w[n + 1:] = _SQRT_HALF * (z[n - 1:0:-1] - 1j * z[2 * n - 2:n - 1:-1])
    return w


def _apply_qt(y: np.ndarray) -> np.ndarray:
    """Sparse ``Q^T y`` (plain transpose, no conjugation)."""
    n = y.size // 2
    out = np.empty(2 * n, dtype=complex)
    out[0] = y[0]
    out[2 * n - 1] = y[n]
    if n > 1:
        out[1:n] = _SQRT_HALF * (y[1:n] + y[2 * n - 1:n:-1])
        out[n:2 * n - 1] = 1j * _SQRT_HALF * (y[1:n] - y[2 * n - 1:n:-1])
    return out


def _take_real(v: np.ndarray, what: str) -> np.ndarray:
    re = v.real
    # max-norm: a 2-norm would underflow for tiny but valid inputs
    if v.size and np.abs(v.imag).max() > EPS_IMAG * np.abs(re).max():
        raise ImaginaryLeak(f"{what}: imaginary residue exceeds tolerance")
    return np.ascontiguousarray(re)


def _check_latent(z, grid: GridSpec) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (2 * grid.n_steps,):
        raise InvalidParameter(f"latent vector must have length {2 * grid.n_steps}, got {z.shape}")
    return z


def _scaled_transform(z, scale, grid, what):
    y = np.fft.fft(scale * _apply_q(z), norm="ortho")
    return _take_real(y[:grid.n_steps], what)


def davies_harte_map(z, hurst, grid: GridSpec, pad: str = "autocov") -> np.ndarray:
    """Increments ``delta^H [P Lambda^{1/2} Q z]_{0..N-1}`` of fBm on ``grid``."""
    z = _check_latent(z, grid)
    spec = circulant_spectrum(grid.n_steps, hurst, pad)
    out = _scaled_transform(z, spec.sqrt_lambdas, grid, "davies_harte_map")
    return grid.mesh ** spec.hurst * out


def davies_harte_adjoint(w, hurst, grid: GridSpec, pad: str = "autocov") -> np.ndarray:
    """Transpose of :func:`davies_harte_map` applied to ``w`` (length ``N``)."""
    w = np.asarray(w, dtype=float)
    n = grid.n_steps
    if w.shape != (n,):
        raise InvalidParameter(f"adjoint input must have length {n}, got {w.shape}")
    spec = circulant_spectrum(n, hurst, pad)
    padded = np.zeros(2 * n, dtype=complex)
    padded[:n] = w
    y = spec.sqrt_lambdas * np.fft.fft(padded, norm="ortho")
    return grid.mesh ** spec.hurst * _take_real(_apply_qt(y), "davies_harte_adjoint")


def davies_harte_map_dH(z, hurst, grid: GridSpec, pad: str = "autocov"):
    """``(davies_harte_map, davies_harte_dH)`` sharing one transform of ``z``."""
    z = _check_latent(z, grid)
    spec = circulant_spectrum(grid.n_steps, hurst, pad)
    if spec.lambdas.min() <= EPS_POS:
        raise SpectrumNearZero(
            f"eigenvalue {spec.lambdas.min():.3e} too small to differentiate sqrt(lambda)")
    sqrt_lam = spec.sqrt_lambdas
    qz = _apply_q(z)
    y = np.fft.fft(np.stack([sqrt_lam * qz, (0.5 * spec.dlambdas / sqrt_lam) * qz]),
                   norm="ortho", axis=1)
    n = grid.n_steps
    base = _take_real(y[0, :n], "davies_harte_map")
    dsqrt = _take_real(y[1, :n], "davies_harte_dH")
    scale = grid.mesh ** spec.hurst
    db = scale * base
    return db, np.log(grid.mesh) * db + scale * dsqrt


def davies_harte_dH(z, hurst, grid: GridSpec, pad: str = "autocov") -> np.ndarray:
    """Partial derivative of :func:`davies_harte_map` in ``H`` at fixed ``z``."""
    return davies_harte_map_dH(z, hurst, grid, pad)[1]


def toeplitz_cov_dense(n: int, hurst, delta: float) -> np.ndarray:
    """Dense covariance ``delta^{2H} g(|i-j|)`` of ``n`` fGn increments."""
    lags = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return delta ** (2.0 * check_hurst(hurst)) * fgn_autocov(lags, hurst)


def dense_map_matrix(hurst, grid: GridSpec, pad: str = "autocov") -> np.ndarray:
    """The ``N x 2N`` matrix of :func:`davies_harte_map`, column by column."""
    eye = np.eye(2 * grid.n_steps)
    return np.column_stack([davies_harte_map(e, hurst, grid, pad) for e in eye])


def sample_fgn(hurst, grid: GridSpec, rng=None):
    """Draw ``(z, dB)`` with ``z ~ N(0, I_{2N})`` and ``dB`` its fGn image."""
    rng = np.random.default_rng(rng)
    z = rng.standard_normal(2 * grid.n_steps)
    return z, davies_harte_map(z, hurst, grid)
