"""Hybrid Monte Carlo over the latent normals ``z`` and parameters ``u``.

Two integrators share one driver:

* ``standard`` -- the leapfrog scheme for ``dx/dt = v``,
  ``dv/dt = -(z, 0) - M^{-1} grad phi``;
* ``advanced`` -- the splitting ``kick(h/2) . rotate(h) . kick(h/2)``, where
  the rotation solves the Gaussian part ``(z, v_z)`` exactly and drifts
  ``u``.  Its acceptance rate does not degrade as the grid is refined.

Models expose ``dim_z``, ``dim_u`` and ``potential(z, u)`` returning
``(phi, grad_z, grad_u)``.  Numerical errors raised by a model during a
trajectory reject the proposal.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidParameter, NonFiniteState, NumericalError

logger = logging.getLogger(__name__)

VARIANTS = ("standard", "advanced")
UPDATE_MODES = ("joint", "gibbs")


@dataclass(frozen=True)
class MassMatrix:
    """Block mass matrix ``diag(I_{2N}, A)``; only ``A``'s diagonal is stored."""

    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim != 1 or not np.all(a > 0) or not np.all(np.isfinite(a)):
            raise InvalidParameter("mass diagonal must be positive and finite")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @classmethod
    def identity(cls, q: int) -> "MassMatrix":
        return cls(np.ones(q))


@dataclass(frozen=True)
class PhaseState:
    z: np.ndarray
    u: np.ndarray
    vz: np.ndarray
    vu: np.ndarray

    def flip(self) -> "PhaseState":
        return PhaseState(self.z, self.u, -self.vz, -self.vu)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.z, self.u, self.vz, self.vu))


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.1
    horizon: float = 1.0
    variant: str = "advanced"
    update_mode: str = "joint"
    n_iterations: int = 1000
    thin: int = 1
    seed: Optional[int] = 0

    def __post_init__(self):
        if not self.step_size > 0 or not self.horizon > 0:
            raise InvalidParameter("step_size and horizon must be positive")
        if self.variant not in VARIANTS:
            raise InvalidParameter(f"variant must be one of {VARIANTS}")
        if self.update_mode not in UPDATE_MODES:
            raise InvalidParameter(f"update_mode must be one of {UPDATE_MODES}")
        if self.n_leapfrog < 1:
            raise InvalidParameter("horizon / step_size must allow at least one step")
        if self.n_iterations < 0 or self.thin < 1:
            raise InvalidParameter("n_iterations must be >= 0 and thin >= 1")

    @property
    def n_leapfrog(self) -> int:
        # guard against T/h landing a hair below an integer
        return int(math.floor(self.horizon / self.step_size + 1e-9))

    def replace(self, **changes) -> "HmcConfig":
        return replace(self, **changes)


@dataclass
class Potential:
    """Cached ``phi`` and gradient at a position."""

    value: float
    gz: np.ndarray
    gu: np.ndarray


def evaluate(model, z, u) -> Potential:
    value, gz, gu = model.potential(z, u)
    if not (np.isfinite(value) and np.all(np.isfinite(gz)) and np.all(np.isfinite(gu))):
        raise NonFiniteState("potential or gradient is not finite")
    return Potential(float(value), gz, gu)


def energy(state: PhaseState, m: MassMatrix, phi_value: float) -> float:
    """Total energy ``phi + |z|^2/2 + <v, M v>/2``."""
    return float(phi_value + 0.5 * (state.z @ state.z) + 0.5 * (state.vz @ state.vz)
                 + 0.5 * np.sum(m.a * state.vu * state.vu))


def xi_half(state: PhaseState, h: float, m: MassMatrix, grad, blocks=(True, True)) -> PhaseState:
    """Kick ``v <- v - (h/2) M^{-1} grad phi`` with position fixed."""
    gz, gu = grad
    vz = state.vz - 0.5 * h * gz if blocks[0] else state.vz
    vu = state.vu - 0.5 * h * gu / m.a if blocks[1] else state.vu
    return PhaseState(state.z, state.u, vz, vu)


def xi_tilde(state: PhaseState, t: float, blocks=(True, True)) -> PhaseState:
    """Exact flow of the Gaussian part: rotate ``(z, v_z)``, drift ``u``."""
    z, vz, u = state.z, state.vz, state.u
    if blocks[0]:
        c, s = math.cos(t), math.sin(t)
        z, vz = c * state.z + s * state.vz, -s * state.z + c * state.vz
    if blocks[1]:
        u = state.u + t * state.vu
    return PhaseState(z, u, vz, state.vu)


def _standard_half_kick(state, h, m, pot, blocks):
    vz = state.vz - 0.5 * h * (state.z + pot.gz) if blocks[0] else state.vz
    vu = state.vu - 0.5 * h * pot.gu / m.a if blocks[1] else state.vu
    return PhaseState(state.z, state.u, vz, vu)


def leapfrog_standard(state: PhaseState, h: float, m: MassMatrix, model, pot: Potential,
                      blocks=(True, True)):
    """One leapfrog step; ``pot`` is the potential at ``state``'s position."""
    s = _standard_half_kick(state, h, m, pot, blocks)
    z = s.z + h * s.vz if blocks[0] else s.z
    u = s.u + h * s.vu if blocks[1] else s.u
    s = PhaseState(z, u, s.vz, s.vu)
    if not s.is_finite():
        raise NonFiniteState("leapfrog produced a non-finite position")
    new = evaluate(model, s.z, s.u)
    return _standard_half_kick(s, h, m, new, blocks), new


def psi_step(state: PhaseState, h: float, m: MassMatrix, model, pot: Potential,
             blocks=(True, True)):
    """One step of the split integrator ``Xi_{h/2} . Xi~_h . Xi_{h/2}``."""
    s = xi_half(state, h, m, (pot.gz, pot.gu), blocks)
    s = xi_tilde(s, h, blocks)
    if not s.is_finite():
        raise NonFiniteState("split step produced a non-finite position")
    new = evaluate(model, s.z, s.u)
    return xi_half(s, h, m, (new.gz, new.gu), blocks), new


STEPPERS = {"standard": leapfrog_standard, "advanced": psi_step}


def integrate(state: PhaseState, pot: Potential, h: float, n_steps: int, m: MassMatrix, model,
              variant: str = "advanced", blocks=(True, True)):
    """Compose ``n_steps`` integrator steps; one gradient evaluation per step."""
    step = STEPPERS[variant]
    for _ in range(n_steps):
        state, pot = step(state, h, m, model, pot, blocks)
    if not state.is_finite():
        raise NonFiniteState("trajectory ended in a non-finite state")
    return state, pot


def _draw_velocity(rng, z, u, m, blocks):
    vz = rng.standard_normal(z.size) if blocks[0] else np.zeros(z.size)
    vu = rng.standard_normal(u.size) / np.sqrt(m.a) if blocks[1] else np.zeros(u.size)
    return vz, vu


@dataclass
class StepResult:
    z: np.ndarray
    u: np.ndarray
    pot: Potential
    accepted: bool
    delta_h: float


def hmc_iteration(z, u, pot: Potential, config: HmcConfig, m: MassMatrix, model, rng,
                  blocks=(True, True)) -> StepResult:
    """One accept/reject transition from position ``(z, u)``.

    ``pot`` must hold the potential at ``(z, u)``; the returned potential
    belongs to the returned position, so it can be passed straight back in.
    """
    vz, vu = _draw_velocity(rng, z, u, m, blocks)
    start = PhaseState(z, u, vz, vu)
    h0 = energy(start, m, pot.value)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            end, new = integrate(start, pot, config.step_size, config.n_leapfrog, m, model,
                                 config.variant, blocks)
        delta_h = energy(end, m, new.value) - h0
        if not np.isfinite(delta_h):
            raise NonFiniteState("energy difference is not finite")
    except NumericalError as exc:
        logger.debug("proposal rejected: %s", exc)
        rng.uniform()  # keep the random stream aligned with accepted paths
        return StepResult(z, u, pot, False, math.inf)
    accept = math.log(rng.uniform()) < -delta_h
    if accept:
        return StepResult(end.z, end.u, new, True, delta_h)
    return StepResult(z, u, pot, False, delta_h)


def monitor_indices(dim_z: int, max_series: int = 64) -> np.ndarray:
    """Stratified subset of latent coordinates tracked at every iteration."""
    stride = max(1, math.ceil(dim_z / max_series))
    return np.arange(0, dim_z, stride)


@dataclass
class ChainOutput:
    """Recorded draws of one chain.

    ``accept`` and ``delta_h`` have one column per update block: one for
    joint updates, two (path, parameters) for Gibbs updates.
    """

    theta: np.ndarray
    u: np.ndarray
    accept: np.ndarray
    delta_h: np.ndarray
    timing: np.ndarray
    z_monitor: np.ndarray
    monitor_index: np.ndarray
    config: HmcConfig
    mass: MassMatrix
    z_draws: Optional[np.ndarray] = None
    init_z: Optional[np.ndarray] = None
    init_u: Optional[np.ndarray] = None
    final_z: Optional[np.ndarray] = None
    n_grad: int = 0
    dataset_id: str = ""
    param_names: tuple = field(default=("mu", "kappa", "mu_x", "sigma_x", "hurst", "rho", "x0"))

    @property
    def n_iterations(self) -> int:
        return self.theta.shape[0]

    @property
    def acceptance_rate(self) -> float:
        if self.accept.size == 0:
            return float("nan")
        return float(self.accept.mean())

    @property
    def acceptance_prob(self) -> float:
        """Mean Metropolis probability ``min(1, exp(-dH))``; less noisy than the rate."""
        if self.delta_h.size == 0:
            return float("nan")
        with np.errstate(over="ignore"):
            return float(np.minimum(1.0, np.exp(-self.delta_h)).mean())

    @property
    def seconds_per_iteration(self) -> float:
        return float(self.timing.mean()) if self.timing.size else float("nan")

    @property
    def leapfrogs_per_iteration(self) -> int:
        return self.config.n_leapfrog * self.accept.shape[1]


def _blocks_for(mode: str):
    if mode == "joint":
        return [(True, True)]
    return [(True, False), (False, True)]


def run_chain(model, config: HmcConfig, m: Optional[MassMatrix] = None, init=None,
              rng=None, keep_z: bool = False, callback=None) -> ChainOutput:
    """Run ``config.n_iterations`` HMC transitions.

    ``init`` is ``(z0, u0)``; by default ``z0 ~ N(0, I)`` and ``u0`` is the
    prior centre when the model has one, else zero.  ``rng`` overrides the
    generator seeded from ``config.seed``.  With ``keep_z`` every
    ``config.thin``-th latent vector is stored.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    m = m or MassMatrix.identity(model.dim_u)
    if m.a.size != model.dim_u:
        raise InvalidParameter("mass diagonal length does not match the parameter dimension")
    if init is None:
        z0 = rng.standard_normal(model.dim_z)
        prior = getattr(model, "prior", None)
        u0 = prior.center().to_unconstrained() if prior is not None else np.zeros(model.dim_u)
    else:
        z0, u0 = (np.array(a, dtype=float) for a in init)
    if z0.shape != (model.dim_z,) or u0.shape != (model.dim_u,):
        raise InvalidParameter("initial state has the wrong shape")

    n_it = config.n_iterations
    blocks_list = _blocks_for(config.update_mode)
    n_blocks = len(blocks_list)
    mon = monitor_indices(model.dim_z)
    thetas = np.empty((n_it, model.dim_u))
    us = np.empty((n_it, model.dim_u))
    accept = np.zeros((n_it, n_blocks), dtype=bool)
    delta_h = np.zeros((n_it, n_blocks))
    timing = np.zeros(n_it)
    z_mon = np.empty((n_it, mon.size))
    z_keep = [] if keep_z else None
    to_theta = getattr(model, "transform", None)

    z, u = z0.copy(), u0.copy()
    pot = evaluate(model, z, u)
    n_grad = 1
    for i in range(n_it):
        t0 = time.perf_counter()
        for b, blocks in enumerate(blocks_list):
            res = hmc_iteration(z, u, pot, config, m, model, rng, blocks)
            z, u, pot = res.z, res.u, res.pot
            accept[i, b] = res.accepted
            delta_h[i, b] = res.delta_h
            n_grad += config.n_leapfrog
        timing[i] = time.perf_counter() - t0
        us[i] = u
        thetas[i] = to_theta(u).as_array() if to_theta is not None else u
        z_mon[i] = z[mon]
        if keep_z and (i + 1) % config.thin == 0:
            z_keep.append(z.copy())
        if callback is not None:
            callback(i, z, u, accept[i])
    data = getattr(model, "data", None)
    names = getattr(model, "param_names", tuple(f"u{j}" for j in range(model.dim_u)))
    return ChainOutput(
        theta=thetas, u=us, accept=accept, delta_h=delta_h, timing=timing,
        z_monitor=z_mon, monitor_index=mon, config=config, mass=m,
        z_draws=np.array(z_keep).reshape(-1, model.dim_z) if keep_z else None,
        init_z=z0, init_u=u0, final_z=z, n_grad=n_grad,
        dataset_id=data.fingerprint() if data is not None else "",
        param_names=tuple(names),
    )


def estimate_mass_diagonal(chain: ChainOutput, burn_in: float = 0.2, floor: float = 1e-8,
                           cap: float = 1e8) -> MassMatrix:
    """Inverse marginal posterior variances of ``u`` from a pilot chain."""
    start = int(burn_in * chain.n_iterations)
    draws = chain.u[start:]
    if draws.shape[0] < 2:
        raise InvalidParameter("pilot chain too short to estimate variances")
    var = draws.var(axis=0, ddof=1)
    return MassMatrix(np.clip(1.0 / np.maximum(var, floor), 1.0 / cap, cap))


def mean_curvature(model, chain: ChainOutput, burn_in: float = 0.3, n_points: int = 20):
    """Hessian diagonal of ``phi`` in ``u``, averaged over stored pilot draws.

    Needs a chain run with ``keep_z=True`` and ``thin=1``.
    """
    if chain.z_draws is None or chain.z_draws.shape[0] != chain.n_iterations:
        raise InvalidParameter("mean_curvature needs every latent draw (keep_z=True, thin=1)")
    start = int(burn_in * chain.n_iterations)
    if chain.n_iterations - start < 1:
        raise InvalidParameter("pilot chain too short to estimate curvature")
    picks = np.unique(np.linspace(start, chain.n_iterations - 1, n_points).astype(int))
    return np.mean([hessian_diagonal(model, chain.z_draws[i], chain.u[i]) for i in picks], axis=0)


def pilot_mass(model, chain: ChainOutput, burn_in: float = 0.3, omega: Optional[float] = 40.0,
               n_points: int = 20) -> MassMatrix:
    """Inverse marginal variances, raised where the local curvature is much larger.

    With ``a_i = 1/var_i`` a coordinate oscillates at ``sqrt(H_ii var_i)``,
    which in strongly coupled posteriors (marginal spread far wider than the
    conditional one) can exceed the step-size stability limit.  Raising
    ``a_i`` to ``H_ii / omega**2`` caps that frequency at ``omega``.

    The mass is also capped at ``H_ii`` (frequency 1).  A healthy pilot never
    hits that cap, since marginal variance is at least the conditional one;
    a coordinate that barely moved would otherwise get a huge mass and stay
    frozen.  ``omega=None`` returns the plain variance estimate.
    """
    base = estimate_mass_diagonal(chain, burn_in)
    if omega is None:
        return base
    curv = np.maximum(mean_curvature(model, chain, burn_in, n_points), 1e-2)
    return MassMatrix(np.clip(base.a, curv / omega ** 2, np.maximum(curv, curv / omega ** 2)))


@dataclass
class Warmup:
    mass: MassMatrix
    init: tuple
    acceptance: list


def warmup(model, config: HmcConfig, init=None, rng=None, n_pilot: int = 200, passes: int = 2,
           omega: Optional[float] = 40.0, pilot_step_size: Optional[float] = None,
           pilot_horizon: Optional[float] = None, min_acceptance: float = 0.25) -> Warmup:
    """Pilot runs that set the parameter mass before sampling.

    The first pass starts from the curvature at ``init``; each pass then
    re-estimates the mass with :func:`pilot_mass` and continues from the
    previous pass's final state.  A pass accepting less than
    ``min_acceptance`` says little about the posterior spread: the mass is
    reset to the curvature at its final state and the next pass halves its
    step.  Pilots run at ``pilot_step_size`` and ``pilot_horizon``, which
    default to the sampler's own.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if init is None:
        z0 = rng.standard_normal(model.dim_z)
        prior = getattr(model, "prior", None)
        u0 = prior.center().to_unconstrained() if prior is not None else np.zeros(model.dim_u)
    else:
        z0, u0 = (np.array(a, dtype=float) for a in init)
    mass = curvature_mass(model, z0, u0)
    rates = []
    h = pilot_step_size or config.step_size
    for _ in range(passes if n_pilot else 0):
        trial = config.replace(step_size=h, horizon=pilot_horizon or config.horizon,
                               n_iterations=n_pilot, thin=1)
        pilot = run_chain(model, trial, mass, init=(z0, u0), rng=rng, keep_z=True)
        rates.append(pilot.acceptance_rate)
        if rates[-1] < min_acceptance:
            mass = curvature_mass(model, pilot.final_z, pilot.u[-1])
            h *= 0.5
        else:
            mass = pilot_mass(model, pilot, omega=omega)
        z0, u0 = pilot.final_z, pilot.u[-1]
        logger.info("warmup pass: acceptance %.3f, mass %s", rates[-1], np.round(mass.a, 3))
    return Warmup(mass, (z0, u0), rates)


@dataclass
class TuneResult:
    config: HmcConfig
    acceptance: dict
    init: tuple


def autotune(model, config: HmcConfig, m: Optional[MassMatrix] = None, init=None,
             candidates=(5, 10, 15, 20, 30, 40, 50), n_pilot: int = 100,
             target=(0.70, 0.80), fix: str = "horizon") -> TuneResult:
    """Grid search over the number of steps at fixed horizon.

    Picks the first candidate whose pilot acceptance reaches the lower
    target; falls back to the candidate with the highest acceptance.  Each
    pilot continues from the previous one's final state.

    With ``fix="steps"`` the number of steps stays at ``config.n_leapfrog``
    and ``candidates`` are step sizes, tried in the order given (largest
    first is the sensible order).  The horizon then scales with the step.
    """
    if fix not in ("horizon", "steps"):
        raise InvalidParameter(f"fix must be 'horizon' or 'steps', got {fix!r}")
    n_fixed = config.n_leapfrog
    rates = {}
    state = init
    rng = np.random.default_rng(None if config.seed is None else config.seed + 7919)

    def trial_config(c):
        if fix == "horizon":
            return config.replace(step_size=config.horizon / c)
        return config.replace(step_size=c, horizon=c * (n_fixed + 0.5))

    label = "steps" if fix == "horizon" else "h"
    chosen = None
    for c in candidates:
        out = run_chain(model, trial_config(c).replace(n_iterations=n_pilot), m, state, rng=rng)
        state = (out.final_z, out.u[-1]) if n_pilot else state
        rates[c] = out.acceptance_rate
        logger.info("autotune: %s=%s -> acceptance %.3f", label, c, rates[c])
        if rates[c] >= target[0]:
            chosen = c
            break
    if chosen is None:
        chosen = max(rates, key=rates.get)
    return TuneResult(trial_config(chosen), rates, state)


def hessian_diagonal(model, z, u, step: float = 1e-4) -> np.ndarray:
    """Central differences of ``grad_u phi`` along each coordinate of ``u``."""
    u = np.asarray(u, dtype=float)
    diag = np.empty(u.size)
    for i in range(u.size):
        e = np.zeros(u.size)
        e[i] = step
        gp = model.potential(z, u + e)[2][i]
        gm = model.potential(z, u - e)[2][i]
        diag[i] = (gp - gm) / (2 * step)
    return diag


def curvature_mass(model, z, u, step: float = 1e-4, floor: float = 1.0) -> MassMatrix:
    """Mass diagonal from the Hessian diagonal of ``phi`` in ``u`` at ``(z, u)``.

    A cheap stand-in for a pilot run: near a mode it approximates the
    inverse marginal posterior variances.  Far from a mode some directions
    are flat or concave; ``floor`` keeps them from becoming nearly massless,
    which would fling those coordinates far out on the first trajectory.
    """
    return MassMatrix(np.maximum(hessian_diagonal(model, z, u, step), floor))
