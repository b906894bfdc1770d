"""Time stepping for the Galerkin wave system and its parabolic companion.

Modal form of the damped wave equation on span{e_k}:

    u' = v,    v' = -Lam u - sigma(t) v - P_N g(u) + P_N h,    sigma = J(||v||^2).

The damping coefficient is one scalar shared by every mode, so each implicit
step is solved as an outer scalar equation for sigma wrapped around an inner
modal solve at frozen sigma.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse.linalg as spla

from .model_library import DampingLaw, Model, constants_of, eval_damping
from .spectral_core import ModalState, energy_norm

log = logging.getLogger(__name__)

SCHEMES = ("implicit_midpoint", "semi_implicit_exponential")


class IntegrationError(RuntimeError):
    def __init__(self, msg, time=None):
        super().__init__(msg if time is None else f"{msg} (t={time:.6g})")
        self.time = time


class ScalarSolveFailed(IntegrationError):
    pass


class NonlinearSolveFailed(IntegrationError):
    pass


class NonFiniteState(IntegrationError):
    pass


@dataclass
class IntegratorConfig:
    scheme: str = "implicit_midpoint"
    dt: float = 1e-3
    scalar_tol: float = 1e-12
    scalar_max_iter: int = 100
    linear_test_mode: bool = False
    linear_gamma: float = 0.0
    inner_tol: float = 1e-13
    inner_max_sweeps: int = 50
    growth_guard: float = 10.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; valid: {', '.join(SCHEMES)}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.scalar_tol > 0:
            raise ValueError("scalar_tol must be positive")
        if self.scalar_max_iter < 1 or self.inner_max_sweeps < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.linear_gamma < 0:
            raise ValueError("linear_gamma must be >= 0")

    def effective_model(self, model: Model) -> Model:
        return model.linearized(self.linear_gamma) if self.linear_test_mode else model


@dataclass
class Trajectory:
    model: Model
    cfg: IntegratorConfig
    times: np.ndarray
    u: np.ndarray  # (samples, *shape)
    v: np.ndarray
    sigma: np.ndarray  # per step
    dissipation: np.ndarray  # per step increment 2 sigma ||v_mid||^2 dt
    sample_steps: np.ndarray

    @property
    def domain(self):
        return self.model.domain

    def __len__(self):
        return len(self.times)

    def state(self, i: int) -> ModalState:
        return ModalState(self.u[i], self.v[i], float(self.times[i]))

    def states(self):
        return [self.state(i) for i in range(len(self))]

    @property
    def final(self) -> ModalState:
        return self.state(-1)

    @property
    def cumulative_dissipation(self) -> np.ndarray:
        """D(t) at each sample time."""
        D = np.concatenate([[0.0], np.cumsum(self.dissipation)])
        return D[self.sample_steps]


# ---------------------------------------------------------------------------
# scalar damping solve


def solve_damping_scalar(candidate_map: Callable[[float], float], law, cfg: IntegratorConfig,
                         sigma0: Optional[float] = None, stats: Optional[dict] = None) -> float:
    """Solve sigma = J(m(sigma)) for a non-increasing map m.

    ``law`` is a DampingLaw or a callable ``m -> J(m)``.  Fixed-point
    iteration from ``sigma0`` first; if it does not contract, the root of the
    increasing function ``sigma - J(m(sigma))`` is bracketed by
    ``[J(0), J(m(J(0)))]`` and found with a bisection-safeguarded solver.
    """
    if stats is None:
        stats = {}
    stats["iterations"] = 0
    stats["bracketed"] = False
    if isinstance(law, DampingLaw):
        if law.kind == "constant":
            return law.params["gamma"]
        J = lambda m: eval_damping(law, m)[0]  # noqa: E731
    else:
        J = law
    tol = cfg.scalar_tol
    sigma = J(0.0) if sigma0 is None else float(sigma0)
    prev_inc = np.inf
    for it in range(cfg.scalar_max_iter):
        new = J(candidate_map(sigma))
        stats["iterations"] = it + 1
        inc = abs(new - sigma)
        if not np.isfinite(new):
            break
        if inc <= tol * (1.0 + new):
            return sigma
        if it >= 3 and inc > 0.7 * prev_inc:
            break
        prev_inc = inc
        sigma = new

    stats["bracketed"] = True
    phi = lambda s: s - J(candidate_map(s))  # noqa: E731
    lo = J(0.0)
    f_lo = phi(lo)
    if f_lo >= 0:
        if abs(f_lo) <= tol * (1.0 + lo):
            return lo
        raise ScalarSolveFailed("damping scalar bracket failed at J(0); is J increasing?")
    hi = lo - f_lo  # = J(m(J(0)))
    f_hi = phi(hi)
    if f_hi < 0:
        raise ScalarSolveFailed("damping scalar bracket failed; candidate map not non-increasing?")
    if f_hi == 0:
        return hi
    try:
        root = scipy.optimize.brentq(phi, lo, hi, xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps,
                                     maxiter=max(cfg.scalar_max_iter, 200))
    except (RuntimeError, ValueError) as exc:
        raise ScalarSolveFailed(f"damping scalar solve failed: {exc}") from exc
    # re-evaluate so the caller's warm-start cache holds the root's inner solution
    candidate_map(root)
    return root


# ---------------------------------------------------------------------------
# one step


@dataclass
class _StepResult:
    state: ModalState
    sigma: float
    dissipation: float
    stats: dict = field(default_factory=dict)


def _damping_law(model: Model):
    if model.linear:
        return DampingLaw.constant(model.gamma) if model.gamma > 0 else (lambda m: 0.0)
    return model.damping


class _MidpointSolve:
    """Inner solve of the implicit midpoint system at frozen sigma.

    Unknown is the midpoint velocity w = (v0 + v1)/2, with u_mid = u0 + dt/2 w:

        (1 + dt sigma/2 + dt^2/4 Lam) w = v0 + dt/2 (h - Lam u0 - P g(u0 + dt/2 w)).
    """

    def __init__(self, state: ModalState, model: Model, cfg: IntegratorConfig):
        self.model = model
        self.cfg = cfg
        self.u0, self.v0 = state.u, state.v
        self.dt = cfg.dt
        lam = model.domain.eigenvalues
        self.lam = lam
        self.base = self.v0 + 0.5 * self.dt * (model.forcing - lam * self.u0)
        self.w = self.v0.copy()
        self.sweeps = 0

    def _fixed_point_rhs(self, w):
        um = self.u0 + 0.5 * self.dt * w
        return self.base - 0.5 * self.dt * self.model.source(um)

    def __call__(self, sigma: float) -> float:
        dt = self.dt
        diag = 1.0 + 0.5 * dt * sigma + 0.25 * dt * dt * self.lam
        w = self.w
        if not self.model.has_source:
            w = self.base / diag
            self.w = w
            return float(np.sum(w * w))
        tol = self.cfg.inner_tol
        scale = lambda x: np.sqrt(np.sum(self.lam * x * x))  # noqa: E731
        prev = np.inf
        converged = False
        for _ in range(self.cfg.inner_max_sweeps):
            new = self._fixed_point_rhs(w) / diag
            inc = scale(new - w)
            w = new
            self.sweeps += 1
            if not np.all(np.isfinite(w)):
                raise NonlinearSolveFailed("midpoint fixed-point produced non-finite values")
            if inc <= tol * max(1.0, scale(w)):
                converged = True
                break
            if inc > 0.5 * prev:
                break
            prev = inc
        if not converged:
            w = self._newton(w, diag)
        self.w = w
        return float(np.sum(w * w))

    def _newton(self, w, diag):
        dt = self.dt
        tol = self.cfg.inner_tol
        shape = w.shape
        for _ in range(self.cfg.inner_max_sweeps):
            um = self.u0 + 0.5 * dt * w
            F = diag * w - self._fixed_point_rhs(w)
            jac = self.model.source_jacobian(um)
            op = spla.LinearOperator(
                (w.size, w.size),
                matvec=lambda x: (diag * x.reshape(shape) + 0.25 * dt * dt * jac(x.reshape(shape))).ravel(),
                dtype=float,
            )
            pre = spla.LinearOperator((w.size, w.size), matvec=lambda x: (x.reshape(shape) / diag).ravel(),
                                      dtype=float)
            delta, info = spla.minres(op, -F.ravel(), M=pre, rtol=1e-14, maxiter=10 * w.size)
            if info < 0 or not np.all(np.isfinite(delta)):
                raise NonlinearSolveFailed("midpoint Newton linear solve broke down")
            delta = delta.reshape(shape)
            w = w + delta
            self.sweeps += 1
            if np.sqrt(np.sum(self.lam * delta * delta)) <= tol * max(1.0, np.sqrt(np.sum(self.lam * w * w))):
                return w
        raise NonlinearSolveFailed("midpoint Newton did not converge")


def _joint_iteration(solver: _MidpointSolve, J, cfg: IntegratorConfig, sigma0) -> Optional[float]:
    """Fixed-point sweeps on (w, sigma) together; None if they do not contract."""
    dt = cfg.dt
    lam = solver.lam
    w = solver.w
    sigma = J(0.0) if sigma0 is None else sigma0
    tol = cfg.inner_tol
    prev = np.inf
    for _ in range(cfg.inner_max_sweeps):
        diag = 1.0 + 0.5 * dt * sigma + 0.25 * dt * dt * lam
        new = solver._fixed_point_rhs(w) / diag
        d = new - w
        inc = np.sqrt(d.ravel() @ (lam * d).ravel())
        w = new
        m = float(w.ravel() @ w.ravel())
        s_new = J(m)
        solver.sweeps += 1
        s_inc = abs(s_new - sigma)
        if not np.isfinite(inc) or not np.isfinite(s_new):
            return None
        if inc <= tol * max(1.0, np.sqrt(w.ravel() @ (lam * w).ravel())) and s_inc <= cfg.scalar_tol * (1.0 + sigma):
            # sigma consistent with the w just computed from it
            solver.w = w
            return sigma
        if inc + s_inc > 0.5 * prev:
            return None
        prev = inc + s_inc
        sigma = s_new
    return None


def _midpoint(state: ModalState, model: Model, cfg: IntegratorConfig, sigma0) -> _StepResult:
    solver = _MidpointSolve(state, model, cfg)
    stats = {}
    law = _damping_law(model)
    if model.has_source and isinstance(law, DampingLaw) and law.kind != "constant":
        J = lambda m: eval_damping(law, m)[0]  # noqa: E731
        sigma = _joint_iteration(solver, J, cfg, sigma0)
        if sigma is not None:
            w = solver.w
            dt = cfg.dt
            stats["sweeps"] = solver.sweeps
            return _StepResult(ModalState(state.u + dt * w, 2.0 * w - state.v, state.t + dt), sigma,
                               2.0 * sigma * float(np.sum(w * w)) * dt, stats)
        solver = _MidpointSolve(state, model, cfg)
    sigma = solve_damping_scalar(solver, _damping_law(model), cfg, sigma0=sigma0, stats=stats)
    if stats["iterations"] == 0:
        solver(sigma)
    w = solver.w
    dt = cfg.dt
    u1 = state.u + dt * w
    v1 = 2.0 * w - state.v
    stats["sweeps"] = solver.sweeps
    return _StepResult(ModalState(u1, v1, state.t + dt), sigma, 2.0 * sigma * float(np.sum(w * w)) * dt, stats)


def _oscillator_propagator(lam, sigma, dt):
    """Coefficients of the exact flow of w'' + sigma w' + lam w = 0 over dt.

    Returns (c, s, decay) with  w(dt) = decay (w0 c + (w0' + sigma/2 w0) s),
    w'(dt) = decay (w0' c - (sigma/2 w0' + lam w0) s).
    """
    a = 0.5 * sigma
    om2 = lam - a * a
    om = np.sqrt(np.abs(om2))
    x = om * dt
    pos = om2 >= 0
    small = x < 1e-8
    safe = np.where(small, 1.0, om)
    # both branches are evaluated; overflow in the unused one is harmless
    with np.errstate(over="ignore", invalid="ignore"):
        c = np.where(pos, np.cos(x), np.cosh(x))
        s = np.where(pos, np.sin(x), np.sinh(x)) / safe
    s = np.where(small, dt, s)
    return c, s, np.exp(-a * dt)


class _ExponentialSolve:
    def __init__(self, state: ModalState, model: Model, cfg: IntegratorConfig):
        self.state = state
        self.model = model
        self.dt = cfg.dt
        self.lam = model.domain.eigenvalues
        f = model.forcing - model.source(state.u)
        self.particular = f / self.lam
        self.u1 = self.v1 = None

    def __call__(self, sigma: float) -> float:
        c, s, d = _oscillator_propagator(self.lam, sigma, self.dt)
        w0 = self.state.u - self.particular
        p0 = self.state.v
        a = 0.5 * sigma
        # a blown-up state gives non-finite values here, caught by the step's finiteness check
        with np.errstate(over="ignore", invalid="ignore"):
            self.u1 = self.particular + d * (w0 * c + (p0 + a * w0) * s)
            self.v1 = d * (p0 * c - (a * p0 + self.lam * w0) * s)
            vm = 0.5 * (self.v1 + p0)
            return float(np.sum(vm * vm))


def _exponential(state: ModalState, model: Model, cfg: IntegratorConfig, sigma0) -> _StepResult:
    solver = _ExponentialSolve(state, model, cfg)
    stats = {}
    sigma = solve_damping_scalar(solver, _damping_law(model), cfg, sigma0=sigma0, stats=stats)
    m = solver(sigma)
    return _StepResult(ModalState(solver.u1, solver.v1, state.t + cfg.dt), sigma, 2.0 * sigma * m * cfg.dt, stats)


def _advance(state: ModalState, model: Model, cfg: IntegratorConfig, sigma0=None) -> _StepResult:
    if cfg.scheme == "implicit_midpoint":
        res = _midpoint(state, model, cfg, sigma0)
    else:
        res = _exponential(state, model, cfg, sigma0)
    new = res.state
    if not (np.all(np.isfinite(new.u)) and np.all(np.isfinite(new.v))):
        raise NonFiniteState("non-finite state", state.t)
    e_old = energy_norm(model.domain, state)
    e_new = energy_norm(model.domain, new)
    if e_new > cfg.growth_guard * e_old and e_new > 1e-6:
        raise NonFiniteState(
            f"energy norm grew from {e_old:.3g} to {e_new:.3g} in one step; reduce dt", state.t
        )
    return res


def step(state: ModalState, model: Model, cfg: IntegratorConfig) -> ModalState:
    """Advance one time step of size ``cfg.dt``."""
    return _advance(state, cfg.effective_model(model), cfg).state


# ---------------------------------------------------------------------------
# trajectories


def integrate(state0: ModalState, model: Model, cfg: IntegratorConfig, horizon: float, stride: int = 1,
              observers: Sequence[Callable] = ()) -> Trajectory:
    """Integrate to ``horizon`` and sample every ``stride`` steps.

    Observers are called as ``obs(step_index, time, state, sigma, dissipation_increment)``
    at each sample (sigma is nan at step 0).
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    model = cfg.effective_model(model)
    nsteps = int(round(horizon / cfg.dt))
    if abs(nsteps * cfg.dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not a multiple of dt {cfg.dt}")
    sample_steps = list(range(0, nsteps + 1, stride))
    if sample_steps[-1] != nsteps:
        sample_steps.append(nsteps)
    ns = len(sample_steps)
    shape = model.domain.shape
    U = np.empty((ns,) + shape)
    V = np.empty((ns,) + shape)
    T = np.empty(ns)
    sig = np.empty(nsteps)
    diss = np.empty(nsteps)
    state = ModalState(np.array(state0.u, dtype=float), np.array(state0.v, dtype=float), float(state0.t))
    t0 = state.t
    U[0], V[0], T[0] = state.u, state.v, t0
    for obs in observers:
        obs(0, t0, state, float("nan"), 0.0)
    j = 1
    sigma = None
    for n in range(nsteps):
        try:
            res = _advance(state, model, cfg, sigma)
        except IntegrationError as exc:
            if exc.time is None:
                exc.time = state.t
            raise
        state = res.state
        # recompute time from the step count to avoid drift
        state.t = t0 + (n + 1) * cfg.dt
        sigma = res.sigma
        sig[n] = res.sigma
        diss[n] = res.dissipation
        if j < ns and sample_steps[j] == n + 1:
            U[j], V[j], T[j] = state.u, state.v, state.t
            for obs in observers:
                obs(n + 1, state.t, state, res.sigma, res.dissipation)
            j += 1
    return Trajectory(model, cfg, T, U, V, sig, diss, np.asarray(sample_steps))


# ---------------------------------------------------------------------------
# parabolic companion


def default_ell(model: Model) -> float:
    return 4.0 * constants_of(model.nonlinearity)["kappa1"] ** 2


def parabolic_integrate(z0: np.ndarray, model: Model, ell: Optional[float], hhat: np.ndarray,
                        cfg: IntegratorConfig, horizon: float, stride: int = 1):
    """Integrate z' = Lap z - ell (-Lap)^{-1} z - g(z) + hhat.

    Linear part is exact per mode (exponential Euler); the implicit equation
    z1 = E z0 + phi (hhat - P g(z1)) gets one Newton correction per step from
    the explicit predictor.  Returns ``(times, fields)``.
    """
    if ell is None:
        ell = default_ell(model)
    if not ell > 0:
        raise ValueError("ell must be positive")
    lam = model.domain.eigenvalues
    L = lam + ell / lam
    dt = cfg.dt
    E = np.exp(-L * dt)
    phi = -np.expm1(-L * dt) / L
    nsteps = int(round(horizon / dt))
    z = np.array(z0, dtype=float)
    hhat = np.asarray(hhat, dtype=float)
    times, out = [0.0], [z.copy()]
    shape = z.shape
    src = model.has_source and not cfg.linear_test_mode
    for n in range(nsteps):
        lin = E * z + phi * hhat
        if not src:
            z = lin
        else:
            pred = lin - phi * model.source(z)
            R = pred - lin + phi * model.source(pred)
            jac = model.source_jacobian(pred)
            # symmetric form: (phi^{-1} + P g'(z)) delta = -phi^{-1} R
            op = spla.LinearOperator((z.size, z.size),
                                     matvec=lambda x: (x.reshape(shape) / phi + jac(x.reshape(shape))).ravel(),
                                     dtype=float)
            delta, info = spla.minres(op, -(R / phi).ravel(), rtol=1e-14, maxiter=10 * z.size)
            if info < 0:
                raise NonlinearSolveFailed("parabolic Newton correction broke down", n * dt)
            z = pred + delta.reshape(shape)
        if not np.all(np.isfinite(z)):
            raise NonFiniteState("non-finite parabolic state", (n + 1) * dt)
        if (n + 1) % stride == 0 or n + 1 == nsteps:
            times.append((n + 1) * dt)
            out.append(z.copy())
    return np.asarray(times), out


__all__ = [
    "IntegratorConfig",
    "Trajectory",
    "IntegrationError",
    "ScalarSolveFailed",
    "NonlinearSolveFailed",
    "NonFiniteState",
    "solve_damping_scalar",
    "step",
    "integrate",
    "parabolic_integrate",
    "default_ell",
]
