"""Stationary points, their linearization, and unstable-manifold seeds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from .model_library import Model
from .random_fields import random_field
from .spectral_core import ModalState, energy_norm, hs_norm

log = logging.getLogger(__name__)

DEDUP_TOL = 1e-6
MORSE_TOL = 1e-10
_DENSE_LIMIT = 600


class SteadyStateError(RuntimeError):
    pass


class NewtonDiverged(SteadyStateError):
    pass


class JacobianSingular(SteadyStateError):
    pass


class NoUnstableDirections(SteadyStateError):
    pass


class DegenerateDamping(SteadyStateError):
    pass


@dataclass
class EigenData:
    mu: np.ndarray  # eigenvalues of the first-order system, (2n,)
    w: np.ndarray  # displacement parts of eigenvectors, (2n, *shape)
    wdot: np.ndarray  # velocity parts
    stiffness: np.ndarray  # eigenvalues of Lam + P g'(u*), (n,)
    morse_index: int
    center_count: int
    J0: float

    def unstable(self):
        idx = np.flatnonzero(self.mu.real > MORSE_TOL)
        return idx[np.argsort(-self.mu[idx].real)]


@dataclass
class Equilibrium:
    u_star: np.ndarray
    residual: float
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    morse_index: Optional[int] = None
    eigen_data: Optional[EigenData] = None

    def state(self) -> ModalState:
        return ModalState(self.u_star.copy(), np.zeros_like(self.u_star))


@dataclass
class EquilibriumSet:
    members: list

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def distance(self, domain, state: ModalState) -> float:
        """Energy-space distance from a state to the nearest member."""
        if not self.members:
            return float("inf")
        return min(energy_norm(domain, ModalState(state.u - e.u_star, state.v)) for e in self.members)

    def add(self, domain, eq: Equilibrium) -> bool:
        for e in self.members:
            if hs_norm(domain, e.u_star - eq.u_star, 1) < DEDUP_TOL:
                return False
        self.members.append(eq)
        return True


def _residual(model: Model, u: np.ndarray, shift: float) -> np.ndarray:
    lam = model.domain.eigenvalues
    r = lam * u + model.source(u) - model.forcing
    if shift:
        r = r + shift * u / lam
    return r


def _dense_jacobian(model: Model, u: np.ndarray, shift: float = 0.0) -> np.ndarray:
    dom = model.domain
    n = u.size
    lam = dom.eigenvalues.ravel()
    jac = model.source_jacobian(u)
    K = np.empty((n, n))
    eye = np.zeros(n)
    for i in range(n):
        eye[i] = 1.0
        K[:, i] = jac(eye.reshape(u.shape)).ravel()
        eye[i] = 0.0
    K = 0.5 * (K + K.T)
    K[np.diag_indices(n)] += lam + (shift / lam if shift else 0.0)
    return K


def _newton_direction(model: Model, u: np.ndarray, F: np.ndarray, shift: float) -> np.ndarray:
    if u.size <= _DENSE_LIMIT:
        K = _dense_jacobian(model, u, shift)
        try:
            delta = np.linalg.solve(K, -F.ravel())
        except np.linalg.LinAlgError as exc:
            raise JacobianSingular(f"Jacobian singular: {exc}") from exc
        if not np.all(np.isfinite(delta)) or np.linalg.cond(K) > 1e14:
            raise JacobianSingular("Jacobian numerically singular")
        return delta.reshape(u.shape)
    lam = model.domain.eigenvalues
    jac = model.source_jacobian(u)
    shape = u.shape
    diag = lam + (shift / lam if shift else 0.0)
    op = spla.LinearOperator((u.size, u.size), dtype=float,
                             matvec=lambda x: (diag * x.reshape(shape) + jac(x.reshape(shape))).ravel())
    delta, info = spla.minres(op, -F.ravel(), rtol=1e-14, maxiter=20 * u.size)
    if info < 0 or not np.all(np.isfinite(delta)):
        raise JacobianSingular(f"MINRES breakdown (info={info})")
    return delta.reshape(shape)


def solve_equilibrium(model: Model, guess: np.ndarray, tol: float = 1e-12, max_iter: int = 50,
                      shift: float = 0.0, linearize_result: bool = True) -> Equilibrium:
    """Newton's method with backtracking on Lam u + P g(u) - P h = 0.

    ``shift`` adds ``shift * Lam^{-1} u`` to the operator (the stationary
    problem of the parabolic companion).  The residual is measured in H^{-1}.
    """
    dom = model.domain
    u = np.array(guess, dtype=float)
    if u.shape != dom.shape or not np.all(np.isfinite(u)):
        raise ValueError("guess must be a finite field on the model's domain")
    norm = lambda r: hs_norm(dom, r, -1)  # noqa: E731
    F = _residual(model, u, shift)
    res = norm(F)
    history = [res]
    it = 0
    while res > tol * max(1.0, hs_norm(dom, u, 1)):
        if it >= max_iter:
            raise NewtonDiverged(f"no convergence after {max_iter} Newton steps (residual {res:.3e})")
        delta = _newton_direction(model, u, F, shift)
        alpha = 1.0
        while True:
            trial = u + alpha * delta
            F_trial = _residual(model, trial, shift)
            r_trial = norm(F_trial)
            if np.isfinite(r_trial) and r_trial <= (1 - 1e-4 * alpha) * res:
                break
            alpha *= 0.5
            if alpha < 1e-4:
                raise NewtonDiverged(f"line search failed at residual {res:.3e}")
        u, F, res = trial, F_trial, r_trial
        history.append(res)
        it += 1
    eq = Equilibrium(u, res, it, history)
    if linearize_result and not model.damping.degenerate:
        eq.eigen_data = linearize(eq, model)
        eq.morse_index = eq.eigen_data.morse_index
    return eq


def linearize(eq: Equilibrium, model: Model) -> EigenData:
    """Spectrum of d/dt (w, w') = (w', -(Lam + P g'(u*)) w - J0 w').

    The velocity vanishes at an equilibrium, so the damping is the scalar
    J0 = J(0) times the identity and the system decouples in the eigenbasis
    of the symmetric stiffness K = Lam + P g'(u*): each stiffness eigenvalue
    kappa gives mu = (-J0 +- sqrt(J0^2 - 4 kappa)) / 2.
    """
    J0 = model.J0
    if J0 <= 0:
        raise DegenerateDamping("linearization requires J(0) > 0")
    K = _dense_jacobian(model, eq.u_star)
    kappa, phi = np.linalg.eigh(K)
    disc = np.sqrt((J0 * J0 - 4 * kappa).astype(complex))
    mu = np.concatenate([(-J0 + disc) / 2, (-J0 - disc) / 2])
    modes = np.concatenate([phi.T, phi.T]).reshape((2 * kappa.size,) + eq.u_star.shape)
    wdot = mu.reshape((-1,) + (1,) * eq.u_star.ndim) * modes
    morse = int(np.sum(mu.real > MORSE_TOL))
    center = int(np.sum(np.abs(mu.real) <= MORSE_TOL))
    return EigenData(mu, modes.astype(complex), wdot, kappa, morse, center, J0)


def system_residual(model: Model, eq: Equilibrium, data: EigenData, i: int) -> float:
    """|| A (w, w') - mu (w, w') || for eigenpair i of the full block system."""
    K = _dense_jacobian(model, eq.u_star)
    w = data.w[i].ravel()
    wd = data.wdot[i].ravel()
    top = wd - data.mu[i] * w
    bottom = -(K @ w) - data.J0 * wd - data.mu[i] * wd
    return float(np.sqrt(np.sum(np.abs(top) ** 2) + np.sum(np.abs(bottom) ** 2)))


def unstable_seeds(eq: Equilibrium, model: Model, delta: Optional[float] = None) -> list[ModalState]:
    """Initial states u* +- delta (w, w') along each unstable eigendirection."""
    data = eq.eigen_data if eq.eigen_data is not None else linearize(eq, model)
    idx = data.unstable()
    if idx.size == 0:
        raise NoUnstableDirections("equilibrium has Morse index 0")
    dom = model.domain
    if delta is None:
        delta = 1e-4 * max(1.0, hs_norm(dom, eq.u_star, 1))
    seeds = []
    for i in idx:
        w = data.w[i].real
        wd = data.wdot[i].real
        scale = energy_norm(dom, ModalState(w, wd))
        w, wd = w / scale, wd / scale
        for sgn in (1.0, -1.0):
            seeds.append(ModalState(eq.u_star + sgn * delta * w, sgn * delta * wd))
    return seeds


def find_equilibria(model: Model, count: int = 8, amplitude_range=(0.5, 3.0), seed: int = 0,
                    extra_guesses=(), tol: float = 1e-12) -> EquilibriumSet:
    """Multistart Newton from structured (0, +-c e_k) and random smooth guesses."""
    if count < 1:
        raise ValueError("count must be >= 1")
    dom = model.domain
    lo, hi = amplitude_range
    guesses = [dom.zeros()]
    n_axis = min(dom.modes_per_axis, 3)
    for k in range(1, n_axis + 1):
        idx = (k,) + (1,) * (dom.dim - 1)
        for c in np.linspace(lo, hi, 3):
            for sgn in (1.0, -1.0):
                guesses.append(sgn * c * dom.mode(*idx))
    rng = np.random.Generator(np.random.Philox(seed))
    for _ in range(count):
        f = random_field(dom, rng, decay=1.0)
        amp = rng.uniform(lo, hi)
        guesses.append(f * amp / max(hs_norm(dom, f, 1), 1e-300))
    guesses.extend(np.asarray(g, dtype=float) for g in extra_guesses)

    out = EquilibriumSet([])
    for i, g in enumerate(guesses):
        try:
            eq = solve_equilibrium(model, g, tol=tol, linearize_result=False)
        except (SteadyStateError, ValueError) as exc:
            log.info("start %d failed: %s", i, exc)
            continue
        out.add(dom, eq)
    out.members.sort(key=lambda e: (round(hs_norm(dom, e.u_star, 1), 8), tuple(np.round(e.u_star.ravel(), 8))))
    if not model.damping.degenerate:
        for e in out.members:
            e.eigen_data = linearize(e, model)
            e.morse_index = e.eigen_data.morse_index
    return out


def quadratic_rate(history) -> Optional[float]:
    """Median fitted C in r_{k+1} <= C r_k^2 over the terminal phase (r_k < 1e-3)."""
    r = np.asarray(history, dtype=float)
    ratios = [r[k + 1] / r[k] ** 2 for k in range(len(r) - 1) if 1e-14 < r[k] < 1e-3 and r[k + 1] > 1e-15]
    return float(np.median(ratios)) if ratios else None
