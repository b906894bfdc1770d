"""Scalar functionals along trajectories: energy, Lyapunov function, dissipation, norms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .integrator import Trajectory
from .model_library import Model
from .spectral_core import ModalState, SpectralDomain, hs_norm, inner, to_grid


@dataclass
class EnergyReport:
    t: float
    e_norm_sq: float
    potential: float
    forcing_term: float
    E_u: float
    cumulative_dissipation: float = 0.0
    identity_residual: float = 0.0

    @property
    def Phi(self) -> float:
        """Lyapunov functional; same value as the energy."""
        return self.E_u


@dataclass
class PerturbedEnergyReport:
    rho: float
    E_rho: float
    Q: float
    G: float
    I: float  # noqa: E741


@dataclass
class LyapunovTrace:
    times: np.ndarray
    phi: np.ndarray
    dissipation: np.ndarray
    tol_mono: float
    max_increase: float
    balance_error: float

    @property
    def monotone(self) -> bool:
        return bool(self.max_increase <= self.tol_mono)

    @property
    def balanced(self) -> bool:
        """Cumulative drop of Phi equals cumulative dissipation within tolerance."""
        return bool(self.balance_error <= self.tol_mono)


def energy(state: ModalState, model: Model) -> EnergyReport:
    dom = model.domain
    e_sq = hs_norm(dom, state.u, 1) ** 2 + hs_norm(dom, state.v, 0) ** 2
    pot = 2.0 * model.potential(state.u)
    force = 2.0 * inner(model.forcing, state.u)
    return EnergyReport(float(state.t), e_sq, pot, force, e_sq + pot - force)


def energy_reports(traj: Trajectory) -> list[EnergyReport]:
    D = traj.cumulative_dissipation
    out = []
    E0 = None
    for i in range(len(traj)):
        rep = energy(traj.state(i), traj.model)
        if E0 is None:
            E0 = rep.E_u
        rep.cumulative_dissipation = float(D[i])
        rep.identity_residual = rep.E_u + rep.cumulative_dissipation - E0
        out.append(rep)
    return out


def energy_identity_residual(traj: Trajectory) -> float:
    """Normalized defect E(T) + D(T) - E(0) of the energy equality."""
    E0 = energy(traj.state(0), traj.model).E_u
    ET = energy(traj.state(-1), traj.model).E_u
    D = traj.cumulative_dissipation[-1]
    return float((ET + D - E0) / max(1.0, abs(E0)))


def lyapunov_trace(traj: Trajectory, tol_mono: float | None = None,
                   residual_scale: float | None = None) -> LyapunovTrace:
    """Phi at each sample with a non-increase verdict.

    ``tol_mono`` is ten times the residual scale of the scheme.  Pass
    ``residual_scale`` to fix that scale externally; otherwise it is measured
    as the largest per-interval defect of the discrete balance
    ``Phi(t_i) - Phi(t_{i+1}) = D(t_{i+1}) - D(t_i)`` (floored at round-off).
    """
    phi = np.array([energy(traj.state(i), traj.model).E_u for i in range(len(traj))])
    D = traj.cumulative_dissipation
    defect = np.diff(phi) + np.diff(D)
    if tol_mono is None and residual_scale is not None:
        tol_mono = 10.0 * residual_scale
    if tol_mono is None:
        floor = 1e-13 * max(1.0, float(np.max(np.abs(phi))))
        scale = float(np.max(np.abs(defect))) if defect.size else 0.0
        tol_mono = 10.0 * max(scale, floor)
    max_inc = float(np.max(np.diff(phi))) if len(phi) > 1 else 0.0
    balance = float(np.max(np.abs((phi[0] - phi) - D)))
    return LyapunovTrace(traj.times.copy(), phi, D, tol_mono, max_inc, balance)


def velocity_norms(traj: Trajectory) -> np.ndarray:
    return np.sqrt(np.sum(traj.v.reshape(len(traj), -1) ** 2, axis=1))


def dissipation_integral(traj: Trajectory, p: float) -> np.ndarray:
    """Running trapezoid integral of ||v(t)||^{2p+2} over the samples."""
    if p < 0:
        raise ValueError("p must be >= 0")
    f = velocity_norms(traj) ** (2 * p + 2)
    inc = 0.5 * (f[1:] + f[:-1]) * np.diff(traj.times)
    return np.concatenate([[0.0], np.cumsum(inc)])


def negative_norm_velocity(domain: SpectralDomain, state: ModalState, sigma_exp: float = 1.0) -> float:
    if not 0 < sigma_exp <= 1:
        raise ValueError("sigma_exp must lie in (0, 1]")
    return hs_norm(domain, state.v, -sigma_exp)


def lp_norm(domain: SpectralDomain, u: np.ndarray, p: float) -> float:
    """L^p norm of a field by grid quadrature."""
    vals = np.abs(to_grid(domain, u))
    return float((np.sum(vals**p) * domain.quad_weight) ** (1.0 / p))


def strichartz_norm(traj: Trajectory, window: tuple[float, float]) -> float:
    """(int_{t1}^{t2} ||u(t)||_{L^12}^4 dt)^{1/4} by trapezoid in time."""
    t1, t2 = map(float, window)
    t = traj.times
    eps = 1e-12 * max(1.0, abs(t[-1]))
    if t1 > t2 or t1 < t[0] - eps or t2 > t[-1] + eps:
        raise ValueError(f"window {window} outside trajectory span [{t[0]}, {t[-1]}]")
    f = np.array([lp_norm(traj.domain, traj.u[i], 12.0) ** 4 for i in range(len(traj))])
    if len(t) == 1:
        return float((f[0] * (t2 - t1)) ** 0.25)
    inside = (t > t1) & (t < t2)
    ts = np.concatenate([[t1], t[inside], [t2]])
    fs = np.interp(ts, t, f)
    return float(trapezoid(fs, ts) ** 0.25)


def perturbed_energy(state: ModalState, model: Model, rho: float) -> PerturbedEnergyReport:
    """Energy with multiplier v + rho u, and the terms of its balance law

        d/dt E_rho + (rho/4) E_rho + Q + G + I = 0.
    """
    dom = model.domain
    if rho < 0 or rho > np.sqrt(dom.lambda1):
        raise ValueError(f"rho must lie in [0, sqrt(lambda1)] = [0, {np.sqrt(dom.lambda1):.4g}]")
    base = energy(state, model)
    vu = inner(state.v, state.u)
    vsq = inner(state.v, state.v)
    J = model.damping_coefficient(vsq)[0]
    u_h1 = hs_norm(dom, state.u, 1) ** 2
    Q = (2 * J - 1.25 * rho) * vsq + 0.75 * rho * u_h1 + rho * J * vu - 0.25 * rho**2 * vu
    G = rho * inner(model.source(state.u), state.u) - 0.5 * rho * model.potential(state.u)
    I = -0.5 * rho * inner(model.forcing, state.u)  # noqa: E741
    return PerturbedEnergyReport(rho, base.E_u + rho * vu, Q, G, I)


def e1_norm(domain: SpectralDomain, state: ModalState) -> float:
    return float(np.sqrt(hs_norm(domain, state.u, 2) ** 2 + hs_norm(domain, state.v, 1) ** 2))


def energy_table(traj: Trajectory):
    """Columns for a trace file: names, units and a (samples, columns) array."""
    reps = energy_reports(traj)
    names = ["t", "e_norm_sq", "potential", "forcing_term", "E_u", "Phi", "cumulative_dissipation",
             "identity_residual", "v_Hm1"]
    units = ["time", "energy", "energy", "energy", "energy", "energy", "energy", "energy", "H^-1"]
    rows = [
        [r.t, r.e_norm_sq, r.potential, r.forcing_term, r.E_u, r.Phi, r.cumulative_dissipation,
         r.identity_residual, negative_norm_velocity(traj.domain, traj.state(i))]
        for i, r in enumerate(reps)
    ]
    return names, units, np.asarray(rows, dtype=float)
