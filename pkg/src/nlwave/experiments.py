"""Ensemble experiments probing dissipativity, continuity, attraction and quasi-stability.

Every probe returns a :class:`ProbeReport` holding per-trajectory traces,
summary scalars and boolean verdicts.  Constants reported here (absorbing
radii, Lipschitz rates, quasi-stability weights) are empirical.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import diagnostics as dg
from .integrator import IntegratorConfig, Trajectory, integrate
from .model_library import Model
from .parallel import ordered_map
from .random_fields import make_rng, random_field, random_state
from .spectral_core import ModalState, build_domain, embed, energy_norm, hs_norm
from .steady_state import EquilibriumSet, find_equilibria, unstable_seeds

log = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


@dataclass
class EnsembleSpec:
    count: int
    norm_range: tuple = (1.0, 5.0)
    mode_band: Optional[int] = None
    seed: int = 0
    decay: float = 1.0
    velocity_share: float = 0.5

    def __post_init__(self):
        if self.count < 1:
            raise ProbeError("ensemble count must be >= 1")
        lo, hi = self.norm_range
        if not 0 <= lo <= hi:
            raise ProbeError("norm_range must satisfy 0 <= r_min <= r_max")

    def states(self, domain) -> list[ModalState]:
        rng = make_rng(self.seed)
        lo, hi = self.norm_range
        out = []
        for _ in range(self.count):
            r = rng.uniform(lo, hi)
            out.append(random_state(domain, rng, r, self.decay, self.mode_band, self.velocity_share))
        return out


@dataclass
class ProbeReport:
    name: str
    traces: list = field(default_factory=list)  # one dict of named arrays per trajectory
    summary: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict, repr=False)  # in-memory only (equilibria, trajectories)

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.verdicts.values())


def _integrate_task(args) -> Trajectory:
    state, model, cfg, horizon, stride = args
    return integrate(state, model, cfg, horizon, stride)


def run_ensemble(states: Sequence[ModalState], model: Model, cfg: IntegratorConfig, horizon: float,
                 stride: int = 1, workers: Optional[int] = None) -> list[Trajectory]:
    return ordered_map(_integrate_task, [(s, model, cfg, horizon, stride) for s in states], workers)


def energy_norms(traj: Trajectory) -> np.ndarray:
    return np.array([energy_norm(traj.domain, traj.state(i)) for i in range(len(traj))])


def e1_norms(traj: Trajectory) -> np.ndarray:
    return np.array([dg.e1_norm(traj.domain, traj.state(i)) for i in range(len(traj))])


# ---------------------------------------------------------------------------


def dissipativity_probe(model: Model, ensemble: EnsembleSpec, horizon: float, cfg: IntegratorConfig,
                        ball_margin: float = 0.1, stride: int = 10, workers=None) -> ProbeReport:
    """Empirical absorbing radius in the energy space and positive invariance of the ball."""
    states = ensemble.states(model.domain)
    trajs = run_ensemble(states, model, cfg, horizon, stride, workers)
    return _dissipativity_report(trajs, horizon, ball_margin)


def _dissipativity_report(trajs, horizon, ball_margin) -> ProbeReport:
    rep = ProbeReport("dissipativity")
    norms = [energy_norms(tr) for tr in trajs]
    late = [n[tr.times >= tr.times[0] + horizon / 2] for n, tr in zip(norms, trajs)]
    R_emp = max(float(np.max(x)) for x in late)
    radius = (1 + ball_margin) * R_emp
    entries, exits = [], []
    for n, tr in zip(norms, trajs):
        rep.traces.append({"t": tr.times, "energy_norm": n})
        inside = np.flatnonzero(n <= radius)
        if inside.size == 0:
            entries.append(float("inf"))
            exits.append(0)
            continue
        k = inside[0]
        entries.append(float(tr.times[k] - tr.times[0]))
        exits.append(int(np.sum(n[k:] > radius)))
    rep.summary.update(R_emp=R_emp, radius=radius, entry_times=entries, exit_counts=exits,
                       initial_norms=[float(n[0]) for n in norms])
    rep.verdicts["all_entered"] = all(math.isfinite(e) for e in entries)
    rep.verdicts["positively_invariant"] = sum(exits) == 0
    return rep


def e1_dissipativity_probe(model: Model, ensemble: EnsembleSpec, horizon: float, cfg: IntegratorConfig,
                           stride: int = 10, slope_tol: float = 1e-4, workers=None) -> ProbeReport:
    """Late-time boundedness of the strong norm ||u||_{H^2}^2 + ||v||_{H^1}^2."""
    states = ensemble.states(model.domain)
    trajs = run_ensemble(states, model, cfg, horizon, stride, workers)
    rep = ProbeReport("e1_dissipativity")
    slopes, sups, initial = [], [], []
    for tr in trajs:
        n = e1_norms(tr)
        rep.traces.append({"t": tr.times, "e1_norm": n})
        late = tr.times >= tr.times[0] + horizon / 2
        slopes.append(float(np.polyfit(tr.times[late], n[late], 1)[0]) if late.sum() > 1 else 0.0)
        sups.append(float(np.max(n[late])))
        initial.append(float(n[0]))
    rep.summary.update(R1=max(sups), late_sups=sups, slopes=slopes, initial_e1=initial)
    rep.verdicts["bounded"] = all(np.isfinite(sups))
    rep.verdicts["no_growth_trend"] = all(s <= slope_tol for s in slopes)
    return rep


def lipschitz_pairs(domain, count: int, separation: float, norm_range=(1.0, 3.0), seed: int = 0,
                    decay: float = 1.0, band: Optional[int] = None):
    """Random base states paired with a perturbation of given energy norm."""
    rng = make_rng(seed)
    pairs = []
    for _ in range(count):
        base = random_state(domain, rng, rng.uniform(*norm_range), decay, band)
        d = random_state(domain, rng, 1.0, decay + 0.5, band)
        pairs.append((base, ModalState(base.u + separation * d.u, base.v + separation * d.v)))
    return pairs


def _pair_task(args):
    a, b, model, cfg, horizon, stride = args
    return integrate(a, model, cfg, horizon, stride), integrate(b, model, cfg, horizon, stride)


def _run_pairs(pairs, model, cfg, horizon, stride, workers):
    for a, b in pairs:
        if energy_norm(model.domain, a - b) == 0:
            raise ProbeError("pair with zero initial separation")
    return ordered_map(_pair_task, [(a, b, model, cfg, horizon, stride) for a, b in pairs], workers)


def _separation(tra: Trajectory, trb: Trajectory) -> np.ndarray:
    dom = tra.domain
    return np.array([energy_norm(dom, ModalState(tra.u[i] - trb.u[i], tra.v[i] - trb.v[i]))
                     for i in range(len(tra))])


def lipschitz_probe(model: Model, pairs, horizon: float, cfg: IntegratorConfig, stride: int = 10,
                    tol: float = 0.01, halving: bool = True, halving_tol: float = 0.01, workers=None) -> ProbeReport:
    """Growth ratio rho(t) of pair separations and a shared exponential rate."""
    rep = ProbeReport("lipschitz")
    runs = _run_pairs(pairs, model, cfg, horizon, stride, workers)
    rhos = []
    for tra, trb in runs:
        sep = _separation(tra, trb)
        rho = sep / sep[0]
        rhos.append(rho)
        rep.traces.append({"t": tra.times, "rho": rho})
    t = runs[0][0].times - runs[0][0].times[0]
    pos = t > 0
    L_emp = max(float(np.max(np.log(r[pos]) / t[pos])) for r in rhos) if pos.any() else 0.0
    L_emp = max(L_emp, 0.0)
    bound_ok = all(np.all(r <= np.exp(L_emp * t) * (1 + tol)) for r in rhos)
    rep.summary.update(L_emp=L_emp, max_rho=[float(np.max(r)) for r in rhos])
    rep.verdicts["finite_rate"] = math.isfinite(L_emp)
    rep.verdicts["exponential_bound"] = bool(bound_ok)
    if halving:
        half = [(a, ModalState(a.u + 0.5 * (b.u - a.u), a.v + 0.5 * (b.v - a.v))) for a, b in pairs]
        runs_h = _run_pairs(half, model, cfg, horizon, stride, workers)
        changes = []
        for r, (tra, trb) in zip(rhos, runs_h):
            sep = _separation(tra, trb)
            changes.append(float(np.max(np.abs(sep / sep[0] - r) / r)))
        rep.summary["halving_change"] = changes
        rep.verdicts["first_order_regime"] = max(changes) <= halving_tol
    return rep


def quasistability_time(eta: float, gamma0: float) -> float:
    if not 0 < eta < 1:
        raise ProbeError("eta must lie in (0, 1)")
    if not gamma0 > 0:
        raise ProbeError("gamma0 must be positive")
    return math.log(48.0 / eta) / gamma0


def default_gamma0(model: Model) -> float:
    return min(1.0, math.sqrt(model.domain.lambda1) / 2, model.J0 / 2)


def quasistability_probe(model: Model, pairs, eta: float, cfg: IntegratorConfig, gamma0: Optional[float] = None,
                         n_batches: int = 2, stride: int = 10, workers=None) -> ProbeReport:
    """Fit mu in ||xi_w(T)||_{E1}^2 <= (eta^2/16)||xi_w(0)||_{E1}^2 + mu int_0^T ||xi_w||_E^2 dt.

    T = ln(48/eta)/gamma0, rounded up to a whole number of steps.  The mu of
    each batch is the largest per-pair ratio, clipped at zero (zero means the
    contraction term alone already bounds that batch).
    """
    gamma0 = default_gamma0(model) if gamma0 is None else gamma0
    T_exact = quasistability_time(eta, gamma0)
    nsteps = math.ceil(T_exact / cfg.dt - 1e-9)
    T = nsteps * cfg.dt
    stride = max(1, min(stride, nsteps))
    while nsteps % stride:
        stride -= 1
    runs = _run_pairs(pairs, model, cfg, T, stride, workers)
    rep = ProbeReport("quasistability")
    dom = model.domain
    mus, heads_ok = [], []
    for tra, trb in runs:
        w = [ModalState(tra.u[i] - trb.u[i], tra.v[i] - trb.v[i]) for i in range(len(tra))]
        e1 = np.array([dg.e1_norm(dom, x) ** 2 for x in w])
        e0 = np.array([energy_norm(dom, x) ** 2 for x in w])
        lhs = e1[-1]
        head = eta**2 / 16 * e1[0]
        tail = float(trapezoid(e0, tra.times))
        mus.append((lhs - head) / tail)
        heads_ok.append(bool(lhs <= head))
        rep.traces.append({"t": tra.times, "e1_sq": e1, "e_sq": e0})
    batches = np.array_split(np.arange(len(pairs)), n_batches)
    mu_b = [max(0.0, max(mus[i] for i in b)) for b in batches if len(b)]
    mu_emp = max(mu_b)
    if min(mu_b) == 0.0:
        agree = max(mu_b) == 0.0
    else:
        agree = max(mu_b) / min(mu_b) <= 2.0
    rep.summary.update(gamma0=gamma0, T=T, T_exact=T_exact, eta=eta, mu_pairs=mus, mu_batches=mu_b,
                       mu_emp=mu_emp, head_alone_sufficient=heads_ok,
                       linear_decay_factor=math.exp(-model.J0 * T), head_factor=eta**2 / 16)
    rep.verdicts["mu_finite"] = all(math.isfinite(m) for m in mus) and mu_emp >= 0
    rep.verdicts["batch_stable"] = bool(agree)
    return rep


# ---------------------------------------------------------------------------


def _distance_traces(trajs, eqset: EquilibriumSet, burn_in):
    out = []
    for tr in trajs:
        dom = tr.domain
        tail = tr.times >= tr.times[0] + burn_in
        idx = np.flatnonzero(tail)
        dist = np.array([eqset.distance(dom, tr.state(i)) for i in idx])
        vneg = np.array([dg.negative_norm_velocity(dom, tr.state(i), 1.0) for i in idx])
        e1 = np.array([dg.e1_norm(dom, tr.state(i)) for i in idx])
        out.append({"t": tr.times[idx], "dist_to_equilibria": dist, "v_Hm1": vneg, "e1_norm": e1})
    return out


def attractor_probe(model: Model, horizon: float, cfg: IntegratorConfig, burn_in: Optional[float] = None,
                    equilibria: Optional[EquilibriumSet] = None, ensemble: Optional[EnsembleSpec] = None,
                    delta: Optional[float] = None, stride: int = 10, dist_tol: float = 1e-3,
                    velocity_tol: float = 1e-3, e1_factor: float = 10.0, workers=None) -> ProbeReport:
    """Follow unstable-manifold seeds and a random ensemble; test convergence to the stationary set."""
    burn_in = horizon / 2 if burn_in is None else burn_in
    rep = ProbeReport("attractor")
    if equilibria is None:
        equilibria = find_equilibria(model)
        rep.summary["phases"] = ["find_equilibria", "integrate"]
    if len(equilibria) == 0:
        raise ProbeError("attractor probe needs at least one equilibrium")
    seeds, origin = [], []
    for k, eq in enumerate(equilibria):
        if eq.morse_index:
            for s in unstable_seeds(eq, model, delta):
                seeds.append(s)
                origin.append(f"seed:{k}")
    extra = ensemble.states(model.domain) if ensemble is not None else []
    states = seeds + extra
    origin += ["ensemble"] * len(extra)
    trajs = run_ensemble(states, model, cfg, horizon, stride, workers)

    # refine the stationary set with tail states before the verdicts
    tails = [tr.u[-1] for tr in trajs]
    refined = find_equilibria(model, count=1, extra_guesses=tails)
    for eq in refined:
        equilibria.add(model.domain, eq)

    traces = _distance_traces(trajs, equilibria, burn_in)
    e1_eq = max(dg.e1_norm(model.domain, eq.state()) for eq in equilibria)
    mono = [dg.lyapunov_trace(tr).monotone for tr in trajs]
    for tr_info, o in zip(traces, origin):
        tr_info["origin"] = o
    rep.traces = traces
    final_dist = [float(x["dist_to_equilibria"][-1]) for x in traces]
    tail_v = [float(np.max(x["v_Hm1"])) for x in traces]
    e1_tail = max(float(np.max(x["e1_norm"])) for x in traces)
    rep.summary.update(
        equilibria=len(equilibria), origins=origin, final_distance=final_dist, tail_velocity_max=tail_v,
        e1_tail_sup=e1_tail, e1_equilibria_max=e1_eq, lyapunov_monotone=mono,
    )
    rep.verdicts["distance_to_equilibria"] = max(final_dist) <= dist_tol
    rep.verdicts["velocity_decay"] = max(x["v_Hm1"][-1] for x in traces) <= velocity_tol
    rep.verdicts["e1_bounded"] = e1_tail <= e1_factor * max(e1_eq, 1e-300) or e1_tail == 0.0
    rep.verdicts["lyapunov_monotone"] = all(mono)
    rep.artifacts.update(equilibria=equilibria, trajectories=trajs)
    return rep


def galerkin_convergence_probe(model: Model, state0: ModalState, N_list: Sequence[int], horizon: float,
                               cfg: IntegratorConfig, stride: Optional[int] = None) -> ProbeReport:
    """Energy distance between final states at consecutive resolutions."""
    N_list = list(N_list)
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ProbeError("N_list must be increasing")
    dim = model.domain.dim
    finals = []
    nsteps = int(round(horizon / cfg.dt))
    for N in N_list:
        dom = build_domain(dim, N, model.domain.padding_factor, allow_aliasing=model.domain.padding_factor < 3)
        m = Model(dom, model.damping, model.nonlinearity, embed(model.forcing, dom.shape), model.linear, model.gamma)
        s = ModalState(embed(state0.u, dom.shape), embed(state0.v, dom.shape), state0.t)
        tr = integrate(s, m, cfg, horizon, stride or max(nsteps, 1))
        finals.append((dom, tr.final))
    top_dom = finals[-1][0]
    dists = []
    for (_, a), (_, b) in zip(finals, finals[1:]):
        diff = ModalState(embed(a.u, top_dom.shape) - embed(b.u, top_dom.shape),
                          embed(a.v, top_dom.shape) - embed(b.v, top_dom.shape))
        dists.append(energy_norm(top_dom, diff))
    rep = ProbeReport("galerkin_convergence")
    rep.summary.update(N_list=N_list, distances=dists)
    rep.verdicts["monotone_decrease"] = all(b < a for a, b in zip(dists, dists[1:])) or all(d == 0 for d in dists)
    return rep
