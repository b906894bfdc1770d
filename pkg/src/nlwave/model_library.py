"""Damping laws J, nonlinearities g, forcing h, and the hypothesis checker.

The model is

    u_tt - Lap u + J(||u_t||^2) u_t + g(u) = h,    u = 0 on the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .spectral_core import SpectralDomain, from_grid, to_grid

DAMPING_KINDS = ("constant", "hyperbolic", "logistic", "shifted_power", "pure_power")
NONLINEARITY_KINDS = ("odd_power", "bistable", "custom_odd_polynomial")

_DAMPING_PARAMS = {
    "constant": ("gamma",),
    "hyperbolic": ("a", "b"),
    "logistic": ("a", "b"),
    "shifted_power": ("eps", "p"),
    "pure_power": ("p",),
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DampingLaw:
    kind: str
    params: dict = field(default_factory=dict)
    p_exponent: float = 0.0

    def __post_init__(self):
        if self.kind not in DAMPING_KINDS:
            raise ModelError(f"unknown damping kind {self.kind!r}; valid kinds: {', '.join(DAMPING_KINDS)}")
        expected = set(_DAMPING_PARAMS[self.kind])
        if set(self.params) != expected:
            raise ModelError(f"damping {self.kind} takes parameters {sorted(expected)}, got {sorted(self.params)}")
        P = {k: float(v) for k, v in self.params.items()}
        object.__setattr__(self, "params", P)
        if self.kind == "constant" and not P["gamma"] > 0:
            raise ModelError("constant damping requires gamma > 0")
        if self.kind in ("hyperbolic", "logistic") and not 0 < P["a"] < P["b"]:
            raise ModelError(f"{self.kind} damping requires 0 < a < b")
        if self.kind == "shifted_power" and not (P["eps"] > 0 and P["p"] > 0):
            raise ModelError("shifted_power damping requires eps > 0 and p > 0")
        if self.kind == "pure_power":
            if not P["p"] > 0:
                raise ModelError("pure_power damping requires p > 0")
            if self.p_exponent == 0.0:
                object.__setattr__(self, "p_exponent", P["p"])
        if self.p_exponent < 0:
            raise ModelError("p_exponent must be >= 0")

    @classmethod
    def constant(cls, gamma):
        return cls("constant", {"gamma": gamma})

    @classmethod
    def hyperbolic(cls, a, b):
        return cls("hyperbolic", {"a": a, "b": b})

    @classmethod
    def logistic(cls, a, b):
        return cls("logistic", {"a": a, "b": b})

    @classmethod
    def shifted_power(cls, eps, p, p_exponent=0.0):
        return cls("shifted_power", {"eps": eps, "p": p}, p_exponent)

    @classmethod
    def pure_power(cls, p):
        return cls("pure_power", {"p": p}, p)

    @property
    def J0(self) -> float:
        return self(0.0)[0]

    @property
    def degenerate(self) -> bool:
        return self.J0 == 0.0

    @property
    def monotone_bypass(self) -> bool:
        # linear damping is admitted although not strictly increasing
        return self.kind == "constant"

    def __call__(self, s):
        return eval_damping(self, s)


def eval_damping(law: DampingLaw, s):
    """Return ``(J(s), J'(s))``; vectorized over ``s >= 0``."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("damping argument must be non-negative")
    P = law.params
    k = law.kind
    if k == "constant":
        J = np.full_like(s_arr, P["gamma"])
        dJ = np.zeros_like(s_arr)
    elif k == "hyperbolic":
        a, b = P["a"], P["b"]
        J = (a + s_arr) / (b + s_arr)
        dJ = (b - a) / (b + s_arr) ** 2
    elif k == "logistic":
        a, b = P["a"], P["b"]
        # a e^s / (1 + b e^s) written with e^{-s} to avoid overflow
        em = np.exp(-s_arr)
        J = a / (em + b)
        dJ = a * em / (em + b) ** 2
    elif k == "shifted_power":
        eps, p = P["eps"], P["p"]
        r = np.sqrt(s_arr)
        J = (r + eps) ** p
        with np.errstate(divide="ignore"):
            dJ = np.where(r > 0, p * (r + eps) ** (p - 1) / (2 * np.where(r > 0, r, 1.0)), np.inf)
    else:  # pure_power
        p = P["p"]
        J = s_arr**p
        with np.errstate(divide="ignore", invalid="ignore"):
            dJ = np.where(s_arr > 0, p * s_arr ** (p - 1), 0.0 if p > 1 else (1.0 if p == 1 else np.inf))
    if np.ndim(s) == 0:
        return float(J), float(dJ)
    return J, dJ


@dataclass(frozen=True)
class Nonlinearity:
    """Odd source term g with its structural constants.

    ``coefficients`` (custom kind only) lists ``c_j`` for ``g(s) = sum c_j s**(2j+1)``.
    """

    kind: str
    q: float = 5.0
    a: float = 0.0
    coefficients: tuple = ()
    constants: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in NONLINEARITY_KINDS:
            raise ModelError(
                f"unknown nonlinearity kind {self.kind!r}; valid kinds: {', '.join(NONLINEARITY_KINDS)}"
            )
        if self.kind in ("odd_power", "bistable") and self.q not in (3, 5, 3.0, 5.0):
            raise ModelError(f"built-in nonlinearities take q in {{3, 5}}, got {self.q}")
        if self.kind == "bistable" and not self.a > 0:
            raise ModelError("bistable nonlinearity requires a > 0")
        if self.kind == "custom_odd_polynomial":
            if not self.coefficients:
                raise ModelError("custom_odd_polynomial needs coefficients")
            if self.constants is None:
                raise ModelError("custom_odd_polynomial must supply its structural constants")
            object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
            if not 3 <= self.q <= 5:
                raise ModelError("q must satisfy 3 <= q <= 5")
        if self.constants is not None:
            missing = {"kappa1", "kappa2", "kappa3", "kappa4", "kappa5", "C_g"} - set(self.constants)
            if missing:
                raise ModelError(f"structural constants missing {sorted(missing)}")

    @classmethod
    def odd_power(cls, q=5):
        return cls("odd_power", q=float(q))

    @classmethod
    def bistable(cls, q=5, a=1.0):
        return cls("bistable", q=float(q), a=float(a))

    @property
    def is_zero(self) -> bool:
        return self.kind == "custom_odd_polynomial" and not any(self.coefficients)

    def _poly(self) -> np.ndarray:
        """Coefficients of g as a power series (index = power)."""
        if self.kind == "custom_odd_polynomial":
            c = np.zeros(2 * len(self.coefficients))
            c[1::2] = self.coefficients
            return c
        c = np.zeros(int(self.q) + 1)
        c[int(self.q)] = 1.0
        if self.kind == "bistable":
            c[1] = -self.a
        return c

    def g(self, s):
        if self.kind != "custom_odd_polynomial":
            s2 = s * s
            out = s * s2 * s2 if self.q == 5 else s * s2
            return out - self.a * s if self.kind == "bistable" else out
        return np.polynomial.polynomial.polyval(s, self._poly())

    def dg(self, s):
        if self.kind != "custom_odd_polynomial":
            s2 = s * s
            out = 5.0 * s2 * s2 if self.q == 5 else 3.0 * s2
            return out - self.a if self.kind == "bistable" else out
        return np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyder(self._poly()))

    def d2g(self, s):
        return np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyder(self._poly(), 2))

    def G(self, s):
        return np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyint(self._poly()))

    @property
    def degree(self) -> int:
        return len(self._poly()) - 1


def eval_nonlinearity(nl: Nonlinearity, s):
    """Return ``(g, g', g'', G)`` at ``s``."""
    out = nl.g(s), nl.dg(s), nl.d2g(s), nl.G(s)
    if np.ndim(s) == 0:
        return tuple(float(x) for x in out)
    return out


def certified_constants(nl: Nonlinearity) -> dict:
    """Constants for which the growth and structure conditions hold on all of R.

    odd_power(q):  g' = q|s|^{q-1} so kappa2 = q; g s - 4G = (1 - 4/(q+1))|s|^{q+1} >= 0;
    G = |s|^{q+1}/(q+1); |g''| = q(q-1)|s|^{q-2} <= C_g (1 + |s|^{q-2}).
    bistable(q, a): g' = q|s|^{q-1} - a, kappa1 = 1 + a keeps a unit margin; g s - 4G = (1-4/(q+1))|s|^{q+1} + a s^2;
    G = |s|^{q+1}/(q+1) - a s^2/2 >= |s|^{q+1}/(2(q+1)) - kappa5 with the
    kappa5 from maximizing a s^2/2 - |s|^{q+1}/(2(q+1)).
    """
    if nl.kind == "custom_odd_polynomial":
        raise ModelError("custom nonlinearities must supply their own constants")
    q = nl.q
    if nl.kind == "odd_power":
        return {"kappa1": 1.0, "kappa2": q, "kappa3": 1.0, "kappa4": 1.0 / (q + 1), "kappa5": 1.0, "C_g": q * (q - 1)}
    a = nl.a
    # max_s a s^2/2 - s^{q+1}/(2(q+1)) attained at s^{q-1} = 2a
    s_star = (2 * a) ** (1.0 / (q - 1))
    k5 = a * s_star**2 / 2 - s_star ** (q + 1) / (2 * (q + 1))
    return {
        "kappa1": 1.0 + a,
        "kappa2": q,
        "kappa3": 1.0,
        "kappa4": 1.0 / (2 * (q + 1)),
        "kappa5": max(1.0, k5 * 1.0001),
        "C_g": q * (q - 1),
    }


def constants_of(nl: Nonlinearity) -> dict:
    return dict(nl.constants) if nl.constants is not None else certified_constants(nl)


@dataclass
class AssumptionReport:
    checked_interval: tuple
    monotone_ok: bool
    monotone_bypassed: bool
    positivity_ok: bool
    superlinear_ok: bool
    g_growth_ok: bool
    g_structure_ok: bool
    worst_margin: dict
    degenerate_flag: bool
    p_exponent: float

    @property
    def damping_ok(self) -> bool:
        mono = self.monotone_ok or self.monotone_bypassed
        return mono and (self.positivity_ok or self.superlinear_ok)

    @property
    def passed(self) -> bool:
        """All hypotheses hold and the law is non-degenerate."""
        return self.damping_ok and self.g_growth_ok and self.g_structure_ok and not self.degenerate_flag

    def as_dict(self) -> dict:
        return {
            "checked_interval": list(self.checked_interval),
            "monotone_ok": self.monotone_ok,
            "monotone_bypassed": self.monotone_bypassed,
            "positivity_ok": self.positivity_ok,
            "superlinear_ok": self.superlinear_ok,
            "g_growth_ok": self.g_growth_ok,
            "g_structure_ok": self.g_structure_ok,
            "degenerate_flag": self.degenerate_flag,
            "p_exponent": self.p_exponent,
            "worst_margin": dict(self.worst_margin),
            "passed": self.passed,
        }


_ROUNDOFF = 1e-12


def _relative_margin(lhs, rhs):
    """(lhs - rhs) / max(1, |lhs|, |rhs|), with round-off-sized values set to 0."""
    m = (lhs - rhs) / np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return np.where(np.abs(m) <= _ROUNDOFF, 0.0, m)


def _log_dJ(law: DampingLaw, s):
    """log J'(s), finite wherever J' > 0 even if J' itself underflows."""
    P = law.params
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        if law.kind == "constant":
            return np.full_like(s, -np.inf)
        if law.kind == "hyperbolic":
            return np.log(P["b"] - P["a"]) - 2 * np.log(P["b"] + s)
        if law.kind == "logistic":
            return np.log(P["a"]) - s - 2 * np.log(np.exp(-s) + P["b"])
        if law.kind == "shifted_power":
            r = np.sqrt(s)
            return np.log(P["p"]) + (P["p"] - 1) * np.log(r + P["eps"]) - np.log(2.0) - np.log(r)
        return np.log(P["p"]) + (P["p"] - 1) * np.log(s)


def check_assumptions(law: DampingLaw, nl: Nonlinearity, S_max: float = 1e3, samples: int = 10_000,
                      p: Optional[float] = None) -> AssumptionReport:
    """Scan every inequality of the hypotheses on a log-spaced sample of [0, S_max].

    Margins of the growth, structure and superlinearity conditions are
    relative, ``(lhs - rhs) / max(1, |lhs|, |rhs|)``, and values within 1e-12
    of zero are reported as zero (both sides are rounded floats).  A
    condition holds iff its worst margin is non-negative.
    """
    if not S_max > 0:
        raise ValueError("S_max must be positive")
    if samples < 100:
        raise ValueError("samples must be >= 100")
    p = law.p_exponent if p is None else p
    s = np.concatenate([[0.0], np.logspace(-8, np.log10(S_max), samples - 1)])
    J, dJ = eval_damping(law, s)
    margins = {}

    # a pair counts as increasing if J separates in floating point or, where
    # J has saturated numerically, if J' is positive (checked in log form)
    inc = np.diff(J) > 0
    unresolved = ~inc
    if np.any(unresolved):
        mid = 0.5 * (s[1:] + s[:-1])
        inc[unresolved] = np.isfinite(_log_dJ(law, mid[unresolved]))
    margins["monotone"] = float(np.min(np.where(np.isfinite(dJ), dJ, np.inf)))
    monotone_ok = bool(np.all(inc))
    margins["positivity"] = float(np.min(J))
    positivity_ok = bool(np.all(J > 0))
    if p > 0:
        sup = _relative_margin(J * s, s ** (p + 1))
        margins["superlinear"] = float(np.min(sup))
        superlinear_ok = bool(np.all(sup >= 0))
    else:
        margins["superlinear"] = float("nan")
        superlinear_ok = False

    c = constants_of(nl)
    q = nl.q
    x = np.concatenate([-s[::-1], s[1:]])
    g, dg, d2g, G = eval_nonlinearity(nl, x)
    ax = np.abs(x)
    m_g2 = _relative_margin(c["C_g"] * (1 + ax ** (q - 2)), np.abs(d2g))
    m_g1 = _relative_margin(dg, -c["kappa1"] + c["kappa2"] * ax ** (q - 1))
    m_s1 = _relative_margin(g * x + c["kappa3"], 4 * G)
    m_s2 = _relative_margin(G, c["kappa4"] * ax ** (q + 1) - c["kappa5"])
    margins["g_second_derivative"] = float(np.min(m_g2))
    margins["g_prime_lower"] = float(np.min(m_g1))
    margins["g_structure"] = float(np.min(m_s1))
    margins["G_lower"] = float(np.min(m_s2))
    g0_ok = abs(float(nl.g(0.0))) == 0.0
    g_growth_ok = bool(np.all(m_g2 >= 0) and np.all(m_g1 >= 0)) and g0_ok
    g_structure_ok = bool(np.all(m_s1 >= 0) and np.all(m_s2 >= 0))
    return AssumptionReport(
        checked_interval=(0.0, float(S_max)),
        monotone_ok=monotone_ok,
        monotone_bypassed=law.monotone_bypass,
        positivity_ok=positivity_ok,
        superlinear_ok=superlinear_ok,
        g_growth_ok=g_growth_ok,
        g_structure_ok=g_structure_ok,
        worst_margin=margins,
        degenerate_flag=law.J0 == 0.0,
        p_exponent=float(p),
    )


@dataclass(frozen=True, eq=False)
class Model:
    """A damping law, a nonlinearity and a forcing field on a domain.

    ``linear`` switches off both g and J (pure wave equation); ``gamma`` then
    adds an optional constant linear damping.
    """

    domain: SpectralDomain
    damping: DampingLaw
    nonlinearity: Nonlinearity
    forcing: np.ndarray = None
    linear: bool = False
    gamma: float = 0.0

    def __post_init__(self):
        if self.forcing is None:
            object.__setattr__(self, "forcing", self.domain.zeros())
        h = np.asarray(self.forcing, dtype=float)
        if h.shape != self.domain.shape:
            raise ModelError(f"forcing shape {h.shape} does not match domain {self.domain.shape}")
        if not np.all(np.isfinite(h)):
            raise ModelError("forcing must be finite")
        object.__setattr__(self, "forcing", h)

    def damping_coefficient(self, m: float) -> tuple[float, float]:
        """``(J(m), J'(m))`` at squared velocity norm ``m``."""
        if self.linear:
            return self.gamma, 0.0
        return eval_damping(self.damping, m)

    @property
    def J0(self) -> float:
        return self.damping_coefficient(0.0)[0]

    @property
    def has_source(self) -> bool:
        return not self.linear and not self.nonlinearity.is_zero

    def source(self, u: np.ndarray) -> np.ndarray:
        """Galerkin projection P_N g(u) of the nonlinearity."""
        if not self.has_source:
            return np.zeros_like(u)
        S, A = self.domain._synthesis, self.domain._analysis
        if S is not None and u.ndim == 1:
            # hot path of the time stepper; same transform without the checks
            return A @ self.nonlinearity.g(S @ u)
        return from_grid(self.domain, self.nonlinearity.g(to_grid(self.domain, u)))

    def source_jacobian(self, u: np.ndarray):
        """Return a function applying ``w -> P_N g'(u) w``."""
        if not self.has_source:
            return lambda w: np.zeros_like(w)
        dg = self.nonlinearity.dg(to_grid(self.domain, u))
        return lambda w: from_grid(self.domain, dg * to_grid(self.domain, w))

    def potential(self, u: np.ndarray) -> float:
        """``<G(u), 1>`` by grid quadrature."""
        if not self.has_source:
            return 0.0
        return float(np.sum(self.nonlinearity.G(to_grid(self.domain, u))) * self.domain.quad_weight)

    def with_forcing(self, h: np.ndarray) -> "Model":
        return Model(self.domain, self.damping, self.nonlinearity, h, self.linear, self.gamma)

    def linearized(self, gamma: float = 0.0) -> "Model":
        """Same domain and forcing with g and J switched off (optional constant damping)."""
        return Model(self.domain, self.damping, self.nonlinearity, self.forcing, True, float(gamma))
