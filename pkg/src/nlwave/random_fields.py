"""Reproducible random fields.

Coefficients are ``c_k = lambda_k**(-decay) * z_k`` with ``z_k`` standard normal
draws from numpy's Philox-4x64 counter-based generator (``Philox(seed)``,
default key schedule, ``Generator.standard_normal``), taken in C order over
the modal array.  Modes with any axis index above ``band`` are zeroed after
drawing, so the stream does not depend on the band.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .spectral_core import ModalState, SpectralDomain, energy_norm


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def random_field(domain: SpectralDomain, rng: np.random.Generator, decay: float = 1.0,
                 band: Optional[int] = None) -> np.ndarray:
    z = rng.standard_normal(domain.shape)
    f = domain.eigenvalues ** (-decay) * z
    if band is not None and band < domain.modes_per_axis:
        mask = np.zeros(domain.shape, dtype=bool)
        mask[(slice(0, band),) * domain.dim] = True
        f = np.where(mask, f, 0.0)
    return f


def random_state(domain: SpectralDomain, rng: np.random.Generator, norm: float, decay: float = 1.0,
                 band: Optional[int] = None, velocity_share: float = 0.5) -> ModalState:
    """Random (u, v) scaled to a given energy norm.

    ``velocity_share`` is the fraction of the squared energy norm carried by v.
    """
    u = random_field(domain, rng, decay + 0.5, band)
    v = random_field(domain, rng, decay, band)
    eu = energy_norm(domain, ModalState(u, 0 * u))
    ev = energy_norm(domain, ModalState(0 * v, v))
    s = velocity_share
    u = u * (np.sqrt(1 - s) * norm / eu if eu > 0 else 0.0)
    v = v * (np.sqrt(s) * norm / ev if ev > 0 else 0.0)
    return ModalState(u, v)
