"""Dirichlet sine basis on the box (0, pi)^d.

Fields are stored as modal coefficient arrays of shape ``(N,) * dim`` against
the orthonormal eigenfunctions

    e_k(x) = prod_i sqrt(2/pi) sin(k_i x_i),   1 <= k_i <= N,

of the Dirichlet Laplacian, with eigenvalues ``lambda_k = sum_i k_i**2``.
Nonlinear terms are evaluated on the interior nodes ``x_j = j*pi/(M+1)``
(``j = 1..M``) of a type-I discrete sine transform, which makes analysis and
synthesis an exact orthogonal pair for ``M >= N``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.fft

__all__ = [
    "SpectralDomain",
    "ModalState",
    "build_domain",
    "to_grid",
    "from_grid",
    "project",
    "hs_norm",
    "energy_norm",
    "inner",
    "embed",
]


_DENSE_MAX = 256


@dataclass(frozen=True, eq=False)
class SpectralDomain:
    dim: int
    modes_per_axis: int
    grid_per_axis: int
    padding_factor: Fraction
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.modes_per_axis,) * self.dim

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.grid_per_axis,) * self.dim

    @property
    def lambda1(self) -> float:
        return float(self.dim)

    @property
    def index_set(self) -> np.ndarray:
        """All multi-indices k (1-based), shape ``(N**dim, dim)``, C order."""
        axes = [np.arange(1, self.modes_per_axis + 1)] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def nodes(self) -> np.ndarray:
        """Collocation nodes along one axis."""
        m = self.grid_per_axis
        return np.arange(1, m + 1) * np.pi / (m + 1)

    @property
    def quad_weight(self) -> float:
        """Quadrature weight of one grid cell (all axes)."""
        return (np.pi / (self.grid_per_axis + 1)) ** self.dim

    @cached_property
    def _synthesis(self) -> np.ndarray | None:
        # dense sine matrix (M x N) for small grids; DST beyond that
        M, N = self.grid_per_axis, self.modes_per_axis
        if M > _DENSE_MAX:
            return None
        return np.sqrt(2.0 / np.pi) * np.sin(np.outer(self.nodes, np.arange(1, N + 1)))

    @cached_property
    def _analysis(self) -> np.ndarray | None:
        S = self._synthesis
        return None if S is None else np.ascontiguousarray(S.T) * (np.pi / (self.grid_per_axis + 1))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def mode(self, *k: int) -> np.ndarray:
        """Unit coefficient vector for the eigenfunction e_k (1-based)."""
        if len(k) != self.dim:
            raise ValueError(f"expected {self.dim} indices, got {len(k)}")
        f = self.zeros()
        f[tuple(i - 1 for i in k)] = 1.0
        return f

    def eigenvalue(self, *k: int) -> float:
        return float(sum(i * i for i in k))


@dataclass
class ModalState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def copy(self) -> "ModalState":
        return ModalState(self.u.copy(), self.v.copy(), self.t)

    def __sub__(self, other: "ModalState") -> "ModalState":
        return ModalState(self.u - other.u, self.v - other.v, self.t)


def build_domain(dim: int, N: int, padding_factor=3, allow_aliasing: bool = False) -> SpectralDomain:
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    N = int(N)
    padding = Fraction(padding_factor).limit_denominator(1000)
    if padding < 1:
        raise ValueError(f"padding_factor must be >= 1, got {padding_factor}")
    if padding < 3:
        if not allow_aliasing:
            raise ValueError(
                f"padding_factor={float(padding)} < 3 aliases the quintic nonlinearity; "
                "set allow_aliasing to override"
            )
        warnings.warn(f"padding_factor={float(padding)} < 3: quintic products will alias", stacklevel=2)
    M = int(np.ceil(padding * N))
    k = np.arange(1, N + 1, dtype=float) ** 2
    lam = np.zeros((N,) * dim)
    for axis in range(dim):
        shape = [1] * dim
        shape[axis] = N
        lam = lam + k.reshape(shape)
    return SpectralDomain(dim, N, M, padding, lam)


def _check_field(domain: SpectralDomain, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != domain.shape:
        raise ValueError(f"field shape {f.shape} does not match domain {domain.shape}")
    return f


# DST-I (scipy, unnormalized): y_j = 2 sum_n x_n sin(pi (j+1)(n+1)/(M+1)).
def _apply_axes(mat: np.ndarray, f: np.ndarray) -> np.ndarray:
    if f.ndim == 1:
        return mat @ f
    for axis in range(f.ndim):
        f = np.moveaxis(np.tensordot(mat, f, axes=([1], [axis])), 0, axis)
    return f


def to_grid(domain: SpectralDomain, f: np.ndarray) -> np.ndarray:
    f = _check_field(domain, f)
    S = domain._synthesis
    if S is not None:
        return _apply_axes(S, f)
    padded = np.zeros(domain.grid_shape)
    padded[(slice(0, domain.modes_per_axis),) * domain.dim] = f
    scale = (np.sqrt(2.0 / np.pi) / 2.0) ** domain.dim
    return scale * scipy.fft.dstn(padded, type=1, axes=range(domain.dim))


def from_grid(domain: SpectralDomain, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != domain.grid_shape:
        raise ValueError(f"grid shape {g.shape} does not match domain {domain.grid_shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("grid contains non-finite values")
    A = domain._analysis
    if A is not None:
        return _apply_axes(A, g)
    M = domain.grid_per_axis
    scale = (np.sqrt(2.0 / np.pi) / 2.0 * np.pi / (M + 1)) ** domain.dim
    full = scipy.fft.dstn(g, type=1, axes=range(domain.dim))
    return scale * full[(slice(0, domain.modes_per_axis),) * domain.dim]


def project(domain: SpectralDomain, f: np.ndarray, k: int) -> np.ndarray:
    f = _check_field(domain, f)
    if not 1 <= k <= domain.modes_per_axis:
        raise ValueError(f"k={k} outside 1..{domain.modes_per_axis}")
    out = np.zeros_like(f)
    sl = (slice(0, k),) * domain.dim
    out[sl] = f[sl]
    return out


def hs_norm(domain: SpectralDomain, f: np.ndarray, s: float) -> float:
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    return float(np.sqrt(np.sum(domain.eigenvalues**s * f * f)))


def inner(f: np.ndarray, g: np.ndarray) -> float:
    """L2 inner product of two fields (modal dot product)."""
    return float(np.vdot(f, g))


def energy_norm(domain: SpectralDomain, state: ModalState) -> float:
    return float(np.sqrt(hs_norm(domain, state.u, 1) ** 2 + hs_norm(domain, state.v, 0) ** 2))


def embed(f: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Zero-pad (or truncate) coefficients to another modal shape."""
    out = np.zeros(shape)
    sl = tuple(slice(0, min(a, b)) for a, b in zip(f.shape, shape))
    out[sl] = f[sl]
    return out
