"""Truncated sine-series representation of L2(0, 1) with Dirichlet boundary.

A field is stored through its coefficients on the orthonormal basis
``f_k(z) = sqrt(2) sin(k pi z)``, ``k = 1..K``.  The heat semigroup is
diagonal in this basis, which is what makes the spectral cutoff the
natural discretisation for the flows used elsewhere in the package.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NormKind",
    "SpectralField",
    "basis_matrix",
    "heat_rates",
    "project",
    "project_coeffs",
    "eval_pointwise",
    "norm",
    "inner",
    "semigroup_apply",
    "h1_tail",
    "DEFAULT_K",
    "DEFAULT_PANELS",
]

DEFAULT_K = 32
DEFAULT_PANELS = 512

SQRT2 = np.sqrt(2.0)


class NormKind(enum.Enum):
    L2 = "L2"
    MINUS1 = "MINUS1"
    H1V = "H1V"


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable vector of sine coefficients (potential units, mV)."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.size == 0:
            raise ValueError("a field needs at least one coefficient")
        if not np.all(np.isfinite(c)):
            raise ValueError("field coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def K(self) -> int:
        return self.coeffs.size

    @classmethod
    def zeros(cls, K: int) -> "SpectralField":
        return cls(np.zeros(K))

    @classmethod
    def basis(cls, k: int, K: int) -> "SpectralField":
        """The field ``f_k`` (1-based mode number)."""
        if not 1 <= k <= K:
            raise ValueError(f"mode {k} outside 1..{K}")
        c = np.zeros(K)
        c[k - 1] = 1.0
        return cls(c)

    def _check(self, other: "SpectralField") -> None:
        if other.K != self.K:
            raise ValueError(f"dimension mismatch: K={self.K} vs K={other.K}")

    def __add__(self, other):
        self._check(other)
        return SpectralField(self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return SpectralField(self.coeffs - other.coeffs)

    def __mul__(self, scalar: float):
        return SpectralField(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(-self.coeffs)

    def __eq__(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        return self.K == other.K and bool(np.array_equal(self.coeffs, other.coeffs))

    def __hash__(self):
        return hash(self.coeffs.tobytes())

    def __repr__(self):
        head = np.array2string(self.coeffs[:4], precision=4)
        return f"SpectralField(K={self.K}, coeffs[:4]={head})"


def _coeffs(v) -> np.ndarray:
    return v.coeffs if isinstance(v, SpectralField) else np.asarray(v, dtype=float)


def mode_numbers(K: int) -> np.ndarray:
    return np.arange(1, K + 1, dtype=float)


def heat_rates(K: int, c: float = 1.0) -> np.ndarray:
    """Decay rates ``c k^2 pi^2`` of the Dirichlet heat semigroup."""
    k = mode_numbers(K)
    return c * (k * np.pi) ** 2


def basis_matrix(z, K: int) -> np.ndarray:
    """Values ``f_k(z_j)`` as a ``(len(z), K)`` array."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return SQRT2 * np.sin(np.pi * np.outer(z, mode_numbers(K)))


def _simpson_weights(panels: int) -> tuple[np.ndarray, np.ndarray]:
    if panels <= 0 or panels % 2:
        raise ValueError(f"composite Simpson needs a positive even panel count, got {panels}")
    z = np.linspace(0.0, 1.0, panels + 1)
    w = np.ones(panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return z, w / (3.0 * panels)


def project_coeffs(f: Callable, K: int, panels: int = DEFAULT_PANELS) -> np.ndarray:
    z, w = _simpson_weights(panels)
    vals = np.asarray(f(z), dtype=float)
    if vals.shape != z.shape:
        vals = np.broadcast_to(vals, z.shape).astype(float)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise ValueError(f"non-finite sample of f at z={z[bad][0]:.6g}")
    return basis_matrix(z, K).T @ (w * vals)


def project(f: Callable, K: int = DEFAULT_K, panels: int = DEFAULT_PANELS) -> SpectralField:
    """Sine coefficients of ``f`` by composite Simpson quadrature.

    ``f`` must accept an array of points in [0, 1].
    """
    if K <= 0:
        raise ValueError("K must be positive")
    return SpectralField(project_coeffs(f, K, panels))


def eval_pointwise(v, z):
    """Evaluate ``sum_k c_k sqrt(2) sin(k pi z)``; ``z`` scalar or array in [0, 1]."""
    c = _coeffs(v)
    za = np.asarray(z, dtype=float)
    if np.any((za < 0.0) | (za > 1.0)):
        raise ValueError("evaluation point outside [0, 1]")
    out = basis_matrix(za.reshape(-1), c.shape[-1]) @ c.T
    if za.ndim == 0 and c.ndim == 1:
        return float(out[0])
    return out


def _weights(kind: NormKind, K: int) -> np.ndarray:
    if kind is NormKind.L2:
        return np.ones(K)
    lam = 1.0 + (mode_numbers(K) * np.pi) ** 2
    if kind is NormKind.MINUS1:
        return 1.0 / lam
    if kind is NormKind.H1V:
        return lam
    raise ValueError(f"unknown norm {kind!r}")


def norm(v, kind: NormKind = NormKind.L2):
    """L2, (I - Laplacian)^{-1/2}-weighted, or H^1_0 norm.

    Accepts a field or a stack of coefficient vectors (last axis = modes).
    """
    c = _coeffs(v)
    kind = NormKind(kind)
    out = np.sqrt(np.sum(_weights(kind, c.shape[-1]) * c**2, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def inner(v, w) -> float:
    a, b = _coeffs(v), _coeffs(w)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: K={a.shape[-1]} vs K={b.shape[-1]}")
    return float(a @ b)


def semigroup_apply(v, r: float, c: float = 1.0):
    """Heat semigroup ``exp(c r Laplacian)`` applied to ``v``."""
    if r < 0:
        raise ValueError("semigroup time must be nonnegative")
    if c <= 0:
        raise ValueError("diffusivity must be positive")
    coeffs = _coeffs(v)
    out = np.exp(-r * heat_rates(coeffs.shape[-1], c)) * coeffs
    # stacks of fields (last axis = modes) come back as plain arrays
    return SpectralField(out) if out.ndim == 1 else out


def h1_tail(f: Callable, K: int, K_ref: int | None = None, panels: int = 4096) -> float:
    """H^1_0 norm of the modes ``K+1..K_ref`` of ``f`` (truncation error proxy)."""
    K_ref = 4 * K if K_ref is None else K_ref
    if K_ref <= K:
        return 0.0
    c = project_coeffs(f, K_ref, panels)
    return norm(np.concatenate([np.zeros(K), c[K:]]), NormKind.H1V)
