"""Spatial Hodgkin-Huxley axon with light-gated ChR2 channels.

The membrane potential ``v`` on the axon ``[0, 1]`` (Dirichlet ends)
solves ``v' = (1/C_m) v'' + b_d(v)`` between channel transitions.
Stochastic channels sit at sites ``z_i`` and sense the potential through
a smooth electrode ``phi_{z_i}``; their transition rates depend on the
sensed potential ``Phi_i(v) = <v, phi_{z_i}>`` and, for ChR2, on the light
intensity ``a``.

Potentials follow the shifted convention in which rest is 0 mV, which is
the convention of the classical gating-rate formulas used here.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .pdmp import AffineDrift, AffineFlow, PdmpModel
from .spectral import (
    DEFAULT_K,
    DEFAULT_PANELS,
    NormKind,
    basis_matrix,
    h1_tail,
    heat_rates,
    SpectralField,
    norm,
    project_coeffs,
)

__all__ = [
    "ChannelState",
    "Family",
    "HHParams",
    "HHModel",
    "NoJump",
    "bump",
    "mollifier",
    "BUMP_MASS",
    "alpha_n",
    "beta_n",
    "alpha_m",
    "beta_m",
    "alpha_h",
    "beta_h",
    "clamp_potential",
    "single_site_rates",
    "build_model",
]


class NoJump(ValueError):
    """Raised when a kernel is requested at a state with zero total rate."""


class Family(enum.Enum):
    K = "K"
    NA = "Na"
    CHR2 = "ChR2"


class ChannelState(enum.Enum):
    n0 = "n0"
    n1 = "n1"
    n2 = "n2"
    n3 = "n3"
    n4 = "n4"
    m0h0 = "m0h0"
    m1h0 = "m1h0"
    m2h0 = "m2h0"
    m3h0 = "m3h0"
    m0h1 = "m0h1"
    m1h1 = "m1h1"
    m2h1 = "m2h1"
    m3h1 = "m3h1"
    O1 = "O1"
    O2 = "O2"
    C1 = "C1"
    C2 = "C2"

    @property
    def family(self) -> Family:
        if self.value[0] == "n":
            return Family.K
        if self.value[0] == "m":
            return Family.NA
        return Family.CHR2

    def __repr__(self):
        return self.value


FAMILY_STATES = {fam: tuple(s for s in ChannelState if s.family is fam) for fam in Family}
# conductive state of each family, with its relative conductance
CONDUCTIVE = {ChannelState.n4: 1.0, ChannelState.m3h1: 1.0, ChannelState.O1: 1.0}
RESTING = {Family.K: ChannelState.n0, Family.NA: ChannelState.m0h1, Family.CHR2: ChannelState.C1}


# ---------------------------------------------------------------------------
# gating rates (u in mV, shifted convention; rates in 1/ms)


def _x_over_expm1(w):
    w = np.asarray(w, dtype=float)
    small = np.abs(w) < 1e-6
    safe = np.where(small, 1.0, w)
    return np.where(small, 1.0 / (1.0 + 0.5 * w), safe / np.expm1(safe))


def alpha_n(u):
    return 0.1 * _x_over_expm1(1.0 - 0.1 * np.asarray(u, dtype=float))


def beta_n(u):
    return 0.125 * np.exp(-np.asarray(u, dtype=float) / 80.0)


def alpha_m(u):
    return _x_over_expm1(2.5 - 0.1 * np.asarray(u, dtype=float))


def beta_m(u):
    return 4.0 * np.exp(-np.asarray(u, dtype=float) / 18.0)


def alpha_h(u):
    return 0.07 * np.exp(-np.asarray(u, dtype=float) / 20.0)


def beta_h(u):
    return 1.0 / (np.exp(3.0 - 0.1 * np.asarray(u, dtype=float)) + 1.0)


def clamp_potential(u, lo: float, hi: float, width: float = 10.0):
    """Identity on ``[lo, hi]``; saturates smoothly to ``lo - width`` / ``hi + width``."""
    u = np.asarray(u, dtype=float)
    out = np.where(u > hi, hi + width * np.tanh((u - hi) / width), u)
    return np.where(u < lo, lo - width * np.tanh((lo - u) / width), out)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class HHParams:
    """Model parameters.

    Numerical defaults are literature-style values chosen for this package
    (user-chosen, not taken from any model publication): classical squid
    axon conductances and reversal potentials in the shifted convention,
    and a four-state ChR2 photocycle.
    """

    C_m: float = 1.0  # uF / cm^2
    g_K: float = 36.0  # mS / cm^2
    g_Na: float = 120.0
    g_l: float = 0.3
    g_ChR2: float = 10.0
    V_K: float = -12.0  # mV
    V_Na: float = 115.0
    V_l: float = 10.6
    V_ChR2: float = 65.0
    rho: float = 0.05  # relative conductance of O2
    eps1: float = 0.5  # 1/ms per unit light
    eps2: float = 0.1
    K_d1: float = 0.13  # 1/ms
    K_d2: float = 0.025
    e12: float = 0.053
    e21: float = 0.023
    K_r: float = 0.004
    sites: tuple = (Family.K, Family.NA, Family.CHR2)
    gamma: float = 0.2  # electrode half-width
    a_max: float = 5.0
    n_controls: int = 2  # control grid points on [0, a_max]
    kappa: float = 1.0
    V_ref: Optional[np.ndarray] = None  # sine coefficients (mV); zero if None
    K: int = DEFAULT_K
    T: float = 5.0  # ms
    dt: float = 0.01  # ms
    h_gate: bool = True
    unit_mass_electrode: bool = True
    clamp_width: float = 10.0  # mV
    cost_margin: float = 5.0  # mV, added to the radius of the cost ball
    panels: int = DEFAULT_PANELS

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(Family(s) if not isinstance(s, Family) else s for s in self.sites))
        if self.V_ref is not None:
            object.__setattr__(self, "V_ref", np.asarray(self.V_ref, dtype=float).reshape(-1))

    @property
    def N(self) -> int:
        return len(self.sites)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, self.N + 1) / (self.N + 1)

    @property
    def V_minus(self) -> float:
        return min(self.V_K, self.V_Na, self.V_l, self.V_ChR2)

    @property
    def V_plus(self) -> float:
        return max(self.V_K, self.V_Na, self.V_l, self.V_ChR2)

    @property
    def controls(self) -> np.ndarray:
        return np.linspace(0.0, self.a_max, self.n_controls)

    def v_ref_coeffs(self) -> np.ndarray:
        if self.V_ref is None:
            return np.zeros(self.K)
        if self.V_ref.size > self.K:
            raise ValueError("V_ref has more modes than K")
        return np.concatenate([self.V_ref, np.zeros(self.K - self.V_ref.size)])

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first violated constraint."""
        checks = [
            ("C_m", self.C_m > 0, "must be positive"),
            ("rho", 0.0 <= self.rho <= 1.0, "must lie in [0, 1]"),
            ("a_max", self.a_max > 0, "must be positive"),
            ("kappa", self.kappa >= 0, "must be nonnegative"),
            ("K", self.K >= 1, "must be at least 1"),
            ("T", self.T > 0, "must be positive"),
            ("dt", self.dt > 0, "must be positive"),
            ("n_controls", self.n_controls >= 1, "must be at least 1"),
            ("sites", self.N >= 1, "need at least one channel site"),
            ("clamp_width", self.clamp_width > 0, "must be positive"),
        ]
        for name in ("g_K", "g_Na", "g_l", "g_ChR2", "eps1", "eps2", "K_d1", "K_d2", "e12", "e21", "K_r"):
            checks.append((name, getattr(self, name) >= 0, "must be nonnegative"))
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"hh.{name} {msg}")
        room = float(np.min(np.minimum(self.positions, 1.0 - self.positions)))
        if not 0 < self.gamma < room:
            raise ValueError(f"hh.gamma must lie in (0, {room:g}) so electrodes stay inside the axon")
        if self.V_ref is not None and (self.V_ref.size > self.K or not np.all(np.isfinite(self.V_ref))):
            raise ValueError("hh.V_ref must be finite with at most K coefficients")


# ---------------------------------------------------------------------------
# electrodes


def bump(z):
    """``exp(-1/(1-z^2))`` on ``(-1, 1)``, zero elsewhere."""
    z = np.asarray(z, dtype=float)
    inside = np.abs(z) < 1.0
    out = np.zeros_like(z)
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


BUMP_MASS = 0.44399381616807865  # integral of ``bump`` over (-1, 1)


def mollifier(z_i: float, gamma: float, K: int = DEFAULT_K, panels: int = DEFAULT_PANELS,
              unit_mass: bool = False):
    """Electrode ``phi(z) = bump((z - z_i)/gamma)/gamma`` and its Lipschitz constant.

    Returns ``(field, C_i)`` with ``C_i = <(I - Laplacian) phi, phi>^{1/2}``,
    so that ``|<v - w, phi>| <= C_i ||v - w||_{-1}``.  The raw profile has
    mass ``BUMP_MASS`` for every width; ``unit_mass=True`` rescales it to
    mass one so that ``<v, phi>`` is a genuine local average of ``v``.
    """
    if not 0 < gamma < min(z_i, 1.0 - z_i):
        raise ValueError(f"electrode width {gamma} leaves (0, 1) at site {z_i}")
    scale = gamma * (BUMP_MASS if unit_mass else 1.0)
    coeffs = project_coeffs(lambda z: bump((z - z_i) / gamma) / scale, K, panels)
    fld = SpectralField(coeffs)
    return fld, norm(fld, NormKind.H1V)


# ---------------------------------------------------------------------------
# transition table


def single_site_rates(state: ChannelState, u, a, params: HHParams = None, check: bool = True):
    """Outgoing transitions ``[(target, rate), ...]`` of one channel.

    ``u`` is the sensed potential (scalar or array, already clamped by the
    caller if needed) and ``a`` the light intensity.
    """
    p = params or HHParams()
    if check and np.any((np.asarray(a) < 0) | (np.asarray(a) > p.a_max * (1 + 1e-12))):
        raise ValueError(f"control {a} outside [0, {p.a_max}]")
    S = ChannelState
    fam = state.family
    if fam is Family.CHR2:
        a = np.asarray(a, dtype=float)
        table = {
            S.C1: [(S.O1, p.eps1 * a)],
            S.O1: [(S.C1, p.K_d1), (S.O2, p.e12)],
            S.O2: [(S.O1, p.e21), (S.C2, p.K_d2)],
            S.C2: [(S.O2, p.eps2 * a), (S.C1, p.K_r)],
        }
        return table[state]
    if fam is Family.K:
        k = int(state.value[1])
        out = []
        if k < 4:
            out.append((ChannelState(f"n{k + 1}"), (4 - k) * alpha_n(u)))
        if k > 0:
            out.append((ChannelState(f"n{k - 1}"), k * beta_n(u)))
        return out
    k, h = int(state.value[1]), int(state.value[3])
    out = []
    if k < 3:
        out.append((ChannelState(f"m{k + 1}h{h}"), (3 - k) * alpha_m(u)))
    if k > 0:
        out.append((ChannelState(f"m{k - 1}h{h}"), k * beta_m(u)))
    if p.h_gate:
        if h == 0:
            out.append((ChannelState(f"m{k}h1"), alpha_h(u)))
        else:
            out.append((ChannelState(f"m{k}h0"), beta_h(u)))
    return out


def _exit_rate(state, u, a, p):
    return sum(np.asarray(r, dtype=float) for _, r in single_site_rates(state, u, a, p, check=False))


# ---------------------------------------------------------------------------
# assembled model


@dataclass(frozen=True, eq=False)
class HHModel:
    """Assembled spatial model; all heavy precomputation happens once."""

    params: HHParams
    electrodes: np.ndarray  # (N, K) sine coefficients of phi_{z_i}
    lipschitz: np.ndarray  # (N,) constants C_i
    v_ref: np.ndarray
    cost_cap: float
    rate_bound: float
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, params: HHParams) -> "HHModel":
        params.validate()
        els, lips = [], []
        for z in params.positions:
            fld, c = mollifier(float(z), params.gamma, params.K, params.panels,
                                   params.unit_mass_electrode)
            els.append(fld.coeffs)
            lips.append(c)
        v_ref = params.v_ref_coeffs()
        radius = max(abs(params.V_minus), abs(params.V_plus)) + params.cost_margin
        cap = (radius + float(np.linalg.norm(v_ref))) ** 2
        model = cls(params, np.array(els), np.array(lips), v_ref, cap, 0.0)
        object.__setattr__(model, "rate_bound", model._rate_bound())
        return model

    # -- electrodes and drift ------------------------------------------------

    @property
    def N(self) -> int:
        return self.params.N

    def sensed(self, v) -> np.ndarray:
        """``Phi_i(v)`` for all sites; shape ``v.shape[:-1] + (N,)``."""
        return np.asarray(getattr(v, "coeffs", v), dtype=float) @ self.electrodes.T

    def phi_i(self, v, i: int) -> float:
        return float(np.asarray(getattr(v, "coeffs", v), dtype=float) @ self.electrodes[i])

    def site_weights(self, d: Sequence[ChannelState]) -> tuple[np.ndarray, np.ndarray]:
        """Per-site ``(gamma_i, c_i)`` of the affine drift (already divided by N)."""
        p = self.params
        gam, c = np.zeros(self.N), np.zeros(self.N)
        for i, s in enumerate(d):
            g = p.g_l
            gv = p.g_l * p.V_l
            if s is ChannelState.n4:
                g += p.g_K
                gv += p.g_K * p.V_K
            elif s is ChannelState.m3h1:
                g += p.g_Na
                gv += p.g_Na * p.V_Na
            elif s in (ChannelState.O1, ChannelState.O2):
                w = p.g_ChR2 * (1.0 if s is ChannelState.O1 else p.rho)
                g += w
                gv += w * p.V_ChR2
            gam[i], c[i] = gv / self.N, g / self.N
        return gam, c

    def drift(self, d, a=None) -> AffineDrift:
        self._check_config(d)
        gam, c = self.site_weights(d)
        return AffineDrift(gam @ self.electrodes, c, self.electrodes, self.electrodes)

    def _check_config(self, d):
        if len(d) != self.N:
            raise ValueError(f"configuration has {len(d)} sites, model has {self.N}")
        for s, fam in zip(d, self.params.sites):
            if s.family is not fam:
                raise ValueError(f"state {s.value} does not belong to family {fam.value}")

    # -- rates and kernel ----------------------------------------------------

    def _u(self, v):
        p = self.params
        return clamp_potential(self.sensed(v), p.V_minus, p.V_plus, p.clamp_width)

    def transitions(self, v, d, a):
        """Flat list ``[(site, target, rate_array), ...]`` at field(s) ``v``."""
        u = self._u(v)
        out = []
        for i, s in enumerate(d):
            for tgt, r in single_site_rates(s, u[..., i], a, self.params, check=False):
                out.append((i, tgt, np.broadcast_to(np.asarray(r, dtype=float), u.shape[:-1])))
        return out

    def total_rate(self, v, d, a) -> np.ndarray:
        self._check_control(a)
        tr = self.transitions(v, d, a)
        shape = np.shape(self.sensed(v))[:-1]
        total = np.zeros(shape)
        for _, _, r in tr:
            total = total + r
        return total if shape else float(total)

    def _check_control(self, a):
        a = np.asarray(a)
        if np.any((a < 0) | (a > self.params.a_max * (1 + 1e-12))):
            raise ValueError(f"control outside [0, {self.params.a_max}]")

    def kernel(self, v, d, a, strict: bool = False):
        """Successor configurations and their probabilities.

        Rows with zero total rate are returned as zeros unless ``strict``,
        in which case :class:`NoJump` is raised.
        """
        tr = self.transitions(v, d, a)
        succ = []
        for i, tgt, _ in tr:
            nd = list(d)
            nd[i] = tgt
            succ.append(tuple(nd))
        rates = np.stack([r for _, _, r in tr], axis=-1)
        total = rates.sum(axis=-1, keepdims=True)
        if strict and np.any(total <= 0):
            raise NoJump("total jump rate vanishes; no transition possible")
        probs = np.divide(rates, total, out=np.zeros_like(rates), where=total > 0)
        return succ, probs

    jump_kernel = kernel

    # -- costs ---------------------------------------------------------------

    def clipped_misfit(self, v) -> np.ndarray:
        """``||v - V_ref||^2`` inside the cost ball, smoothly capped outside."""
        v = np.asarray(getattr(v, "coeffs", v), dtype=float)
        y = np.sum((v - self.v_ref) ** 2, axis=-1)
        C = self.cost_cap
        s = 0.1 * C
        return np.where(y <= C, y, C + s * np.tanh((y - C) / s))

    def running_cost(self, v, d, a) -> np.ndarray:
        return self.params.kappa * self.clipped_misfit(v) + np.asarray(a, dtype=float)

    @property
    def cost_bound(self) -> float:
        return self.params.kappa * 1.1 * self.cost_cap + self.params.a_max

    # -- rate bound ----------------------------------------------------------

    def _rate_bound(self) -> float:
        p = self.params
        u = np.linspace(p.V_minus - p.clamp_width, p.V_plus + p.clamp_width, 2001)
        total = 0.0
        for fam in p.sites:
            best = 0.0
            for s in FAMILY_STATES[fam]:
                for a in (0.0, p.a_max):
                    best = max(best, float(np.max(_exit_rate(s, u, a, p))))
            total += best
        return 1.05 * total

    # -- enumeration and labels ---------------------------------------------

    def electrode_tail(self) -> float:
        """Summed H1 tail of the electrodes beyond the retained modes."""
        if "tail" not in self._cache:
            p = self.params
            scale = p.gamma * (BUMP_MASS if p.unit_mass_electrode else 1.0)
            self._cache["tail"] = float(sum(
                h1_tail(lambda z, zi=zi: bump((z - zi) / p.gamma) / scale, p.K)
                for zi in p.positions))
        return self._cache["tail"]

    def invariance_excursion(self, starts, configs, controls=None, duration: float = 1.0,
                             n_times: int = 21, z_points: int = 401) -> float:
        """Largest distance by which flows leave ``[V_-, V_+]`` on a z-grid.

        ``starts`` is an ``(n, K)`` array of initial coefficient vectors; the
        flow is sampled at ``n_times`` equally spaced times in ``(0, duration]``
        for each configuration and control.  Zero means the band was kept.
        """
        p = self.params
        B = basis_matrix(np.linspace(0.0, 1.0, z_points), p.K)
        X = np.atleast_2d(np.asarray(starts, dtype=float))
        controls = (0.0, p.a_max) if controls is None else controls
        worst = 0.0
        for d in configs:
            for a in controls:
                fl = AffineFlow(self.drift(d, a), heat_rates(p.K, 1.0 / p.C_m))
                for r in np.linspace(0.0, duration, n_times)[1:]:
                    v = fl.at(X, r) @ B.T
                    worst = max(worst, float(v.max()) - p.V_plus, p.V_minus - float(v.min()))
        return worst

    def configurations(self) -> tuple:
        return tuple(itertools.product(*(FAMILY_STATES[f] for f in self.params.sites)))

    def resting(self) -> tuple:
        return tuple(RESTING[f] for f in self.params.sites)

    @staticmethod
    def label(d) -> str:
        return "|".join(s.value for s in d)

    @staticmethod
    def parse_label(text: str) -> tuple:
        return tuple(ChannelState(t) for t in text.split("|"))

    def to_pdmp(self) -> PdmpModel:
        p = self.params
        return PdmpModel(
            n_coeffs=p.K,
            controls=p.controls,
            drift=self.drift,
            rate=self.total_rate,
            kernel=self.kernel,
            running_cost=self.running_cost,
            terminal_cost=lambda v, d: np.zeros(np.shape(v)[:-1]) if np.ndim(v) > 1 else 0.0,
            rate_bound=self.rate_bound,
            horizon=p.T,
            diffusivity=1.0 / p.C_m,
            drift_control_free=True,
            cost_bounds=(self.cost_bound, 0.0),
            modes=self.configurations() if self.N <= 3 else None,
            mode_label=self.label,
            dt=p.dt,
            name=f"hh-N{self.N}",
        )


def build_model(params: HHParams) -> PdmpModel:
    """Validate ``params`` and return the controlled PDMP (terminal cost zero)."""
    return HHModel.build(params).to_pdmp()


def with_sites(params: HHParams, sites: Sequence) -> HHParams:
    return replace(params, sites=tuple(sites))
