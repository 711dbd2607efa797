"""Control randomization: the control becomes an autonomous jump component.

The enlarged process ``(X, I)`` follows the PDMP dynamics with control
``I`` frozen between jumps, while ``I`` itself jumps at the epochs of a
Poisson clock of intensity ``lambda0(A)`` to a point drawn from
``lambda0``.  Multiplying the clock intensity by a positive ``nu(b)``
changes the law; the density of the new law against the reference one is
the Doleans-Dade exponential

    L = exp( int sum_b (1 - nu_b) lambda0_b dr ) * prod_{control jumps} nu(A_n).

Minimising the expected cost over ``nu`` gives the dual value.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .pdmp import ModelError, PdmpModel, _sample_grid, map_paths, path_rng, sample_jump_target

__all__ = [
    "Lambda0",
    "NuPolicy",
    "JumpKind",
    "XIPath",
    "simulate_xi",
    "doleans_weight",
    "dual_cost",
    "estimate_dual",
    "Estimator",
    "TabularNuFamily",
    "NuSearchResult",
    "minimize_over_nu",
]


@dataclass(frozen=True, eq=False)
class Lambda0:
    """Finite measure on the control grid (one positive weight per point)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0 or np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("lambda0 weights must be finite and strictly positive")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n_controls: int, mass: float = 1.0) -> "Lambda0":
        return cls(np.full(n_controls, mass / n_controls))

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class NuPolicy:
    """Intensity multiplier ``rule(s, x, mode, I_index) -> nu`` over the control grid.

    ``jump_constant`` declares that the rule does not change between jumps
    of ``(X, I)``; the simulator then uses the exact local thinning bound.
    """

    rule: Callable[[float, np.ndarray, object, int], np.ndarray]
    nu_min: float = 1e-3
    nu_max: float = 1e3
    jump_constant: bool = False
    name: str = "nu"

    def __post_init__(self):
        if not 0 < self.nu_min <= self.nu_max < np.inf:
            raise ValueError("need 0 < nu_min <= nu_max < inf")

    def __call__(self, s, x, mode, i_idx) -> np.ndarray:
        nu = np.asarray(self.rule(s, x, mode, i_idx), dtype=float)
        tol = 1e-12 * self.nu_max
        if np.any(nu < self.nu_min - tol) or np.any(nu > self.nu_max + tol) or not np.all(np.isfinite(nu)):
            raise ValueError(f"nu = {nu} leaves [{self.nu_min}, {self.nu_max}]")
        return nu

    @classmethod
    def one(cls) -> "NuPolicy":
        return cls(lambda s, x, m, i: 1.0, 1.0, 1.0, True, "one")

    @classmethod
    def constant(cls, c: float) -> "NuPolicy":
        c = float(c)
        return cls(lambda s, x, m, i: c, min(c, 1.0), max(c, 1.0), True, f"const({c:g})")

    @property
    def is_one(self) -> bool:
        return self.name == "one"


class JumpKind(enum.Enum):
    MODE = "mode"
    CONTROL = "control"


@dataclass
class XISegment:
    start: float
    end: float
    mode: object
    control: int  # index into the control grid
    times: np.ndarray
    fields: np.ndarray


@dataclass
class XIPath:
    t0: float
    horizon: float
    segments: list
    jumps: list = field(default_factory=list)  # (time, JumpKind, mark)

    @property
    def control_jumps(self) -> list:
        return [j for j in self.jumps if j[1] is JumpKind.CONTROL]

    @property
    def mode_jumps(self) -> list:
        return [j for j in self.jumps if j[1] is JumpKind.MODE]

    @property
    def terminal_field(self):
        return self.segments[-1].fields[-1]

    @property
    def terminal_mode(self):
        return self.segments[-1].mode

    def state_at(self, model: PdmpModel, times) -> tuple[np.ndarray, list, np.ndarray]:
        """Fields, modes and control indices at the given (sorted) times (right-continuous)."""
        times = np.asarray(times, dtype=float)
        fields = np.empty((times.size, model.n_coeffs))
        modes = [None] * times.size
        ctl = np.empty(times.size, dtype=int)
        starts = np.array([s.start for s in self.segments])
        seg_idx = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(self.segments) - 1)
        for k in np.unique(seg_idx):
            seg = self.segments[k]
            sel = np.nonzero(seg_idx == k)[0]
            fl = model.flow(seg.mode, model.controls[seg.control])
            fields[sel] = fl.at(seg.fields[0], np.maximum(times[sel] - seg.start, 0.0))
            ctl[sel] = seg.control
            for j in sel:
                modes[j] = seg.mode
        return fields, modes, ctl


def _draw_index(weights: np.ndarray, rng) -> int:
    cdf = np.cumsum(weights)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(j, weights.size - 1)


def simulate_xi(model: PdmpModel, lam0: Lambda0, nu: Optional[NuPolicy], t: float, x, mode, a, rng) -> XIPath:
    """One path of ``(X, I)`` on ``[t, T]`` under intensity multiplier ``nu``.

    Mode and control jumps compete; the candidate epochs come from a single
    Poisson clock that dominates ``lambda + sum_b nu_b lambda0_b``.
    """
    nu = nu or NuPolicy.one()
    if lam0.weights.size != model.controls.size:
        raise ValueError("lambda0 must have one weight per control")
    T = model.horizon
    I = int(model.control_index(a))
    x = np.asarray(getattr(x, "coeffs", x), dtype=float).copy()
    M = model.rate_bound
    w0 = lam0.weights
    segments, jumps = [], []
    s0, cur_x, cur_m = float(t), x, mode
    while True:
        a_cur = float(model.controls[I])
        fl = model.flow(cur_m, a_cur)
        if nu.jump_constant:
            nu_vec = np.broadcast_to(nu(s0, cur_x, cur_m, I), w0.shape)
            bound = M + float(np.dot(nu_vec, w0))
        else:
            bound = M + nu.nu_max * lam0.mass
        s, event = s0, None
        while True:
            s += rng.exponential(1.0 / bound)
            if s >= T:
                break
            xc = fl.at(cur_x, s - s0)
            lam = float(model.rate(xc, cur_m, a_cur))
            if lam > M * (1 + 1e-9) + 1e-12:
                raise ModelError(f"rate {lam:.6g} exceeds declared bound {M:.6g}")
            if not nu.jump_constant:
                nu_vec = np.broadcast_to(nu(s, xc, cur_m, I), w0.shape)
            ctl_w = nu_vec * w0
            r = rng.random() * bound
            if r < lam:
                event = (JumpKind.MODE, xc)
                break
            if r < lam + ctl_w.sum():
                event = (JumpKind.CONTROL, xc, ctl_w)
                break
        end = T if event is None else s
        times = _sample_grid(s0, end, model.dt) if end > s0 else np.array([s0])
        segments.append(XISegment(s0, end, cur_m, I, times, fl.at(cur_x, times - s0)))
        if event is None:
            break
        if len(jumps) >= model.max_jumps:
            raise RuntimeError(f"more than {model.max_jumps} jumps before the horizon")
        xc = event[1]
        if event[0] is JumpKind.MODE:
            cur_m = sample_jump_target(model, xc, cur_m, a_cur, rng)
            jumps.append((end, JumpKind.MODE, cur_m))
        else:
            I = _draw_index(event[2], rng)
            jumps.append((end, JumpKind.CONTROL, I))
        s0, cur_x = end, xc
    return XIPath(float(t), T, segments, jumps)


def doleans_weight(path: XIPath, nu: NuPolicy, lam0: Lambda0) -> float:
    """Density of the ``nu``-law against the reference law along ``path``."""
    w0 = lam0.weights
    log_w = 0.0
    for seg in path.segments:
        if seg.end <= seg.start:
            continue
        if nu.jump_constant:
            nu_vec = np.broadcast_to(nu(seg.start, seg.fields[0], seg.mode, seg.control), w0.shape)
            log_w += (seg.end - seg.start) * float(np.dot(1.0 - nu_vec, w0))
        else:
            vals = [float(np.dot(1.0 - np.broadcast_to(nu(s, xf, seg.mode, seg.control), w0.shape), w0))
                    for s, xf in zip(seg.times, seg.fields)]
            log_w += float(np.trapezoid(vals, seg.times))
    # jump j ends segment j and starts segment j + 1
    for j, (tj, kind, mark) in enumerate(path.jumps):
        if kind is not JumpKind.CONTROL:
            continue
        prev = path.segments[j]
        nu_vec = np.broadcast_to(nu(tj, prev.fields[-1], prev.mode, prev.control), w0.shape)
        log_w += math.log(float(nu_vec[mark]))
    return math.exp(log_w)


def dual_cost(model: PdmpModel, path: XIPath) -> float:
    """``int f(X, I) dr + g(X_T)`` by trapezoid quadrature on each segment."""
    total = 0.0
    for seg in path.segments:
        if seg.times.size > 1:
            a = float(model.controls[seg.control])
            f = np.asarray(model.running_cost(seg.fields, seg.mode, a), dtype=float)
            total += float(np.trapezoid(np.broadcast_to(f, seg.times.shape), seg.times))
    return total + float(model.terminal_cost(path.terminal_field, path.terminal_mode))


class Estimator(enum.Enum):
    DIRECT = "direct"
    WEIGHTED = "weighted"


def dual_samples(model, lam0, nu, t, x, mode, a, n, seed, method=Estimator.DIRECT, jobs=1,
                 purpose: str = "dual") -> np.ndarray:
    method = Estimator(method)
    ref = NuPolicy.one()

    def one(i):
        rng = path_rng(seed, i, purpose)
        if method is Estimator.DIRECT:
            return dual_cost(model, simulate_xi(model, lam0, nu, t, x, mode, a, rng))
        path = simulate_xi(model, lam0, ref, t, x, mode, a, rng)
        w = 1.0 if nu.is_one else doleans_weight(path, nu, lam0)
        return w * dual_cost(model, path)

    return np.asarray(map_paths(one, n, jobs), dtype=float)


def estimate_dual(model: PdmpModel, lam0: Lambda0, nu: NuPolicy, t: float, x, mode, a, n: int, seed: int,
                  method=Estimator.DIRECT, jobs: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate ``(mean, stderr)`` of the randomized cost under ``nu``.

    ``DIRECT`` simulates under ``nu``; ``WEIGHTED`` simulates the reference
    law and reweights by the Doleans-Dade density.  Both use the same
    per-path seeds, so for ``nu = 1`` they coincide path by path.
    """
    if n < 2:
        raise ValueError("need at least two paths")
    vals = dual_samples(model, lam0, nu, t, x, mode, a, n, seed, method, jobs)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------------------
# parametric search


@dataclass(frozen=True)
class TabularNuFamily:
    """``nu(b | group) = clip(exp(theta[group, b]))``; groups are modes or a single group."""

    model: PdmpModel
    by_mode: bool = True
    nu_min: float = 1e-2
    nu_max: float = 20.0

    @property
    def n_groups(self) -> int:
        return self.model.mode_count if self.by_mode else 1

    @property
    def shape(self) -> tuple:
        return (self.n_groups, self.model.controls.size)

    def policy(self, theta) -> NuPolicy:
        table = np.clip(np.exp(np.asarray(theta, dtype=float).reshape(self.shape)), self.nu_min, self.nu_max)
        model = self.model
        if self.by_mode:
            rule = lambda s, x, m, i: table[model.mode_index(m)]  # noqa: E731
        else:
            rule = lambda s, x, m, i: table[0]  # noqa: E731
        return NuPolicy(rule, self.nu_min, self.nu_max, True, name="tabular")


@dataclass
class NuSearchResult:
    theta: np.ndarray
    nu: NuPolicy
    value: float
    stderr: float
    search_value: float
    evaluations: int
    exhausted: bool
    trace: list

    def write_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "parameters", "mean", "stderr"])
            for it, th, m, se in self.trace:
                w.writerow([it, " ".join(f"{v:.8g}" for v in th), f"{m:.10g}", f"{se:.10g}"])


def minimize_over_nu(model: PdmpModel, lam0: Lambda0, family: TabularNuFamily, t: float, x, mode, a,
                     n_paths: int = 500, seed: int = 0, budget: int = 60, theta0=None,
                     method=Estimator.DIRECT, jobs: int = 1, starts: Sequence = (),
                     step: float = 1.0) -> NuSearchResult:
    """Nelder-Mead over ``family`` with common random numbers.

    The best parameter is re-estimated on an independent seed stream so the
    reported value is not biased downward by the search itself.  Extra
    starting points in ``starts`` are evaluated first and the best one seeds
    the simplex.
    """
    trace = []

    def objective(theta):
        m, se = estimate_dual(model, lam0, family.policy(theta), t, x, mode, a, n_paths, seed, method, jobs)
        trace.append((len(trace), np.asarray(theta, dtype=float).reshape(-1).copy(), m, se))
        return m

    x0 = np.zeros(int(np.prod(family.shape))) if theta0 is None else np.asarray(theta0, dtype=float).reshape(-1)
    if starts:
        cands = [x0] + [np.asarray(s, dtype=float).reshape(-1) for s in starts]
        x0 = min(cands, key=objective)
    remaining = max(budget - len(trace), 1)
    # unit steps in log-intensity; the default simplex around zero is far too small
    simplex = np.vstack([x0, x0 + step * np.eye(x0.size)])
    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxfev": remaining, "xatol": 1e-2, "fatol": 1e-4, "initial_simplex": simplex})
    best = min(trace, key=lambda r: r[2])
    exhausted = len(trace) >= budget and not res.success
    nu = family.policy(best[1])
    check = dual_samples(model, lam0, nu, t, x, mode, a, n_paths, seed, method, jobs, purpose="dual-check")
    val, se = float(check.mean()), float(check.std(ddof=1) / math.sqrt(n_paths))
    return NuSearchResult(best[1], nu, val, se, best[2], len(trace), exhausted, trace)
