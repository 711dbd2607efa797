"""Value function by fixed-point iteration of the first-jump Bellman operator.

For a bounded ``psi`` the operator is

    T psi(t, x) = inf_u  int_0^{T-t} chi_u(s) [f + lambda Q psi(t+s, .)] ds
                          + chi_u(T-t) g(phi_u(T-t, x)),

with ``chi_u(s) = exp(-int_0^s lambda)``.  When the flow ignores the
control, the inner infimum over open-loop controls is itself a scalar
deterministic control problem along one fixed path; its value solves

    w(T) = g(phi(T-t, x)),
    -w'(r) = min_a { f + lambda (Q psi(r, .) - w(r)) },

which is integrated backward by RK4 for every lattice point at once.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import poisson

from .pdmp import OpenLoopPolicy, PdmpModel, map_paths, path_rng, simulate

__all__ = [
    "Lattice",
    "ValueGrid",
    "NonContractionError",
    "apply_T",
    "bellman_update",
    "solve",
    "brute_force_value",
    "dpp_residual",
    "a_priori_bound",
]


class NonContractionError(RuntimeError):
    pass


def a_priori_bound(model: PdmpModel) -> float:
    """``sup|f| T + sup|g|`` from the declared cost bounds."""
    if model.cost_bounds is None:
        raise ValueError("model declares no cost bounds")
    fs, gs = model.cost_bounds
    return fs * model.horizon + gs


# ---------------------------------------------------------------------------
# lattice and tabulated values


@dataclass(frozen=True, eq=False)
class Lattice:
    """Tensor grid over the first ``len(axes)`` sine coefficients.

    Remaining coefficients are taken from ``base`` (zero by default).  With
    no axes the lattice is the single field ``base``.
    """

    axes: tuple = ()
    n_coeffs: int = 1
    base: Optional[np.ndarray] = None

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float).reshape(-1) for a in self.axes)
        for a in axes:
            if a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("lattice axes need at least two increasing values")
        if len(axes) > self.n_coeffs:
            raise ValueError("more lattice axes than coefficients")
        base = np.zeros(self.n_coeffs) if self.base is None else np.asarray(self.base, dtype=float).reshape(-1)
        if base.shape != (self.n_coeffs,):
            raise ValueError("base field has wrong dimension")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "base", base)

    @property
    def m(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.axes else 1

    def points(self) -> np.ndarray:
        if not self.axes:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=-1)

    def fields(self) -> np.ndarray:
        out = np.tile(self.base, (self.size, 1))
        out[:, : self.m] = self.points()
        return out

    def features(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)[..., : self.m]


@dataclass
class ValueGrid:
    """Values on ``times x modes x lattice``.

    ``values`` has shape ``(n_times, n_modes, lattice.size)``.  Evaluation is
    linear in time, multilinear in the lattice features and exact in the
    mode; queries outside the lattice hull raise ``ValueError``.
    """

    times: np.ndarray
    lattice: Lattice
    modes: tuple
    values: np.ndarray
    residuals: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.times.size, len(self.modes), self.lattice.size)
        if self.values.shape != expect:
            raise ValueError(f"values shape {self.values.shape} != {expect}")
        self._mode_index = {m: i for i, m in enumerate(self.modes)}

    def mode_index(self, mode) -> int:
        return self._mode_index[mode]

    def _bracket(self, grid, q, what):
        span = grid[-1] - grid[0]
        eps = 1e-9 * max(1.0, abs(span))
        if np.any(q < grid[0] - eps) or np.any(q > grid[-1] + eps):
            bad = q[(q < grid[0] - eps) | (q > grid[-1] + eps)][0]
            raise ValueError(f"{what} {bad:.6g} outside tabulated range [{grid[0]:.6g}, {grid[-1]:.6g}]")
        q = np.clip(q, grid[0], grid[-1])
        i = np.clip(np.searchsorted(grid, q, side="right") - 1, 0, grid.size - 2)
        w = (q - grid[i]) / (grid[i + 1] - grid[i])
        return i, w

    def evaluate(self, t, x, mode_idx) -> np.ndarray:
        """Vectorised evaluation; ``t`` (B,), ``x`` (B, K), ``mode_idx`` (B,) ints."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float).reshape(t.size, -1)
        mi = np.broadcast_to(np.asarray(mode_idx, dtype=int), t.shape)
        if self.times.size == 1:
            ti, tw = np.zeros(t.size, int), np.zeros(t.size)
            V = np.concatenate([self.values, self.values])
        else:
            ti, tw = self._bracket(self.times, t, "time")
            V = self.values
        V = V.reshape((V.shape[0], V.shape[1]) + (self.lattice.shape or (1,)))
        feats = self.lattice.features(x)
        corners = []
        for k, ax in enumerate(self.lattice.axes):
            corners.append(self._bracket(ax, feats[:, k], f"feature {k + 1}"))
        out = np.zeros(t.size)
        for dt_ in (0, 1):
            wt = tw if dt_ else 1.0 - tw
            for combo in np.ndindex(*([2] * self.lattice.m)):
                w = wt.copy()
                idx = [ti + dt_, mi]
                for k, c in enumerate(combo):
                    i, wk = corners[k]
                    w = w * (wk if c else 1.0 - wk)
                    idx.append(i + c)
                if not self.lattice.m:
                    idx.append(np.zeros(t.size, int))
                out += w * V[tuple(idx)]
        return out

    def __call__(self, t: float, x, mode) -> float:
        x = np.asarray(getattr(x, "coeffs", x), dtype=float)
        return float(self.evaluate([t], x[None, :], [self.mode_index(mode)])[0])

    # -- export / import ----------------------------------------------------

    def to_files(self, csv_path, json_path, mode_label=str) -> None:
        pts = self.lattice.points()
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time"] + [f"c{k + 1}" for k in range(self.lattice.m)] + ["mode", "value"])
            for i, t in enumerate(self.times):
                for j, m in enumerate(self.modes):
                    for p in range(self.lattice.size):
                        w.writerow([f"{t:.10g}"] + [f"{c:.10g}" for c in pts[p]]
                                   + [mode_label(m), f"{self.values[i, j, p]:.12g}"])
        side = {
            "schema": "value-grid/1",
            "times": self.times.tolist(),
            "axes": [a.tolist() for a in self.lattice.axes],
            "n_coeffs": self.lattice.n_coeffs,
            "base": self.lattice.base.tolist(),
            "modes": [mode_label(m) for m in self.modes],
            "residuals": [float(r) for r in self.residuals],
            "meta": self.meta,
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)

    @classmethod
    def from_files(cls, csv_path, json_path, parse_mode=None) -> "ValueGrid":
        with open(json_path, encoding="utf-8") as fh:
            side = json.load(fh)
        lat = Lattice(tuple(side["axes"]), side["n_coeffs"], np.asarray(side["base"]))
        labels = side["modes"]
        modes = tuple(parse_mode(s) for s in labels) if parse_mode else tuple(
            int(s) if s.lstrip("-").isdigit() else s for s in labels)
        vals = np.zeros((len(side["times"]), len(modes), lat.size))
        with open(csv_path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        vals.reshape(-1)[:] = [float(r[-1]) for r in rows]
        return cls(np.asarray(side["times"]), lat, modes, vals, side["residuals"], side["meta"])


# ---------------------------------------------------------------------------
# Bellman operator


class _BellmanEngine:
    """Precomputed flow data for repeated applications of the operator.

    Start times are the uniform grid ``times``; the backward sweep runs in
    absolute time over ``substeps`` RK4 steps per grid interval, and every
    (start time, lattice point, mode) carries its own scalar ODE.
    """

    def __init__(self, model: PdmpModel, times: np.ndarray, fields: np.ndarray, substeps: int = 1):
        if model.modes is None:
            raise ValueError("value iteration needs a finite mode set")
        times = np.asarray(times, dtype=float)
        if times.size < 2 or not np.allclose(np.diff(times), times[1] - times[0], rtol=1e-9, atol=1e-12):
            raise ValueError("value iteration needs a uniform time grid with at least two points")
        if abs(times[-1] - model.horizon) > 1e-9:
            raise ValueError("time grid must end at the horizon")
        self.model, self.times, self.fields = model, times, np.asarray(fields, dtype=float)
        self.substeps = max(int(substeps), 1)
        self.h = (times[1] - times[0]) / self.substeps
        n_steps = (times.size - 1) * self.substeps
        self.n_steps = n_steps
        self.stage_r = model.horizon - 0.5 * self.h * np.arange(2 * n_steps + 1)
        elapsed = np.maximum(self.stage_r[:, None] - times[None, :], 0.0)  # (S, n_t)
        self.exact_min = model.drift_control_free
        self.modes = model.modes
        self.nA = model.controls.size
        P = self.fields.shape[0]
        shape = (self.stage_r.size, times.size, P)
        self.shape = shape
        self.data = {}
        for mi, m in enumerate(self.modes):
            for ai, a in enumerate(model.controls):
                if self.exact_min and ai > 0:
                    X = self.data[(mi, 0)]["X"]
                else:
                    fl = model.flow(m, a)
                    X = fl.at(self.fields[None, None, :, :], elapsed[:, :, None])
                af = float(a)
                lam = np.broadcast_to(np.asarray(model.rate(X, m, af), dtype=float), shape)
                f = np.broadcast_to(np.asarray(model.running_cost(X, m, af), dtype=float), shape)
                succ, probs = model.kernel_row(X, m, af)
                probs = np.broadcast_to(probs, shape + (len(succ),))
                sidx = [model.mode_index(s) for s in succ]
                keep = [j for j in range(len(succ)) if np.any(probs[..., j] > 0)]
                self.data[(mi, ai)] = {
                    "X": X, "lam": lam, "f": f,
                    "succ": [sidx[j] for j in keep], "probs": [probs[..., j] for j in keep],
                }
            g = np.asarray(model.terminal_cost(self.data[(mi, 0)]["X"][0], m), dtype=float)
            self.data[(mi, "g")] = np.broadcast_to(g, shape[1:]).copy()
        self.r_full = np.broadcast_to(self.stage_r[:, None, None], shape)

    def _psi_at(self, psi: ValueGrid, X, succ_idx) -> np.ndarray:
        flat_r = self.r_full.reshape(-1)
        flat_x = X.reshape(-1, X.shape[-1])
        return psi.evaluate(flat_r, flat_x, np.full(flat_r.size, succ_idx)).reshape(self.shape)

    def apply(self, psi: ValueGrid) -> np.ndarray:
        """Operator applied on every (start time, mode, lattice point)."""
        n_t, P = self.times.size, self.fields.shape[0]
        out = np.empty((n_t, len(self.modes), P))
        psi_cache = {}
        for mi in range(len(self.modes)):
            terms = []
            for ai in range(self.nA):
                d = self.data[(mi, ai)]
                key = (mi if not self.exact_min else mi, ai if not self.exact_min else 0)
                jump = np.zeros(self.shape)
                for s, pr in zip(d["succ"], d["probs"]):
                    ck = (key, s)
                    if ck not in psi_cache:
                        psi_cache[ck] = self._psi_at(psi, d["X"], s)
                    jump += pr * psi_cache[ck]
                terms.append((d["f"] + d["lam"] * jump, d["lam"]))
            g = self.data[(mi, "g")]
            if self.exact_min:
                out[:, mi, :] = self._sweep(terms, g, joint=True)
            else:
                out[:, mi, :] = np.min([self._sweep([tm], g, joint=True) for tm in terms], axis=0)
        return out

    def _sweep(self, terms, g, joint: bool) -> np.ndarray:
        def rhs(k, w):
            vals = [c[k] - lam[k] * w for c, lam in terms]
            return np.min(vals, axis=0) if len(vals) > 1 else vals[0]

        w = g.copy()
        n_t = self.times.size
        rec = np.empty_like(w)
        rec[n_t - 1] = w[n_t - 1]
        h = self.h
        for n in range(self.n_steps):
            k = 2 * n
            k1 = rhs(k, w)
            k2 = rhs(k + 1, w + 0.5 * h * k1)
            k3 = rhs(k + 1, w + 0.5 * h * k2)
            k4 = rhs(k + 2, w + h * k3)
            w = w + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if (n + 1) % self.substeps == 0:
                j = n_t - 1 - (n + 1) // self.substeps
                rec[j] = w[j]
        return rec


def bellman_update(model: PdmpModel, psi: ValueGrid, substeps: int = 1) -> np.ndarray:
    """Operator applied at every node of ``psi``'s own grid."""
    eng = _BellmanEngine(model, psi.times, psi.lattice.fields(), substeps)
    return eng.apply(psi)


def apply_T(model: PdmpModel, psi: ValueGrid, t: float, x, mode, substeps: int = 1,
            step: Optional[float] = None) -> float:
    """Operator applied to ``psi`` at a single point ``(t, x, mode)``.

    The backward sweep uses steps of about ``step`` (default: the spacing of
    ``psi``'s time grid) with ``substeps`` RK4 steps each.
    """
    if model.modes is None:
        raise ValueError("needs a finite mode set")
    T = model.horizon
    if not 0 <= t <= T:
        raise ValueError("t outside [0, T]")
    x = np.asarray(getattr(x, "coeffs", x), dtype=float)
    mi = model.mode_index(mode)
    if t >= T:
        return float(model.terminal_cost(x, mode))
    step = step or (psi.times[1] - psi.times[0] if psi.times.size > 1 else model.dt)
    n = max(int(math.ceil((T - t) / step - 1e-9)), 1)
    eng = _BellmanEngine(model, np.linspace(t, T, n + 1), x[None, :], substeps)
    return float(eng.apply(psi)[0, mi, 0])


def solve(model: PdmpModel, lattice: Optional[Lattice] = None, n_times: int = 101, tol: float = 1e-8,
          max_iter: int = 200, substeps: int = 1) -> ValueGrid:
    """Iterate the Bellman operator from zero until the sup residual is below ``tol``.

    Raises
    ------
    NonContractionError
        If the residual grows on three consecutive iterations.
    """
    lattice = lattice or Lattice((), model.n_coeffs)
    times = np.linspace(0.0, model.horizon, n_times)
    eng = _BellmanEngine(model, times, lattice.fields(), substeps)
    V = ValueGrid(times, lattice, model.modes, np.zeros((n_times, len(model.modes), lattice.size)))
    history: list[float] = []
    rises = 0
    converged = False
    for _ in range(max_iter):
        new = eng.apply(V)
        res = float(np.max(np.abs(new - V.values)))
        if history and res > history[-1]:
            rises += 1
            if rises >= 3:
                raise NonContractionError(f"residual increased three times in a row: {history[-3:] + [res]}")
        else:
            rises = 0
        history.append(res)
        V = ValueGrid(times, lattice, model.modes, new)
        if res <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"value iteration stopped after {max_iter} sweeps at residual {history[-1]:.3g}")
    V.residuals = history
    V.meta = {"tol": tol, "substeps": substeps, "converged": converged,
              "control_min": "exact" if model.drift_control_free else "constant-control upper bound"}
    return V


# ---------------------------------------------------------------------------
# brute-force oracle


def brute_force_value(model: PdmpModel, lattice: Optional[Lattice] = None, times=None, jump_cap: int = 4,
                      nodes: int = 12, tol: Optional[float] = None) -> ValueGrid:
    """Nested Gauss-Legendre expansion over at most ``jump_cap`` jumps.

    Each segment uses the best constant control (exhaustive over the grid),
    and every successor mode is enumerated.  The truncation bound
    ``P(N > jump_cap) (sup|f| T + sup|g|)`` for ``N ~ Poisson(M T)`` is stored
    in ``meta['truncation_bound']``; if ``tol`` is given and the bound
    exceeds it a ``ValueError`` is raised.
    """
    if model.modes is None:
        raise ValueError("brute force needs a finite mode set")
    lattice = lattice or Lattice((), model.n_coeffs)
    times = np.linspace(0.0, model.horizon, 101) if times is None else np.asarray(times, dtype=float)
    T = model.horizon
    bound = float(poisson.sf(jump_cap, model.rate_bound * T)) * a_priori_bound(model)
    if tol is not None and bound > tol:
        raise ValueError(f"jump cap {jump_cap} gives truncation bound {bound:.3g} above tolerance {tol:.3g}")
    u, wq = np.polynomial.legendre.leggauss(nodes)

    def value(t, x, mode, depth, chunk=20000):
        if t.size > chunk:
            return np.concatenate([value(t[i:i + chunk], x[i:i + chunk], mode, depth)
                                   for i in range(0, t.size, chunk)])
        L = T - t
        s = L[:, None] * (u + 1) / 2
        ws = L[:, None] * wq / 2
        best = None
        shared = {}
        for a in model.controls:
            af = float(a)
            fl = model.flow(mode, af)
            xs = fl.at(x[:, None, :], s)
            xT = fl.at(x, L)
            lam = np.broadcast_to(np.asarray(model.rate(xs, mode, af), dtype=float), s.shape)
            f = np.broadcast_to(np.asarray(model.running_cost(xs, mode, af), dtype=float), s.shape)
            lam0 = np.asarray(model.rate(x, mode, af), dtype=float)
            if np.all(np.abs(lam - lam0[..., None]) <= 1e-14 * (1.0 + np.abs(lam))):
                chi = np.exp(-lam * s)
            else:
                inner = s[..., None] * (u + 1) / 2
                xin = fl.at(x[:, None, None, :], inner)
                lam_in = np.broadcast_to(np.asarray(model.rate(xin, mode, af), dtype=float), inner.shape)
                chi = np.exp(-np.sum(lam_in * (s[..., None] * wq / 2), axis=-1))
            lamT = np.sum(ws * lam, axis=-1)
            g = np.broadcast_to(np.asarray(model.terminal_cost(xT, mode), dtype=float), t.shape)
            total = np.sum(ws * chi * f, axis=-1) + np.exp(-lamT) * g
            if depth > 0:
                succ, probs = model.kernel_row(xs, mode, af)
                probs = np.broadcast_to(probs, s.shape + (len(succ),))
                cont = np.zeros(s.shape)
                for j, y in enumerate(succ):
                    if not np.any(probs[..., j] > 0):
                        continue
                    key = (y, None if model.drift_control_free else af)
                    if key not in shared:
                        B = s.size
                        shared[key] = value((t[:, None] + s).reshape(B), xs.reshape(B, -1), y,
                                            depth - 1).reshape(s.shape)
                    cont += probs[..., j] * shared[key]
                total = total + np.sum(ws * chi * lam * cont, axis=-1)
            best = total if best is None else np.minimum(best, total)
        return best

    F = lattice.fields()
    tt, pp = np.meshgrid(times, np.arange(lattice.size), indexing="ij")
    vals = np.empty((times.size, len(model.modes), lattice.size))
    for mi, m in enumerate(model.modes):
        v = value(tt.reshape(-1), F[pp.reshape(-1)], m, jump_cap)
        vals[:, mi, :] = v.reshape(times.size, lattice.size)
    return ValueGrid(times, lattice, model.modes, vals,
                     meta={"jump_cap": jump_cap, "nodes": nodes, "truncation_bound": bound})


# ---------------------------------------------------------------------------
# DPP diagnostic


def dpp_residual(V: ValueGrid, model: PdmpModel, t: float, x, mode, n_paths: int, seed: int = 0,
                 jobs: int = 1) -> tuple[float, float]:
    """First-jump dynamic-programming check ``min_a E[...] - V(t, x)``.

    For each constant control ``a`` the same seeded paths (common random
    numbers) are stopped at the first jump; the returned pair is the
    residual of the minimising control and its standard error.
    """
    x = np.asarray(getattr(x, "coeffs", x), dtype=float)
    v0 = V(t, x, mode)
    best = None
    for a in model.controls:
        pol = OpenLoopPolicy.constant(a)

        def one(i, pol=pol):
            traj = simulate(model, t, x, mode, pol, path_rng(seed, i, "dpp"), stop_after=1)
            run = 0.0
            for seg in traj.segments:
                if seg.times.size > 1:
                    f = np.asarray(model.running_cost(seg.fields, seg.mode, seg.controls), dtype=float)
                    run += float(np.trapezoid(np.broadcast_to(f, seg.times.shape), seg.times))
            end = traj.segments[-1]
            return run + V(end.end, end.fields[-1], end.mode)

        vals = np.asarray(map_paths(one, n_paths, jobs))
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n_paths))
        if best is None or mean < best[0]:
            best = (mean, se)
    return best[0] - v0, best[1]
