"""Penalized BSDE on the randomized process, solved backward in time.

With the Markovian identification ``Y = v(s, X, I)`` and
``Z(y, b) = v(s, y, b) - v(s, X, I)`` the penalized equation becomes the
backward recursion

    u_a   = E[v(s + dt, X_{s+dt}, a) | X_s = x, I frozen] + dt f(x, a),
    v(s, x, a) = u_a - dt n sum_b lambda0_b [u_b - u_a]^-,

where the compensator of the control jumps cancels against their
contribution to the expectation once ``I`` is frozen.  The penalty pulls
every ``v(., a)`` down towards ``min_b v(., b)``; the explicit scheme is
monotone, and therefore nonincreasing in ``n``, when
``dt (n + 1) lambda0(A) < 1``.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .pdmp import PdmpModel, map_paths, path_rng
from .primal import Lattice, ValueGrid
from .randomization import Lambda0, NuPolicy, simulate_xi

__all__ = [
    "Representation",
    "PenalizedScheme",
    "PenalizedSolution",
    "StabilityError",
    "solve_penalized_grid",
    "solve_penalized_regression",
    "constraint_violation",
    "compare_to_primal",
    "indicator_basis",
    "constant_basis",
    "coefficient_basis",
    "restrict_controls",
    "PENALTY_LADDER",
    "grid_samples",
]

PENALTY_LADDER = (1, 2, 5, 10, 50)


class StabilityError(ValueError):
    pass


class Representation(enum.Enum):
    GRID = "grid"
    REGRESSION = "regression"


@dataclass(frozen=True)
class PenalizedScheme:
    n_penalty: int
    dt: float = 0.005
    representation: Representation = Representation.GRID
    basis: Optional[Callable] = None
    n_paths: int = 4000
    ridge: float = 1e-8
    cond_max: float = 1e10

    def check_stability(self, lam0: Lambda0) -> None:
        if self.n_penalty < 0:
            raise ValueError("penalty must be nonnegative")
        q = self.dt * (self.n_penalty + 1) * lam0.mass
        if q >= 1.0:
            raise StabilityError(f"dt (n+1) lambda0(A) = {q:.3g} >= 1; reduce the time step")


@dataclass
class PenalizedSolution:
    """Tabulated ``v^n(s, x, mode, a)``; one value grid per control."""

    grids: list
    controls: np.ndarray
    n_penalty: int
    penalty_mass: Optional[np.ndarray] = None  # expected K_T^n at the first time, (modes, P, nA)
    diagnostics: dict = field(default_factory=dict)
    evaluator: Optional[Callable] = None  # regression representation

    @property
    def times(self) -> np.ndarray:
        return self.grids[0].times if self.grids else self.diagnostics["times"]

    def value(self, t: float, x, mode, a) -> float:
        ai = int(np.abs(self.controls - float(a)).argmin())
        if self.evaluator is not None:
            return float(self.evaluator(t, np.asarray(x, float), mode, ai))
        return self.grids[ai](t, x, mode)

    def values_all(self, t: float, x, mode) -> np.ndarray:
        return np.array([self.value(t, x, mode, a) for a in self.controls])

    def table(self) -> np.ndarray:
        """Stacked grid values ``(n_t, n_modes, P, nA)``."""
        return np.stack([g.values for g in self.grids], axis=-1)

    def to_files(self, csv_path, json_path, mode_label=str, manifest: Optional[dict] = None) -> None:
        g0 = self.grids[0]
        pts = g0.lattice.points()
        tab = self.table()
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s"] + [f"c{k + 1}" for k in range(g0.lattice.m)] + ["mode", "a", "value"])
            for i, t in enumerate(g0.times):
                for j, m in enumerate(g0.modes):
                    for p in range(g0.lattice.size):
                        for ai, a in enumerate(self.controls):
                            w.writerow([f"{t:.10g}"] + [f"{c:.10g}" for c in pts[p]]
                                       + [mode_label(m), f"{a:.10g}", f"{tab[i, j, p, ai]:.12g}"])
        side = {"schema": "penalized-solution/1", "n_penalty": self.n_penalty,
                "controls": self.controls.tolist(), "diagnostics": _jsonable(self.diagnostics)}
        if manifest:
            side["manifest"] = manifest
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def restrict_controls(model: PdmpModel, controls: Sequence[float]) -> PdmpModel:
    """Same model with a smaller control grid (e.g. a single frozen control)."""
    return replace(model, controls=np.asarray(controls, dtype=float), _flows={})


# ---------------------------------------------------------------------------
# grid representation


def _penalize(u: np.ndarray, lam0: Lambda0, n: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Apply the penalty over the last axis (controls); also return its rate."""
    diff = u[..., None, :] - u[..., :, None]  # [..., a, b] = u_b - u_a
    neg = np.maximum(-diff, 0.0)
    rate = n * np.sum(neg * lam0.weights, axis=-1)
    return u - dt * rate, rate


def solve_penalized_grid(model: PdmpModel, lam0: Lambda0, scheme: PenalizedScheme,
                         lattice: Optional[Lattice] = None) -> PenalizedSolution:
    """Explicit backward scheme on ``time x mode x lattice x control``.

    The one-step expectation keeps the no-jump and one-jump terms, with rate
    and kernel taken at the midpoint of the flow step; the running cost uses
    the trapezoid rule along the step.  The expected penalty mass
    ``E[K_T^n]`` under the reference law is tracked alongside.
    """
    if model.modes is None:
        raise ValueError("grid scheme needs a finite mode set")
    scheme.check_stability(lam0)
    lattice = lattice or Lattice((), model.n_coeffs)
    T, n = model.horizon, scheme.n_penalty
    N = max(int(math.ceil(T / scheme.dt - 1e-9)), 1)
    times = np.linspace(0.0, T, N + 1)
    dt = T / N
    modes, controls = model.modes, model.controls
    nM, nA, P = len(modes), controls.size, lattice.size
    X = lattice.fields()

    # flow data per (mode, control): end point, midpoint rates, kernels, costs
    step = {}
    for mi, m in enumerate(modes):
        for ai, a in enumerate(controls):
            af = float(a)
            fl = model.flow(m, af)
            x_mid, x_end = fl.at(X, 0.5 * dt), fl.at(X, dt)
            lam = np.broadcast_to(np.asarray(model.rate(x_mid, m, af), float), (P,))
            succ, probs = model.kernel_row(x_mid, m, af)
            probs = np.broadcast_to(probs, (P, len(succ)))
            f0 = np.broadcast_to(np.asarray(model.running_cost(X, m, af), float), (P,))
            f1 = np.broadcast_to(np.asarray(model.running_cost(x_end, m, af), float), (P,))
            step[mi, ai] = (x_end, np.exp(-lam * dt), [model.mode_index(s) for s in succ], probs,
                            0.5 * dt * (f0 + f1))

    vals = np.empty((N + 1, nM, P, nA))
    kmass = np.zeros((nM, P, nA))
    for mi, m in enumerate(modes):
        g = np.broadcast_to(np.asarray(model.terminal_cost(X, m), float), (P,))
        vals[N, mi] = g[:, None]
    w0 = lam0.weights
    for k in range(N - 1, -1, -1):
        grids = [ValueGrid(times[k + 1:k + 2], lattice, modes, vals[k + 1:k + 2, :, :, ai]) for ai in range(nA)]
        kgrids = [ValueGrid(times[k + 1:k + 2], lattice, modes, kmass[None, :, :, ai]) for ai in range(nA)]
        u = np.empty((nM, P, nA))
        ek = np.empty((nM, P, nA, nA))  # E_X[k_next(b)] under frozen control a
        for (mi, ai), (x_end, stay, succ, probs, run) in step.items():
            tt = np.full(P, times[k + 1])

            def nxt(grid_list, b):
                here = grid_list[b].evaluate(tt, x_end, np.full(P, mi))
                moved = np.zeros(P)
                for j, s in enumerate(succ):
                    if np.any(probs[:, j] > 0):
                        moved += probs[:, j] * grid_list[b].evaluate(tt, x_end, np.full(P, s))
                return stay * here + (1.0 - stay) * moved

            u[mi, :, ai] = nxt(grids, ai) + run
            for b in range(nA):
                ek[mi, :, ai, b] = nxt(kgrids, b)
        vals[k], rate = _penalize(u, lam0, n, dt)
        own = np.einsum("mpaa->mpa", ek)
        kmass = (1.0 - dt * lam0.mass) * own + dt * np.einsum("mpab,b->mpa", ek, w0) + dt * rate
    grids = [ValueGrid(times, lattice, modes, vals[..., ai]) for ai in range(nA)]
    diag = {"dt": dt, "n_penalty": n, "stability": dt * (n + 1) * lam0.mass,
            "penalty_mass_max": float(kmass.max()), "representation": "grid"}
    return PenalizedSolution(grids, controls.copy(), n, kmass, diag)


# ---------------------------------------------------------------------------
# regression representation


def indicator_basis(model: PdmpModel) -> Callable:
    """One-hot features over (mode, control) pairs."""
    nA = model.controls.size
    n = model.mode_count * nA

    def basis(x, mode_idx, a_idx):
        out = np.zeros((np.shape(mode_idx)[0], n))
        out[np.arange(out.shape[0]), np.asarray(mode_idx) * nA + np.asarray(a_idx)] = 1.0
        return out

    basis.size = n
    return basis


def constant_basis() -> Callable:
    def basis(x, mode_idx, a_idx):
        return np.ones((np.shape(mode_idx)[0], 1))

    basis.size = 1
    return basis


def coefficient_basis(model: PdmpModel, m: int = 1) -> Callable:
    """Per (mode, control) pair: ``1`` and the first ``m`` coefficients."""
    ind = indicator_basis(model)

    def basis(x, mode_idx, a_idx):
        e = ind(x, mode_idx, a_idx)
        feats = np.concatenate([np.ones((e.shape[0], 1)), np.asarray(x)[:, :m]], axis=1)
        return (e[:, :, None] * feats[:, None, :]).reshape(e.shape[0], -1)

    basis.size = ind.size * (m + 1)
    return basis


def _least_squares(B: np.ndarray, y: np.ndarray, ridge: float, cond_max: float):
    G = B.T @ B
    flagged = bool(np.linalg.cond(G) > cond_max)
    if flagged:
        G = G + ridge * max(1.0, float(np.trace(G)) / G.shape[0]) * np.eye(G.shape[0])
        beta = np.linalg.solve(G, B.T @ y)
    else:
        beta = np.linalg.lstsq(B, y, rcond=None)[0]
    return beta, flagged


def solve_penalized_regression(model: PdmpModel, lam0: Lambda0, scheme: PenalizedScheme, seed: int = 0,
                               x0=None, t0: float = 0.0, jobs: int = 1) -> PenalizedSolution:
    """Least-squares Monte Carlo version of the same recursion.

    Reference paths of ``(X, I)`` start from ``x0`` with initial (mode,
    control) pairs cycled over the whole grid.  At each step the target
    ``Y_{k+1} + dt f`` is projected on ``scheme.basis``; the control-jump
    compensator and the penalty are then applied to the fitted function.
    """
    if model.modes is None:
        raise ValueError("regression scheme needs a finite mode set")
    scheme.check_stability(lam0)
    basis = scheme.basis or indicator_basis(model)
    nb = getattr(basis, "size", None)
    if nb is not None and scheme.n_paths < 10 * nb:
        raise ValueError(f"path budget {scheme.n_paths} below ten times the basis size {nb}")
    x0 = np.zeros(model.n_coeffs) if x0 is None else np.asarray(getattr(x0, "coeffs", x0), dtype=float)
    T, n = model.horizon, scheme.n_penalty
    N = max(int(math.ceil((T - t0) / scheme.dt - 1e-9)), 1)
    times = np.linspace(t0, T, N + 1)
    dt = (T - t0) / N
    modes, controls = model.modes, model.controls
    nM, nA = len(modes), controls.size
    ref = NuPolicy.one()

    def one(i):
        m0 = modes[i % nM]
        a0 = controls[(i // nM) % nA]
        path = simulate_xi(model, lam0, ref, t0, x0, m0, a0, path_rng(seed, i, "bsde"))
        fields, ms, ctl = path.state_at(model, times)
        return fields, np.array([model.mode_index(m) for m in ms]), ctl

    sims = map_paths(one, scheme.n_paths, jobs)
    Xs = np.stack([s[0] for s in sims], axis=1)  # (N+1, paths, K)
    Ms = np.stack([s[1] for s in sims], axis=1)
    Is = np.stack([s[2] for s in sims], axis=1)

    def cost(fn, x, mi, ai):
        out = np.empty(mi.shape[0])
        for m_i in np.unique(mi):
            for a_i in np.unique(ai):
                sel = (mi == m_i) & (ai == a_i)
                if sel.any():
                    out[sel] = np.broadcast_to(np.asarray(fn(x[sel], modes[m_i], float(controls[a_i])), float),
                                               (sel.sum(),))
        return out

    def terminal(x, mi):
        out = np.empty(mi.shape[0])
        for m_i in np.unique(mi):
            sel = mi == m_i
            out[sel] = np.broadcast_to(np.asarray(model.terminal_cost(x[sel], modes[m_i]), float), (sel.sum(),))
        return out

    def fitted_all(beta, x, mi):
        return np.stack([basis(x, mi, np.full(mi.shape[0], b)) @ beta for b in range(nA)], axis=-1)

    def value_from(beta, x, mi):
        C = fitted_all(beta, x, mi)  # (B, nA)
        comp = C - dt * np.sum(lam0.weights * (C[:, None, :] - C[:, :, None]), axis=-1)
        pen, _ = _penalize(C, lam0, n, dt)
        return comp + (pen - C)

    Y = terminal(Xs[N], Ms[N])
    betas = [None] * N
    resid = np.zeros(N)
    flags = 0
    for k in range(N - 1, -1, -1):
        target = Y + dt * cost(model.running_cost, Xs[k], Ms[k], Is[k])
        B = basis(Xs[k], Ms[k], Is[k])
        beta, flagged = _least_squares(B, target, scheme.ridge, scheme.cond_max)
        flags += flagged
        betas[k] = beta
        resid[k] = float(np.sqrt(np.mean((B @ beta - target) ** 2)))
        V = value_from(beta, Xs[k], Ms[k])
        Y = V[np.arange(V.shape[0]), Is[k]]

    def evaluator(t, x, mode, ai):
        if t >= T - 1e-12:
            return float(model.terminal_cost(x, mode))
        k = int(round((t - t0) / dt))
        if abs(t - times[k]) > 1e-9 or k < 0:
            raise ValueError("regression solution is only defined on its time grid")
        mi = np.array([model.mode_index(mode)])
        return float(value_from(betas[k], np.asarray(x, float)[None, :], mi)[0, ai])

    diag = {"dt": dt, "n_penalty": n, "n_paths": scheme.n_paths, "ridge_fallbacks": int(flags),
            "residual_rms": resid.tolist(), "times": times.tolist(), "representation": "regression"}
    sol = PenalizedSolution([], controls.copy(), n, None, diag, evaluator)
    sol.betas = betas
    return sol


# ---------------------------------------------------------------------------
# diagnostics


def constraint_violation(sol: PenalizedSolution, samples: Sequence[tuple]) -> float:
    """``max [v(s, x, b) - v(s, x, a)]^-`` over sampled ``(s, x, mode)`` and control pairs."""
    worst = 0.0
    for s, x, mode in samples:
        v = sol.values_all(s, x, mode)
        worst = max(worst, float(v.max() - v.min()))
    return worst


def compare_to_primal(sol: PenalizedSolution, V: ValueGrid, samples: Sequence[tuple]) -> dict:
    """Sup/mean error against a primal value grid and the spread over controls."""
    errs, spread = [], 0.0
    for s, x, mode in samples:
        v = sol.values_all(s, x, mode)
        ref = V(s, x, mode)
        errs.extend(np.abs(v - ref).tolist())
        spread = max(spread, float(v.max() - v.min()))
    errs = np.asarray(errs)
    return {"sup_error": float(errs.max()), "mean_error": float(errs.mean()), "control_spread": spread,
            "n_samples": len(samples)}


def grid_samples(V: ValueGrid, every: int = 1) -> list:
    """All ``(t, field, mode)`` nodes of a value grid (optionally thinned in time)."""
    F = V.lattice.fields()
    return [(float(t), F[p], m) for t in V.times[::every] for m in V.modes for p in range(V.lattice.size)]
