"""Generic controlled PDMP engine on a truncated sine basis.

Between jumps the continuous component follows the mild solution of
``x' = -c L x + b(x, a)`` where ``L`` is the Dirichlet Laplacian
(diagonal in the sine basis).  Jump times are drawn by thinning against
the declared rate bound, and only the discrete mode changes at a jump.

Model callables work on stacked fields: ``x`` has shape ``(..., K)`` and
``a`` broadcasts against ``x.shape[:-1]``.
"""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Optional, Sequence

import numpy as np
import scipy.linalg

from .spectral import basis_matrix, heat_rates

__all__ = [
    "AffineDrift",
    "AffineFlow",
    "ModelError",
    "IntegrationError",
    "PdmpModel",
    "OpenLoopPolicy",
    "Segment",
    "Trajectory",
    "TestFunction",
    "path_rng",
    "integrate_flow",
    "duhamel_rk4",
    "sample_jump_time",
    "sample_jump_target",
    "simulate",
    "path_cost",
    "estimate_cost",
    "dynkin_residual",
    "write_trajectory_csv",
    "map_paths",
]


class ModelError(ValueError):
    """The model violates a declared contract (rate bound, kernel row, ...)."""


class IntegrationError(RuntimeError):
    def __init__(self, message: str, last_valid_time: float):
        super().__init__(f"{message} (last valid time {last_valid_time:.6g})")
        self.last_valid_time = last_valid_time


# ---------------------------------------------------------------------------
# drift and flows


@dataclass(frozen=True, eq=False)
class AffineDrift:
    """``x -> constant - sum_i w_i <x, probe_i> emitter_i``."""

    constant: np.ndarray
    weights: np.ndarray = None
    probes: np.ndarray = None
    emitters: np.ndarray = None

    def __post_init__(self):
        const = np.asarray(self.constant, dtype=float).reshape(-1)
        K = const.size
        w = np.zeros(0) if self.weights is None else np.asarray(self.weights, dtype=float).reshape(-1)
        p = np.zeros((0, K)) if self.probes is None else np.asarray(self.probes, dtype=float).reshape(-1, K)
        e = np.zeros((0, K)) if self.emitters is None else np.asarray(self.emitters, dtype=float).reshape(-1, K)
        if not (w.size == p.shape[0] == e.shape[0]):
            raise ValueError("rank-one terms need matching weights, probes and emitters")
        for name, arr in (("constant", const), ("weights", w), ("probes", p), ("emitters", e)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name} in affine drift")
        object.__setattr__(self, "constant", const)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "probes", p)
        object.__setattr__(self, "emitters", e)

    @classmethod
    def zero(cls, K: int) -> "AffineDrift":
        return cls(np.zeros(K))

    @property
    def K(self) -> int:
        return self.constant.size

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.weights.size:
            return np.broadcast_to(self.constant, x.shape).copy()
        return self.constant - ((x @ self.probes.T) * self.weights) @ self.emitters

    def linear_matrix(self) -> np.ndarray:
        return -(self.emitters.T * self.weights) @ self.probes

    @property
    def symmetric(self) -> bool:
        B = self.linear_matrix()
        return bool(np.allclose(B, B.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(B).max(initial=0.0))))


def _phi1(z: np.ndarray) -> np.ndarray:
    out = np.ones_like(z)
    nz = z != 0.0
    out[nz] = np.expm1(z[nz]) / z[nz]
    return out


class AffineFlow:
    """Exact solution of ``x' = G x + h`` with ``G = -diag(decay) + B``.

    ``method='eig'`` diagonalises a symmetric ``G`` once and evaluates the
    flow at arbitrary elapsed times; ``method='expm'`` exponentiates the
    (K+1)-dimensional augmented generator by scaling and squaring.
    """

    def __init__(self, drift: AffineDrift, decay: np.ndarray, method: str = "auto"):
        decay = np.asarray(decay, dtype=float)
        if decay.shape != (drift.K,):
            raise ValueError("decay rates must match the drift dimension")
        self.K = drift.K
        self.G = -np.diag(decay) + drift.linear_matrix()
        self.h = drift.constant.copy()
        if method == "auto":
            method = "eig" if drift.symmetric else "expm"
        if method not in ("eig", "expm"):
            raise ValueError(f"unknown flow method {method!r}")
        self.method = method
        if method == "eig":
            mu, U = np.linalg.eigh(0.5 * (self.G + self.G.T))
            self._mu, self._U = mu, U
            self._h_eig = U.T @ self.h
        aug = np.zeros((self.K + 1, self.K + 1))
        aug[: self.K, : self.K] = self.G
        aug[: self.K, self.K] = self.h
        self._aug = aug

    def augmented_exp(self, s: float) -> np.ndarray:
        return scipy.linalg.expm(self._aug * s)

    def at(self, x0, s) -> np.ndarray:
        """Flow from ``x0`` after elapsed time(s) ``s`` (broadcasting)."""
        x0 = np.asarray(x0, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("elapsed time must be nonnegative")
        if self.method == "eig":
            y0 = x0 @ self._U
            z = self._mu * s[..., None]
            y = np.exp(z) * y0 + s[..., None] * _phi1(z) * self._h_eig
            return y @ self._U.T
        if x0.ndim == 1 and s.ndim == 1 and s.size > 2 and s[0] == 0.0:
            ds = np.diff(s)
            if np.allclose(ds, ds[0], rtol=1e-12, atol=0.0):
                return self._uniform_path(x0, float(ds[0]), s.size)
        shape = np.broadcast_shapes(x0.shape[:-1], s.shape)
        xb = np.broadcast_to(x0, shape + (self.K,)).reshape(-1, self.K)
        sb = np.broadcast_to(s, shape).reshape(-1)
        out = np.empty_like(xb)
        for j, (xj, sj) in enumerate(zip(xb, sb)):
            E = self.augmented_exp(sj)
            out[j] = E[: self.K, : self.K] @ xj + E[: self.K, self.K]
        return out.reshape(shape + (self.K,))

    def _uniform_path(self, x0, step: float, n: int) -> np.ndarray:
        # one exponential of the step, then repeated application
        E = self.augmented_exp(step)
        A, c = E[: self.K, : self.K], E[: self.K, self.K]
        out = np.empty((n, self.K))
        out[0] = x0
        for j in range(1, n):
            out[j] = A @ out[j - 1] + c
        return out


def duhamel_rk4(x0, drift_fn: Callable, decay: np.ndarray, duration: float, substeps: int):
    """Exponential (Lawson) RK4 for ``x' = -diag(decay) x + drift_fn(s, x)``.

    The linear part is propagated by the exact semigroup and only the
    Duhamel integrand is discretised.  Returns ``(times, fields)``.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    substeps = max(int(substeps), 1)
    x = np.array(x0, dtype=float)
    times = np.linspace(0.0, duration, substeps + 1)
    out = np.empty((substeps + 1,) + x.shape)
    out[0] = x
    if duration == 0:
        return times[:1], out[:1]
    h = duration / substeps
    E = np.exp(-decay * h)
    E2 = np.exp(-decay * h / 2)
    for n in range(substeps):
        s = times[n]
        k1 = drift_fn(s, x)
        k2 = drift_fn(s + h / 2, E2 * (x + 0.5 * h * k1))
        k3 = drift_fn(s + h / 2, E2 * x + 0.5 * h * k2)
        k4 = drift_fn(s + h, E * x + h * E2 * k3)
        x = E * x + (h / 6.0) * (E * k1 + 2.0 * E2 * (k2 + k3) + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError("flow blew up", s)
        out[n + 1] = x
    return times, out


# ---------------------------------------------------------------------------
# model and policies


@dataclass(frozen=True, eq=False)
class PdmpModel:
    """Local characteristics of a controlled PDMP plus its costs.

    ``drift(mode, a)`` returns the affine drift of the flow in that mode
    (``a`` is ignored when ``drift_control_free``).  ``kernel(x, mode, a)``
    returns ``(successors, probs)`` where ``probs`` has shape
    ``x.shape[:-1] + (len(successors),)``; the field is unchanged at jumps.
    """

    n_coeffs: int
    controls: np.ndarray
    drift: Callable[[Hashable, float], AffineDrift]
    rate: Callable[[np.ndarray, Hashable, Any], np.ndarray]
    kernel: Callable[[np.ndarray, Hashable, float], tuple]
    running_cost: Callable[[np.ndarray, Hashable, Any], np.ndarray]
    terminal_cost: Callable[[np.ndarray, Hashable], np.ndarray]
    rate_bound: float
    horizon: float
    diffusivity: float = 1.0
    drift_control_free: bool = True
    cost_bounds: Optional[tuple[float, float]] = None
    modes: Optional[tuple] = None
    mode_label: Callable[[Hashable], str] = str
    dt: float = 0.01
    max_jumps: int = 10**6
    name: str = "pdmp"
    _flows: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "controls", np.asarray(self.controls, dtype=float).reshape(-1))
        if self.n_coeffs <= 0:
            raise ValueError("n_coeffs must be positive")
        if self.controls.size == 0:
            raise ValueError("control grid is empty")
        if self.rate_bound < 0 or not math.isfinite(self.rate_bound):
            raise ValueError("rate bound must be finite and nonnegative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.diffusivity < 0:
            raise ValueError("diffusivity must be nonnegative")
        if self.dt <= 0:
            raise ValueError("time step must be positive")

    @property
    def decay(self) -> np.ndarray:
        return heat_rates(self.n_coeffs, self.diffusivity)

    @property
    def mode_count(self) -> int:
        if self.modes is None:
            raise ValueError("model has no finite mode enumeration")
        return len(self.modes)

    def mode_index(self, mode) -> int:
        return self._mode_lookup()[mode]

    def _mode_lookup(self) -> dict:
        lookup = self._flows.get("__modes__")
        if lookup is None:
            lookup = {m: i for i, m in enumerate(self.modes or ())}
            self._flows["__modes__"] = lookup
        return lookup

    def flow(self, mode, a: float | None = None) -> AffineFlow:
        """Cached exact flow for ``mode`` (and ``a`` if the drift is controlled)."""
        key = mode if self.drift_control_free else (mode, float(a))
        fl = self._flows.get(("flow", key))
        if fl is None:
            fl = AffineFlow(self.drift(mode, a if a is not None else self.controls[0]), self.decay)
            self._flows[("flow", key)] = fl
        return fl

    def control_index(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        d = np.abs(a[..., None] - self.controls)
        idx = d.argmin(axis=-1)
        if np.any(d.min(axis=-1) > 1e-12):
            raise ModelError("control value is not on the control grid")
        return idx

    def kernel_row(self, x, mode, a) -> tuple[list, np.ndarray]:
        succ, probs = self.kernel(x, mode, a)
        probs = np.asarray(probs, dtype=float)
        if len(succ) == 0:
            raise ModelError(f"empty kernel row at mode {self.mode_label(mode)}")
        return list(succ), probs


@dataclass(frozen=True)
class OpenLoopPolicy:
    """Open-loop control re-anchored at every jump.

    ``rule(elapsed, anchor_time, anchor_field, anchor_mode)`` returns the
    control at ``elapsed`` time units after the last jump.
    """

    rule: Callable[[np.ndarray, float, np.ndarray, Hashable], Any]
    name: str = "policy"

    def __call__(self, elapsed, anchor_time, anchor_field, anchor_mode) -> np.ndarray:
        el = np.asarray(elapsed, dtype=float)
        return np.broadcast_to(
            np.asarray(self.rule(el, anchor_time, anchor_field, anchor_mode), dtype=float), el.shape
        ).copy()

    @classmethod
    def constant(cls, a: float) -> "OpenLoopPolicy":
        a = float(a)
        return cls(lambda el, t0, x0, m: a, name=f"const({a:g})")

    @classmethod
    def feedback(cls, fn: Callable[[Hashable, float], float], name: str = "feedback") -> "OpenLoopPolicy":
        """Segment-constant control chosen from the post-jump mode and time."""
        return cls(lambda el, t0, x0, m: fn(m, t0), name=name)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Segment:
    start: float
    end: float
    mode: Hashable
    times: np.ndarray
    fields: np.ndarray
    controls: np.ndarray

    @property
    def anchor(self) -> np.ndarray:
        return self.fields[0]


@dataclass
class Trajectory:
    t0: float
    x0: np.ndarray
    mode0: Hashable
    horizon: float
    segments: list[Segment]

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([s.start for s in self.segments[1:]])

    @property
    def jump_marks(self) -> list:
        return [s.mode for s in self.segments[1:]]

    @property
    def n_jumps(self) -> int:
        return len(self.segments) - 1

    @property
    def end_time(self) -> float:
        return self.segments[-1].end

    @property
    def terminal_field(self) -> np.ndarray:
        return self.segments[-1].fields[-1]

    @property
    def terminal_mode(self):
        return self.segments[-1].mode

    @property
    def complete(self) -> bool:
        return self.end_time >= self.horizon

    def state_at(self, model: "PdmpModel", times) -> tuple[np.ndarray, list]:
        """Fields and modes at sorted ``times`` (right-continuous; control-free flows)."""
        times = np.asarray(times, dtype=float)
        starts = np.array([s.start for s in self.segments])
        idx = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(self.segments) - 1)
        fields = np.empty((times.size, model.n_coeffs))
        modes = [None] * times.size
        for k in np.unique(idx):
            seg = self.segments[k]
            sel = np.nonzero(idx == k)[0]
            fields[sel] = model.flow(seg.mode).at(seg.fields[0], np.maximum(times[sel] - seg.start, 0.0))
            for j in sel:
                modes[j] = seg.mode
        return fields, modes


def path_rng(seed: int, index: int, purpose: str = "paths") -> np.random.Generator:
    """Independent generator for path ``index`` derived from a root seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(purpose.encode()), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def _sample_grid(start: float, end: float, dt: float) -> np.ndarray:
    n = int(math.floor((end - start) / dt + 1e-9))
    grid = start + dt * np.arange(n + 1)
    if end - grid[-1] > 1e-9 * max(1.0, dt):
        grid = np.append(grid, end)
    else:
        grid[-1] = end
    return grid


class _SegmentFlow:
    """Flow of one segment under a given open-loop control."""

    def __init__(self, model: PdmpModel, x0, mode, control: Callable, span: float):
        self.model, self.x0, self.mode, self.control = model, np.asarray(x0, float), mode, control
        self.exact = model.drift_control_free
        self._drifts = {}
        if self.exact:
            self._flow = model.flow(mode)
        else:
            self._h = model.dt / 4
            n = max(int(math.ceil(span / self._h)), 1)
            self._grid, self._xs = duhamel_rk4(self.x0, self._rhs, model.decay, n * self._h, n)

    def _rhs(self, s, x):
        a = float(self.control(s))
        if a not in self._drifts:
            self._drifts[a] = self.model.drift(self.mode, a)
        return self._drifts[a](x)

    def at(self, s):
        s = np.asarray(s, dtype=float)
        if self.exact:
            return self._flow.at(self.x0, s)
        flat = s.reshape(-1)
        out = np.empty((flat.size, self.model.n_coeffs))
        for j, sj in enumerate(flat):
            i = min(int(sj / self._h), len(self._grid) - 1)
            rem = sj - self._grid[i]
            if rem <= 1e-14:
                out[j] = self._xs[i]
            else:
                _, xs = duhamel_rk4(self._xs[i], lambda u, x: self._rhs(self._grid[i] + u, x),
                                    self.model.decay, rem, 1)
                out[j] = xs[-1]
        return out.reshape(s.shape + (self.model.n_coeffs,))


def _as_control_fn(control) -> Callable:
    if callable(control):
        return control
    value = float(control)
    return lambda s: np.full(np.shape(s), value) if np.ndim(s) else value


def _thin(model: PdmpModel, seg: _SegmentFlow, mode, rng, horizon_remaining: float, rate_bound=None):
    M = model.rate_bound if rate_bound is None else rate_bound
    if M <= 0:
        return None
    s = 0.0
    while True:
        s += rng.exponential(1.0 / M)
        if s >= horizon_remaining:
            return None
        xs = seg.at(s)
        a = float(seg.control(s))
        lam = float(model.rate(xs, mode, a))
        if lam > M * (1 + 1e-9) + 1e-12:
            raise ModelError(f"rate {lam:.6g} exceeds declared bound {M:.6g}")
        if rng.random() * M < lam:
            return s


def sample_jump_time(model: PdmpModel, x, mode, control, rng, horizon_remaining: float) -> Optional[float]:
    """Elapsed time to the next jump, or ``None`` if none occurs before the horizon.

    Survival function ``exp(-int_0^s rate(flow(r), control(r)) dr)``, sampled
    by thinning against ``model.rate_bound``.
    """
    ctl = _as_control_fn(control)
    seg = _SegmentFlow(model, x, mode, ctl, horizon_remaining if math.isfinite(horizon_remaining) else model.horizon)
    return _thin(model, seg, mode, rng, horizon_remaining)


def sample_jump_target(model: PdmpModel, x, mode, a, rng):
    succ, probs = model.kernel_row(np.asarray(x, float), mode, float(a))
    total = probs.sum()
    if total <= 0:
        raise ModelError("kernel row carries no mass")
    if abs(total - 1.0) > 1e-9:
        raise ModelError(f"kernel row sums to {total!r}")
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return succ[min(j, len(succ) - 1)]


def simulate(model: PdmpModel, t: float, x, mode, policy: OpenLoopPolicy, rng,
             stop_after: Optional[int] = None, until: Optional[float] = None) -> Trajectory:
    """One controlled path from ``(t, x, mode)`` up to the horizon.

    ``stop_after=k`` ends the path at the k-th jump (used by first-jump
    dynamic-programming checks); ``until`` stops earlier than the horizon.
    """
    T = model.horizon if until is None else min(until, model.horizon)
    x = np.asarray(x, dtype=float).copy()
    if x.shape != (model.n_coeffs,):
        raise ValueError(f"initial field must have {model.n_coeffs} coefficients")
    if t > T:
        raise ValueError("start time beyond the horizon")
    segments: list[Segment] = []
    s0, cur_x, cur_mode = float(t), x, mode
    while True:
        anchor_t, anchor_x, anchor_m = s0, cur_x, cur_mode

        def ctl(el, _t=anchor_t, _x=anchor_x, _m=anchor_m):
            return policy(el, _t, _x, _m) if np.ndim(el) else float(policy(el, _t, _x, _m))

        seg = _SegmentFlow(model, cur_x, cur_mode, ctl, max(T - s0, 0.0))
        tau = _thin(model, seg, cur_mode, rng, T - s0) if T > s0 else None
        end = T if tau is None else s0 + tau
        times = _sample_grid(s0, end, model.dt) if end > s0 else np.array([s0])
        fields = seg.at(times - s0)
        if not np.all(np.isfinite(fields)):
            raise IntegrationError("non-finite field along flow", s0)
        controls = ctl(times - s0)
        model.control_index(controls)
        segments.append(Segment(s0, end, cur_mode, times, fields, controls))
        if tau is None:
            break
        if len(segments) > model.max_jumps:
            raise RuntimeError(f"more than {model.max_jumps} jumps before the horizon")
        new_mode = sample_jump_target(model, fields[-1], cur_mode, controls[-1], rng)
        s0, cur_x, cur_mode = end, fields[-1].copy(), new_mode
        if stop_after is not None and len(segments) >= stop_after:
            segments.append(Segment(end, end, new_mode, np.array([end]), cur_x[None, :],
                                    np.array([ctl(tau)])))
            break
    return Trajectory(float(t), x, mode, T, segments)


def path_cost(model: PdmpModel, traj: Trajectory) -> float:
    """Trapezoid integral of the running cost plus the terminal cost."""
    total = 0.0
    for seg in traj.segments:
        if seg.times.size > 1:
            f = np.asarray(model.running_cost(seg.fields, seg.mode, seg.controls), dtype=float)
            total += float(np.trapezoid(np.broadcast_to(f, seg.times.shape), seg.times))
    return total + float(model.terminal_cost(traj.terminal_field, traj.terminal_mode))


def map_paths(fn: Callable[[int], Any], n: int, jobs: int = 1) -> list:
    """Evaluate ``fn(i)`` for ``i < n`` keeping index order (optionally in parallel)."""
    if jobs is None or jobs <= 1 or n < 2:
        return [fn(i) for i in range(n)]
    from joblib import Parallel, delayed

    chunks = np.array_split(np.arange(n), min(jobs * 4, n))
    parts = Parallel(n_jobs=jobs)(delayed(lambda idx: [fn(int(i)) for i in idx])(c) for c in chunks)
    return [r for part in parts for r in part]


def _mean_stderr(samples) -> tuple[float, float]:
    arr = np.asarray(samples, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least two samples")
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def estimate_cost(model: PdmpModel, t: float, x, mode, policy: OpenLoopPolicy, n_paths: int,
                  seed: int, jobs: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate ``(mean, stderr)`` of the cost of ``policy``."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    costs = map_paths(lambda i: path_cost(model, simulate(model, t, x, mode, policy, path_rng(seed, i, "cost"))),
                      n_paths, jobs)
    return _mean_stderr(costs)


# ---------------------------------------------------------------------------
# Dynkin diagnostic


@dataclass(frozen=True)
class TestFunction:
    """Smooth test function of ``(s, field, mode)`` with analytic derivatives.

    ``value``, ``time_derivative`` and ``gradient`` accept stacked fields;
    ``gradient`` returns an array with the field's shape.
    """

    value: Callable
    time_derivative: Callable
    gradient: Callable

    __test__ = False  # not a pytest class


def _generator(model: PdmpModel, psi: TestFunction, s, xs, mode, controls) -> np.ndarray:
    out = np.asarray(psi.time_derivative(s, xs, mode), dtype=float) * np.ones(len(s))
    grad = np.asarray(psi.gradient(s, xs, mode), dtype=float)
    base = np.asarray(psi.value(s, xs, mode), dtype=float) * np.ones(len(s))
    for a in np.unique(controls):
        sel = controls == a
        xa = xs[sel]
        velocity = -model.decay * xa + model.drift(mode, float(a))(xa)
        gen = np.sum(velocity * grad[sel], axis=-1)
        lam = np.asarray(model.rate(xa, mode, float(a)), dtype=float) * np.ones(sel.sum())
        succ, probs = model.kernel_row(xa, mode, float(a))
        probs = np.broadcast_to(probs, (sel.sum(), len(succ)))
        jump = np.zeros(sel.sum())
        for j, m in enumerate(succ):
            jump += probs[:, j] * (np.asarray(psi.value(s[sel], xa, m), dtype=float) - base[sel])
        out[sel] += gen + lam * jump
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


def _graded_integral(model: PdmpModel, psi: TestFunction, seg: "Segment", end: float) -> float:
    """Generator integral over one exact-flow segment.

    Every segment opens with a fast transient in the high modes, so the
    panels are graded geometrically away from the segment start and each
    carries a five-point Gauss rule.
    """
    span = end - seg.start
    edges = np.concatenate([[0.0], span * np.geomspace(1e-7, 1.0, 30)])
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    r = (mid[:, None] + half[:, None] * _GL_NODES).reshape(-1)
    w = (half[:, None] * _GL_WEIGHTS).reshape(-1)
    xs = model.flow(seg.mode).at(seg.fields[0], r)
    # the applied control is piecewise constant between recorded samples
    idx = np.clip(np.searchsorted(seg.times - seg.start, r, side="right") - 1, 0, seg.controls.size - 1)
    return float(np.dot(w, _generator(model, psi, seg.start + r, xs, seg.mode, seg.controls[idx])))


def dynkin_residual(model: PdmpModel, psi: TestFunction, t: float, x, mode, policy: OpenLoopPolicy,
                    n_paths: int, seed: int = 0, stop_time: Optional[float] = None,
                    radius: float = np.inf, jobs: int = 1) -> tuple[float, float]:
    """Monte Carlo check of Dynkin's formula for ``psi``; returns ``(mean, stderr)``.

    The stopping time is ``min(stop_time, first sampled exit from the L2 ball
    of given radius)``.
    """
    T_stop = model.horizon if stop_time is None else min(stop_time, model.horizon)

    def one(i):
        traj = simulate(model, t, x, mode, policy, path_rng(seed, i, "dynkin"), until=T_stop)
        integral = 0.0
        end_s, end_x, end_m = t, np.asarray(x, float), mode
        for seg in traj.segments:
            norms = np.linalg.norm(seg.fields, axis=-1)
            out = np.nonzero(norms > radius)[0]
            k = seg.times.size if out.size == 0 else out[0] + 1
            ts, xs, cs = seg.times[:k], seg.fields[:k], seg.controls[:k]
            if ts.size > 1 and model.drift_control_free:
                integral += _graded_integral(model, psi, seg, ts[-1])
            elif ts.size > 1:
                integral += float(np.trapezoid(_generator(model, psi, ts, xs, seg.mode, cs), ts))
            end_s, end_x, end_m = ts[-1], xs[-1], seg.mode
            if out.size:
                break
        start = float(np.asarray(psi.value(np.array([t]), np.asarray(x, float)[None, :], mode)).reshape(-1)[0])
        stop = float(np.asarray(psi.value(np.array([end_s]), end_x[None, :], end_m)).reshape(-1)[0])
        return stop - start - integral

    return _mean_stderr(map_paths(one, n_paths, jobs))


# ---------------------------------------------------------------------------
# integrate_flow and export


def integrate_flow(model: PdmpModel, x, mode, control, duration: float, substeps: Optional[int] = None,
                   method: str = "auto"):
    """Field path ``(times, fields)`` of the flow over ``[0, duration]``.

    ``method='auto'`` uses the exact exponential when the drift ignores the
    control, otherwise the exponential RK4 Duhamel scheme; ``'eig'``,
    ``'expm'`` and ``'rk4'`` force a specific integrator.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    n = substeps if substeps is not None else max(int(math.ceil(duration / model.dt)), 1)
    ctl = _as_control_fn(control)
    if method == "auto":
        method = "exact" if model.drift_control_free else "rk4"
    if duration == 0:
        return np.zeros(1), np.asarray(x, float)[None, :].copy()
    if method in ("exact", "eig", "expm"):
        if not model.drift_control_free:
            raise ValueError("exact flow requires a control-free drift")
        times = np.linspace(0.0, duration, n + 1)
        if method == "exact":
            fl = model.flow(mode)
        else:
            fl = AffineFlow(model.drift(mode, model.controls[0]), model.decay, method=method)
        xs = fl.at(np.asarray(x, float), times)
    elif method == "rk4":
        drifts = {}

        def rhs(s, y):
            a = float(ctl(s))
            if a not in drifts:
                drifts[a] = model.drift(mode, a)
            return drifts[a](y)

        times, xs = duhamel_rk4(x, rhs, model.decay, duration, n)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    if not np.all(np.isfinite(xs)):
        bad = np.nonzero(~np.all(np.isfinite(xs), axis=-1))[0][0]
        raise IntegrationError("non-finite field", float(times[max(bad - 1, 0)]))
    return times, xs


def write_trajectory_csv(fh, trajectories: Sequence[Trajectory], model: PdmpModel, z_grid, path_ids=None):
    """CSV rows ``path, time, mode, v(z_0..z_m), control`` (comma, header row)."""
    z_grid = np.asarray(z_grid, dtype=float)
    B = basis_matrix(z_grid, model.n_coeffs)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path", "time", "mode"] + [f"v@{z:.4g}" for z in z_grid] + ["control"])
    ids = range(len(trajectories)) if path_ids is None else path_ids
    for pid, traj in zip(ids, trajectories):
        for seg in traj.segments:
            vals = seg.fields @ B.T
            label = model.mode_label(seg.mode)
            for ti, row, ci in zip(seg.times, vals, seg.controls):
                w.writerow([pid, f"{ti:.10g}", label] + [f"{v:.10g}" for v in row] + [f"{ci:.10g}"])
