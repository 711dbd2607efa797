"""Small PDMPs with known answers, used as oracles and in demos."""
from __future__ import annotations

import numpy as np

from .pdmp import AffineDrift, PdmpModel

__all__ = [
    "tabular_toy",
    "switching_toy",
    "constant_rate_toy",
    "clock_toy",
    "constant_cost_toy",
]


def _zeros_like_batch(x):
    return np.zeros(np.shape(x)[:-1])


def tabular_toy(rates, transition, running, terminal, controls, horizon: float = 1.0,
                dt: float = 0.01, name: str = "toy") -> PdmpModel:
    """Field-free model (one frozen coefficient) driven by lookup tables.

    Parameters
    ----------
    rates : array (n_modes, n_controls)
        Jump rate in each mode under each control.
    transition : array (n_modes, n_modes) or (n_modes, n_controls, n_modes)
        Row-stochastic successor probabilities.
    running : array (n_modes, n_controls)
        Running cost.
    terminal : array (n_modes,)
        Terminal cost.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1)
    rates = np.asarray(rates, dtype=float)
    running = np.asarray(running, dtype=float)
    terminal = np.asarray(terminal, dtype=float)
    n = rates.shape[0]
    Q = np.asarray(transition, dtype=float)
    if Q.ndim == 2:
        Q = np.repeat(Q[:, None, :], controls.size, axis=1)
    if rates.shape != (n, controls.size) or running.shape != rates.shape or Q.shape != (n, controls.size, n):
        raise ValueError("inconsistent table shapes")
    if np.any(rates < 0) or np.any(Q < 0) or not np.allclose(Q.sum(-1), 1.0, atol=1e-12):
        raise ValueError("rates must be nonnegative and kernel rows stochastic")

    def aidx(a):
        return np.abs(np.asarray(a, dtype=float)[..., None] - controls).argmin(axis=-1)

    def rate(x, mode, a):
        return np.broadcast_to(rates[mode, aidx(a)], np.broadcast_shapes(np.shape(x)[:-1], np.shape(a))) * 1.0

    def kernel(x, mode, a):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(a))
        return list(range(n)), np.broadcast_to(Q[mode, aidx(a)], shape + (n,))

    def run(x, mode, a):
        return np.broadcast_to(running[mode, aidx(a)], np.broadcast_shapes(np.shape(x)[:-1], np.shape(a))) * 1.0

    def term(x, mode):
        return np.broadcast_to(terminal[mode], np.shape(x)[:-1]) * 1.0

    return PdmpModel(
        n_coeffs=1,
        controls=controls,
        drift=lambda mode, a: AffineDrift.zero(1),
        rate=rate,
        kernel=kernel,
        running_cost=run,
        terminal_cost=term,
        rate_bound=float(rates.max()),
        horizon=horizon,
        diffusivity=0.0,
        cost_bounds=(float(np.abs(running).max()), float(np.abs(terminal).max())),
        modes=tuple(range(n)),
        dt=dt,
        name=name,
    )


def switching_toy(horizon: float = 1.0, dt: float = 0.01) -> PdmpModel:
    """Two modes, two controls; light ``a=1`` speeds the escape from the costly mode.

    Mode 0 costs ``1 + 0.1 a`` per unit time and leaves at rate 0.1
    (``a=0``) or 0.5 (``a=1``); mode 1 costs ``0.1 a`` and returns at rate
    0.3.  Ending in mode 0 costs 0.5.  The optimal control is ``a=1`` in
    mode 0 and ``a=0`` in mode 1 for every horizon up to several units.
    """
    return tabular_toy(
        rates=[[0.1, 0.5], [0.3, 0.3]],
        transition=[[0.0, 1.0], [1.0, 0.0]],
        running=[[1.0, 1.1], [0.0, 0.1]],
        terminal=[0.5, 0.0],
        controls=[0.0, 1.0],
        horizon=horizon,
        dt=dt,
        name="switching",
    )


def constant_rate_toy(rate: float = 2.0, horizon: float = 1.0, dt: float = 0.01) -> PdmpModel:
    """One mode with a self-loop kernel; jump counts are Poisson."""
    return tabular_toy([[rate]], [[1.0]], [[1.0]], [0.0], [0.0], horizon, dt, name="constant-rate")


def constant_cost_toy(cost: float = 1.0, rates=(1.0, 0.5), horizon: float = 1.0, dt: float = 0.01) -> PdmpModel:
    """Two modes, two controls, running cost ``cost`` everywhere, zero terminal cost."""
    r = np.asarray(rates, dtype=float)
    return tabular_toy(np.stack([r, r[::-1]]), [[0.0, 1.0], [1.0, 0.0]], np.full((2, 2), cost),
                       [0.0, 0.0], [0.0, 1.0], horizon, dt, name="constant-cost")


def clock_toy(horizon: float = 2.0, dt: float = 0.01) -> PdmpModel:
    """The single coefficient grows at unit speed, so the rate equals elapsed time.

    Started from ``x = 0`` the jump time has hazard ``s`` on ``[0, 2]`` and
    survival ``exp(-s^2 / 2)``.
    """
    return PdmpModel(
        n_coeffs=1,
        controls=[0.0],
        drift=lambda mode, a: AffineDrift(np.ones(1)),
        rate=lambda x, mode, a: np.clip(np.asarray(x)[..., 0], 0.0, 2.0),
        kernel=lambda x, mode, a: ([0], np.ones(np.shape(x)[:-1] + (1,))),
        running_cost=lambda x, mode, a: _zeros_like_batch(x),
        terminal_cost=lambda x, mode: _zeros_like_batch(x),
        rate_bound=2.0,
        horizon=horizon,
        diffusivity=0.0,
        cost_bounds=(0.0, 0.0),
        modes=(0,),
        dt=dt,
        name="clock",
    )
