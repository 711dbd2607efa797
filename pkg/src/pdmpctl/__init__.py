"""Controlled piecewise deterministic Markov processes on a Hilbert space.

The package computes the value of an optimal control problem for PDMPs
whose continuous component lives in ``L2(0, 1)``, in three independent
ways that should agree:

* primal value iteration of the first-jump Bellman operator
  (:mod:`pdmpctl.primal`);
* randomized control, where the control is replaced by an autonomous
  jump process whose intensity is then optimized
  (:mod:`pdmpctl.randomization`);
* a penalized backward SDE on the randomized process
  (:mod:`pdmpctl.bsde`).

The engine (:mod:`pdmpctl.pdmp`) is generic; :mod:`pdmpctl.hodgkin_huxley`
supplies the spatial neuron model with light-gated channels and
:mod:`pdmpctl.toys` supplies small models with known answers.
"""

__version__ = "0.1.0"

from .spectral import NormKind, SpectralField, eval_pointwise, inner, norm, project, semigroup_apply
from .pdmp import (
    AffineDrift,
    OpenLoopPolicy,
    PdmpModel,
    TestFunction,
    Trajectory,
    dynkin_residual,
    estimate_cost,
    integrate_flow,
    path_cost,
    path_rng,
    sample_jump_target,
    sample_jump_time,
    simulate,
)

__all__ = [
    "NormKind",
    "SpectralField",
    "eval_pointwise",
    "inner",
    "norm",
    "project",
    "semigroup_apply",
    "AffineDrift",
    "OpenLoopPolicy",
    "PdmpModel",
    "TestFunction",
    "Trajectory",
    "dynkin_residual",
    "estimate_cost",
    "integrate_flow",
    "path_cost",
    "path_rng",
    "sample_jump_target",
    "sample_jump_time",
    "simulate",
]
