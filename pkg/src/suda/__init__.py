"""Decentralized stochastic optimization simulator.

Library layout:

* :mod:`suda.topology` -- graphs, Metropolis weights, spectra
* :mod:`suda.spectral` -- method matrix triples and their factorized coupling blocks
* :mod:`suda.problems` -- objective families and stochastic gradient oracles
* :mod:`suda.solvers` -- primal-dual engine, explicit recursions, baselines, run loop
* :mod:`suda.diagnostics` -- metrics, transformed error, inequality monitors
* :mod:`suda.suite` -- config-driven experiment sweeps and comparisons
"""

from .problems import GradOracle, gen_logistic, gen_pl_toy, gen_quadratic, make_problem
from .solvers import NetworkState, RunConfig, StepSchedule, run
from .spectral import Method, method_matrices, spectral_constants
from .topology import (
    CombinationMatrix,
    Graph,
    build_erdos_renyi,
    build_grid,
    build_ring,
    lazy_shift,
    metropolis_weights,
    parse_topology,
)

__all__ = [
    "CombinationMatrix",
    "Graph",
    "GradOracle",
    "Method",
    "NetworkState",
    "RunConfig",
    "StepSchedule",
    "build_erdos_renyi",
    "build_grid",
    "build_ring",
    "gen_logistic",
    "gen_pl_toy",
    "gen_quadratic",
    "lazy_shift",
    "make_problem",
    "method_matrices",
    "metropolis_weights",
    "parse_topology",
    "run",
    "spectral_constants",
]

__version__ = "0.1.0"
