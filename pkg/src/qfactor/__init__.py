"""Cooperative multi-agent Q-learning with value-function factorization.

Four joint-value heads (additive, monotonic state-mixed, consistency-trained
joint critic, and per-episode residual correction) share one recurrent agent
network, with built-in gridworld tasks and an experiment command line.
"""

import os as _os

# Pin BLAS to one thread before numpy spins up a pool; reruns of the same
# seed must be byte-identical, and threaded reductions are not.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

__all__ = ["__version__"]
