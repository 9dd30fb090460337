"""Neural-operator approximation of best-response maps in stochastic
Stackelberg games.

Controls live in the space of square-integrable predictable processes and are
expanded in a Haar-in-time, Wiener-chaos-in-scenario basis. The submodules are
imported on demand; ``stackop.cli`` is the command-line entry point.
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "basis",
    "best_response",
    "compact_sets",
    "config",
    "errors",
    "game",
    "kernels",
    "neural_operator",
    "nn",
    "process",
    "training",
]
