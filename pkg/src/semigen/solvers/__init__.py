"""Solver registry.

Every solver module registers a :class:`SolverEntry` at import time; the
benchmark harness, RANSAC layer, and CLI look solvers up by name.  A solver
is a pure function ``solve(corrs) -> list[PoseWithFocal]`` returning every
structurally valid candidate (real, positive focal, proper rotation); callers
apply their own data-fit thresholds.
"""

from dataclasses import dataclass
from typing import Callable

from ..bench import SampleSpec


class DegenerateInputError(ValueError):
    """Input data is degenerate for the requested solver (e.g. collinear
    points, a 3D point at a camera center)."""


class DegenerateConfigurationError(ValueError):
    """The correspondence configuration is degenerate (rank-deficient
    constraint system, zero baseline)."""


class ScaleIndeterminateError(ValueError):
    """The translation scale cannot be recovered from the given data."""


@dataclass(frozen=True)
class SolverEntry:
    name: str
    solve: Callable
    sample_spec: SampleSpec
    description: str = ""


_REGISTRY = {}


def register(entry: SolverEntry):
    if entry.name in _REGISTRY:
        raise ValueError(f"solver {entry.name!r} already registered")
    _REGISTRY[entry.name] = entry
    return entry


def get_solver(name) -> SolverEntry:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown solver {name!r}; available: {sorted(_REGISTRY)}") from None


def available_solvers():
    return sorted(_REGISTRY)


from . import dlt_ap       # noqa: E402,F401  (registration side effects)
from . import h51f5        # noqa: E402,F401
from . import h13f         # noqa: E402,F401
from . import h32f         # noqa: E402,F401
