"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: bad input specs exit 2,
honest numerical infeasibility exits 3, and a breached internal invariant
exits 4.
"""


class SpecError(ValueError):
    """An input (JSON spec, array shape, precondition) is invalid."""


class InfeasibleError(RuntimeError):
    """A computation is numerically infeasible at the requested resolution
    or parameters (e.g. a degenerate dial, a failed bracket hypothesis)."""


class InvariantBreachError(RuntimeError):
    """An internal consistency check failed; indicates a bug, not bad input."""
