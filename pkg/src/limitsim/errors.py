"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid scenario or parameter.  Carries every problem found, not just the first."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class SimulationError(RuntimeError):
    """An internal invariant broke.  Always a logic bug, never bad input."""


class NoFit(Exception):
    """No node admits the pod under request-sum gate-keeping."""
