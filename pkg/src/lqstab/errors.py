"""Exception hierarchy shared by every lqstab module."""


class LQStabError(Exception):
    """Base class for all toolkit errors."""

    #: short machine-readable tag used in Monte Carlo failure rows
    reason = "error"


class ConfigurationError(LQStabError, ValueError):
    reason = "config"


class DimensionError(ConfigurationError):
    reason = "dimension"


class SimulationOverflow(LQStabError, ArithmeticError):
    """State magnitude exceeded the simulation cap."""

    reason = "overflow"

    def __init__(self, step, magnitude):
        super().__init__(f"state magnitude {magnitude:.3e} exceeded the cap at step {step}")
        self.step = step
        self.magnitude = magnitude


class NonConvergenceError(LQStabError, ArithmeticError):
    """Riccati value iteration hit max_iter (system is likely not stabilizable)."""

    reason = "solver-nonconv"

    def __init__(self, iterations, residual):
        super().__init__(
            f"value iteration did not converge after {iterations} iterations "
            f"(last residual {residual:.3e}); parameter is likely not stabilizable"
        )
        self.iterations = iterations
        self.residual = residual


class SingularGramError(LQStabError, ArithmeticError):
    reason = "singular-gram"

    def __init__(self, min_eig, episode=None):
        where = "" if episode is None else f" in episode {episode}"
        super().__init__(f"Gram matrix is singular{where} (min eigenvalue {min_eig:.3e})")
        self.min_eig = min_eig
        self.episode = episode


class DegenerateDrawError(LQStabError):
    reason = "degenerate-draw"


class EstimationError(LQStabError):
    reason = "estimation"
