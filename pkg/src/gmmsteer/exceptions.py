"""Exception types shared across the solver stack."""


class SteeringError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(SteeringError):
    """Array shapes are inconsistent with the declared system dimensions."""


class NotSymmetric(SteeringError):
    """A matrix expected to be symmetric is not, beyond tolerance."""


class CholeskyFailure(SteeringError):
    """A covariance matrix is numerically indefinite."""


class MatrixSqrtFailure(SteeringError):
    """A matrix square root ran into eigenvalues below the clamping tolerance."""


class DegenerateComponent(SteeringError):
    """A mixture component lost all responsibility mass during fitting."""


class InfeasibleMarginals(SteeringError):
    """Transport marginals do not carry equal total mass."""


class SingularGrammian(SteeringError):
    """The horizon controllability Grammian is singular; the system is not
    controllable over the given horizon."""


class SvdFailure(SteeringError):
    """SVD did not converge."""


class SolverFailure(SteeringError):
    """A conic solve did not return an optimal solution.

    Carries the solver status string in ``status``.
    """

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class InconsistentPolicy(SteeringError):
    """Two source components mapped to the same terminal component disagree on
    the implied terminal mean or covariance."""


class InfeasibleStart(SteeringError):
    """The slack feasibility phase failed to produce a feasible iterate.

    Carries the partial iteration report in ``report`` when available.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class RecoveryFailure(SteeringError):
    """Per-step feedback recovery could not reproduce the path covariance."""


class SingularStepCovariance(SteeringError):
    """A per-step state covariance block is singular; feedback gains are not
    recoverable from it."""


class SingularPushforward(SteeringError):
    """A policy block has a (numerically) singular push-forward map."""
