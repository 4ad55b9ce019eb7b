"""Exception hierarchy shared by the toolkit."""


class EtcError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(EtcError, ValueError):
    pass


class PreconditionError(EtcError):
    pass


class ExperimentDiverged(EtcError):
    pass


class SynthesisInfeasible(EtcError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class NoFeasiblePoint(EtcError):
    pass


class InternalInfeasible(EtcError):
    """A problem that is feasible by theory came back infeasible."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class SimulationDiverged(EtcError):
    pass


class RunawayEvents(EtcError):
    pass


class DegenerateRegion(EtcError):
    pass


class UndefinedResult(EtcError):
    """Raised when a statistic does not exist for the given input (e.g. < 2 events)."""


class ConfigError(EtcError):
    pass
