"""Exception hierarchy shared by every module."""


class MixavgError(Exception):
    """Base class; the CLI maps any subclass to exit status 1."""


class ConfigError(MixavgError, ValueError):
    pass


class KernelInfeasibleError(MixavgError):
    """A correlation kernel does not define a positive semidefinite covariance."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class UnsupportedKernelError(MixavgError):
    pass


class IntegrationError(MixavgError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class OutOfWindowError(MixavgError, ValueError):
    pass


class EmptyWindowError(MixavgError):
    pass


class InsufficientMassError(MixavgError):
    """Too few replicates fall inside a conditioning ball."""

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class InsufficientReplicatesError(MixavgError):
    pass
