"""Exception hierarchy shared by the simulator, the I/O layer and the CLI."""


class BulbError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this category."""

    exit_code = 1


class ConfigError(BulbError, ValueError):
    exit_code = 3


class DomainError(BulbError, ValueError):
    """Radius or angle outside the region where trajectories exist."""


class SingularityError(DomainError):
    """Beam too close to tangential for the 1/cos projection."""


class IntegrationError(BulbError, ArithmeticError):
    pass


class IntegrityError(BulbError):
    exit_code = 4


class ExchangeError(IntegrityError):
    """Missing or inconsistent contribution in a collective exchange."""


class StagingError(BulbError):
    pass


class SnapshotError(IntegrityError):
    pass


class BadMagicError(SnapshotError):
    pass


class BadVersionError(SnapshotError):
    pass


class ChecksumError(SnapshotError):
    pass


class TruncationError(SnapshotError):
    pass
