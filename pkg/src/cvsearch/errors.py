"""Exception hierarchy shared across the engine."""


class CVSearchError(Exception):
    """Base class for all engine errors."""


class InvalidArgument(CVSearchError, ValueError):
    pass


class RegionTooSmall(CVSearchError):
    pass


class Infeasible(CVSearchError):
    """Adjacency graph has more connected components than requested clusters."""


class UndefinedSilhouette(CVSearchError):
    pass


class EmptyTree(CVSearchError):
    pass


class OverlapError(CVSearchError, ValueError):
    pass


class UnknownTarget(CVSearchError, KeyError):
    pass


class FormatError(CVSearchError, ValueError):
    """Malformed FGRD container, config or scene file."""


class OracleError(CVSearchError):
    pass


class OracleUnavailable(OracleError):
    pass


class ProtocolError(OracleError):
    pass


class RangeError(OracleError, ValueError):
    pass
