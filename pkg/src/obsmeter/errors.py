"""Exception hierarchy shared by every obsmeter component."""


class ObsmeterError(Exception):
    """Base class for all obsmeter errors."""


# measurement core
class DuplicateMPName(ObsmeterError):
    pass


class EmptyFieldList(ObsmeterError):
    pass


class MalformedIdentifier(ObsmeterError):
    pass


class ArityMismatch(ObsmeterError):
    pass


class TypeMismatch(ObsmeterError):
    pass


class UnknownMPName(ObsmeterError):
    pass


class ConfigError(ObsmeterError):
    """Raised for syntax errors in a RunConfig or recipe file."""


# filters
class NonNumericField(ObsmeterError):
    pass


class DanglingSource(ObsmeterError):
    pass


class CycleDetected(ObsmeterError):
    pass


# wire protocol
class ProtocolError(ObsmeterError):
    """Any byte sequence that does not parse as the obsmeter text protocol."""


class NonContiguousIndices(ProtocolError):
    pass


class UndeclaredStream(ProtocolError):
    pass


class DuplicateSeq(ProtocolError):
    pass


class MalformedHeader(ProtocolError):
    pass


class ProtocolVersionMismatch(ProtocolError):
    pass


# client runtime
class ConnectFailed(ObsmeterError):
    pass


class HandshakeRejected(ObsmeterError):
    pass


class FlushTimeout(ObsmeterError):
    pass


# collection server
class ActiveSessions(ObsmeterError):
    pass


class DuplicateClient(ObsmeterError):
    pass


# channel simulator
class OversizePacket(ObsmeterError):
    pass


class UnknownFlow(ObsmeterError):
    pass


# statistics
class EmptySeries(ObsmeterError):
    pass


class SeriesTooShort(ObsmeterError):
    pass


class FewerThanTwoGroups(ObsmeterError):
    pass


class UnbalancedDesign(ObsmeterError):
    pass


class DegenerateVariance(ObsmeterError):
    pass


# harness
class EmptyTrace(ObsmeterError):
    pass


class WindowMisalignment(ObsmeterError):
    pass


class ZeroDenominator(ObsmeterError):
    pass


class UnmatchedPacketId(ObsmeterError):
    pass


class InvalidRun(ObsmeterError):
    """A run lost its measurement transport mid-way and must be discarded."""
