"""Exception hierarchy shared by every layer of the messaging stack."""


class DXNetError(Exception):
    """Base class for all errors raised by this package."""


# serialization
class CapacityExceeded(DXNetError):
    pass


class Truncated(DXNetError):
    """Not enough bytes for a whole message yet; wait for more stream data."""


class MalformedHeader(DXNetError):
    pass


# ring buffer
class WouldBlock(DXNetError):
    pass


class InvalidSize(DXNetError):
    pass


class DoubleCommit(DXNetError):
    pass


class OverAdvance(DXNetError):
    pass


# interest manager / connections
class UnknownNode(DXNetError):
    pass


class NodeNotDiscovered(DXNetError):
    pass


class CreationTimeout(DXNetError):
    pass


class ExchangeTimeout(DXNetError):
    pass


class ConnectionLimitExhausted(DXNetError):
    pass


class SelfConnection(DXNetError):
    pass


# flow control
class Underflow(DXNetError):
    """More windows confirmed than bytes outstanding: a transport bug."""


# verbs emulation
class QpNotConnected(DXNetError):
    pass


class ConnectFailed(DXNetError):
    pass


class SrqFull(DXNetError):
    pass


# engine / buffers
class DoubleReturn(DXNetError):
    pass


# application layer
class SendTimeout(DXNetError):
    pass


class RequestTimeout(DXNetError):
    pass


# benchmark / config
class EmptySamples(DXNetError):
    pass


class ConfigInvalid(DXNetError):
    pass


class PeerUnreachable(DXNetError):
    pass


class ParseError(ConfigInvalid):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(ConfigInvalid):
    pass
