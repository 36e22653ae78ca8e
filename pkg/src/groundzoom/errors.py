"""Exception types shared across the package."""


class ParseError(ValueError):
    """Bounding-box payload does not match ``[x1,y1,x2,y2]``."""


class DegenerateBox(ValueError):
    """A box collapsed to zero area after clamping."""


class NonFinite(ArithmeticError):
    """An importance ratio or parameter left the finite range."""


class DomainError(ValueError):
    """Distribution arguments outside the domain of the divergence."""


class TransportError(RuntimeError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class ProtocolError(RuntimeError):
    """Server reply is missing the assistant text content."""


class JoinError(KeyError):
    pass
