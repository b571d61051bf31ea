# networks/exceptions.py


class LyapforgeError(Exception):
    """
    Base class for every error raised by the workbench
    """


class NumericFault(LyapforgeError):
    """
    A computation produced a non-finite value
    """

    def __init__(self, layer, detail=''):
        self.layer = layer
        self.detail = detail
        message = f"non-finite value in {layer}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class UnsupportedPrimitive(LyapforgeError):
    """
    Raised when a tape node is built from an unknown operation
    """

    def __init__(self, op):
        self.op = op
        super().__init__(f"unsupported primitive '{op}'")


class DimensionError(LyapforgeError):
    """
    Shapes of inputs, parameters or specs do not agree
    """


class LayoutMismatch(LyapforgeError):
    """
    Two parameter vectors (or a vector and its moments) have different layouts
    """


class DescriptorError(LyapforgeError):
    """
    An architecture descriptor cannot be turned into a network spec
    """

    def __init__(self, message, key=None, reason='invalid'):
        self.key = key
        self.reason = reason
        super().__init__(message)


class SolverError(LyapforgeError):
    """
    A linear-algebra routine (Lyapunov / Riccati) did not converge
    """
