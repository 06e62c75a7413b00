"""Exception types raised by the detector stack."""


class ShapeError(ValueError):
    """A tensor or parameter has the wrong extents for the requested op."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class NetDefError(ValueError):
    """The network definition text is malformed or inconsistent."""


class WeightsError(ValueError):
    """The binary weights stream does not fit the network definition."""

    def __init__(self, message, expected=None, available=None):
        self.expected = expected
        self.available = available
        super().__init__(message)
