"""Exception hierarchy shared by the codec kernels and higher layers.

Kept free of imports so the compiled kernels can raise these without
creating an import cycle.
"""


class AgrimonError(Exception):
    """Base class for every error raised by this package."""


# -- sensor codec -------------------------------------------------------------


class SensorError(AgrimonError, ValueError):
    """A raw sensor signal could not be quantified."""


class CrcMismatch(SensorError):
    pass


class BadHeader(SensorError):
    pass


class RangeError(SensorError):
    pass


class OutOfRange(SensorError):
    pass


class ZeroWindow(SensorError):
    pass


class NoMatch(SensorError):
    pass


# -- MQTT codec ---------------------------------------------------------------


class MqttError(AgrimonError):
    pass


class Truncated(MqttError):
    """More octets are needed; not a failure, feed more data and retry."""


class Malformed(MqttError, ValueError):
    """Protocol violation; the connection carrying it must be closed."""


class InvariantViolation(MqttError, ValueError):
    """A packet object breaks the packet type invariants and cannot be encoded."""


class VarintOutOfRange(MqttError, ValueError):
    pass
