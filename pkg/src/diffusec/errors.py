"""Exception types shared across the package."""


class DiffusecError(Exception):
    """Base class for all library errors."""


class ShapeError(DiffusecError):
    """Tensor shapes are missing, empty, or inconsistent."""


class ConfigError(DiffusecError):
    """A configuration value is out of its legal range."""


class TimestepError(DiffusecError):
    """A diffusion timestep lies outside the schedule."""


class PlanError(DiffusecError):
    """A timestep plan violates the step-budget constraints."""


class DataError(DiffusecError):
    """A dataset is empty or carries invalid labels."""


class DivergenceError(DiffusecError):
    """Training produced non-finite gradients or losses."""


class MeasurementError(DiffusecError):
    """A measurement has no defined value (e.g. an all-zero probe batch)."""


class ProtocolError(DiffusecError):
    """A sync frame is malformed."""


class FrameError(ProtocolError):
    """A message cannot be framed (e.g. oversize payload)."""


class IncompleteFrameError(ProtocolError):
    """A sync frame ends before its declared length."""


class UnsupportedMessageError(ProtocolError):
    """A sync frame carries an unknown message type."""


class ConstraintError(ProtocolError):
    """A decoded timestep assignment violates the step-budget constraints."""


class HandshakeError(DiffusecError):
    """The timestep synchronization handshake did not complete."""
