"""Exception hierarchy shared by the simulator modules."""


class QKDLinkError(Exception):
    """Base class for all package errors."""


class DomainError(QKDLinkError, ValueError):
    """An argument lies outside the physical or mathematical domain."""


class ProtocolError(QKDLinkError):
    """Public-channel desynchronisation or a malformed frame."""


class PeerAbort(ProtocolError):
    """The peer sent an ABORT frame; ``reason`` holds its reason code."""

    def __init__(self, reason):
        super().__init__(f"peer aborted: {getattr(reason, 'name', reason)}")
        self.reason = reason


class ChannelClosed(ProtocolError):
    """The peer closed the byte stream before a frame was complete."""


class FitError(QKDLinkError):
    """Histogram fit could not be initialised or did not converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ThresholdError(QKDLinkError):
    """A root-finding target cannot be reached inside the search bracket."""


class CorrectionFailure(QKDLinkError):
    """Keys still disagree after the final reconciliation pass."""

    def __init__(self, message, leakage=0):
        super().__init__(message)
        self.leakage = leakage


class ConfigError(QKDLinkError, ValueError):
    """Invalid configuration; ``key_path`` names the offending entry."""

    def __init__(self, message, key_path=None):
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)
        self.key_path = key_path


class CalibrationError(QKDLinkError):
    """Calibration is underdetermined, diverged, or left large residuals."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals
