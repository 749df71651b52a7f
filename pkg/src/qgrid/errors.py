"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class QGridError(Exception):
    code = "error"

    def __init__(self, message: str = "", **context):
        super().__init__(message or self.code)
        self.context = context

    def __str__(self) -> str:
        base = super().__str__()
        if self.context:
            extras = " ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} ({extras})"
        return base


class FrameError(QGridError):
    code = "frame-error"


class BadSync(FrameError):
    code = "bad-sync"


class BadCRC(FrameError):
    code = "bad-crc"


class Truncated(FrameError):
    code = "truncated"


class BadLength(FrameError):
    code = "bad-length"


class KeyFileIOError(QGridError):
    code = "io-error"


class NoKeyEver(QGridError):
    code = "no-key-ever"


class UnknownSerial(QGridError):
    code = "unknown-serial"


class AlreadyConsumed(QGridError):
    code = "already-consumed"


class IVExhausted(QGridError):
    code = "iv-exhausted"


class BadKeyLength(QGridError):
    code = "bad-key-length"


class BadIVLength(QGridError):
    code = "bad-iv-length"


class BrokerUnavailable(QGridError):
    code = "broker-unavailable"


class NotConnected(QGridError):
    code = "not-connected"


class ConfigError(QGridError):
    code = "config-error"


class KeygenTimeout(QGridError):
    code = "keygen-timeout"


class ExportError(QGridError):
    code = "io-error"
