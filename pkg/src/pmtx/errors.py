class PmtxError(Exception):
    pass


class RangeError(PmtxError):
    """Address or span outside the emulated NVM."""


class ConfigError(PmtxError):
    pass


class LayoutError(PmtxError):
    """Address does not fall in the data region of a checksum page."""


class AllocError(PmtxError):
    pass


class OutOfMemoryError(AllocError):
    pass


class UsageError(PmtxError):
    pass


class TxnStateError(PmtxError):
    pass


class InternalError(PmtxError):
    pass


class RecoveryError(PmtxError):
    pass


class CrashInjected(Exception):
    """Raised by the emulator when an armed crash point is reached.

    Deliberately not a PmtxError: nothing in the runtime should swallow it.
    """
