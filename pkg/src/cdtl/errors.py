"""Exception types shared across the package."""


class CdtlError(Exception):
    pass


class SchemaError(CdtlError):
    pass


class ParseError(CdtlError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ConfigError(CdtlError):
    pass


class EligibilityError(CdtlError):
    """The sensitive value distribution cannot be made l-diverse."""

    def __init__(self, value, count, total, l):
        super().__init__(
            f"sensitive value {value!r} occurs {count}/{total} times, above the 1/{l} cap"
        )
        self.value = value
        self.count = count
        self.total = total
        self.l = l


class AnatomyError(CdtlError):
    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class AuthenticationError(CdtlError):
    """Ciphertext failed authentication (wrong key or tampered bytes)."""


class WrongKeyError(AuthenticationError, KeyError):
    """Raised by reconstruction when an ESEQ does not open under the given key."""

    def __str__(self):
        return Exception.__str__(self)


class IntegrityError(CdtlError):
    def __init__(self, message, gid=None):
        super().__init__(message)
        self.gid = gid


class FormatError(CdtlError):
    pass


class ProtocolError(CdtlError):
    pass


class EmptyInputError(CdtlError):
    pass
