"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class StkronError(Exception):
    exit_code = 1


class BadInputError(StkronError, ValueError):
    exit_code = 2


class NumericError(StkronError, ArithmeticError):
    exit_code = 3


class FormatError(StkronError):
    exit_code = 4
    code = "format"


class BadMagicError(FormatError):
    code = "bad magic"


class TruncatedPayloadError(FormatError):
    code = "truncated payload"


class DimOverflowError(FormatError):
    code = "dim overflow"


class VersionError(FormatError):
    code = "version mismatch"
