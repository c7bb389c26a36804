# encoding: utf-8

"""Exception hierarchy shared by every pudesk module.

Each error carries the process exit code the command line reports for it:

>>> ParseError('bad xml').exit_code
2
>>> issubclass(InvariantError, ValueError)
True
"""


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_INVARIANT = 3
EXIT_EMPTY = 4


class Error(Exception):
    """Base pudesk exception."""

    exit_code = EXIT_USAGE


class CommandError(Error):
    """An error in the top-level command parsing code."""


class LoggingError(Error):
    """A logging related error occurred."""


class ParseError(Error, ValueError):
    """Input could not be parsed: malformed files, unknown class names, bad
    payload fields."""

    exit_code = EXIT_PARSE

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class InvariantError(Error, ValueError):
    """A domain invariant was violated (degenerate box, bad threshold...)."""

    exit_code = EXIT_INVARIANT


class EmptyResultError(Error):
    """The requested result is empty (no supported class, nothing left)."""

    exit_code = EXIT_EMPTY
