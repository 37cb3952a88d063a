class SglvError(Exception):
    exit_code = 1


class ContractError(SglvError, ValueError):
    """A precondition of an operation was violated by its arguments."""

    exit_code = 2


class ShapeMismatchError(ContractError):
    pass


class InputError(SglvError):
    """A file, schema or command-line value could not be used."""

    exit_code = 2


class ValidationFailure(SglvError):
    exit_code = 3
