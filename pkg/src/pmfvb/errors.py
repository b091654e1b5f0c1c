"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller-supplied argument violates a documented precondition."""


class DomainError(ValueError):
    """A value lies outside the domain where a density or gradient is defined."""


class NumericalFailure(ArithmeticError):
    """A non-finite value appeared during an update.

    ``particle`` and ``block`` locate the first offending particle when known.
    """

    def __init__(self, message, particle=None, block=None):
        self.particle = particle
        self.block = block
        where = []
        if block is not None:
            where.append(f"block={block!r}")
        if particle is not None:
            where.append(f"particle={particle}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
