"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions (shapes, ranges, kinds)."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite value produced by primitive '{primitive}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
