class NumericalError(RuntimeError):
    """A linear-algebra or floating-point failure inside a solver."""


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual
