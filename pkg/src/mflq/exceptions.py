"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class MFLQError(Exception):
    code = "error"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    @property
    def reason(self):
        msg = str(self)
        return f"{self.code}: {msg}" if msg else self.code


class InputError(MFLQError, ValueError):
    code = "input"


class DimensionError(InputError):
    code = "dimension"


class AsymmetryError(InputError):
    code = "asymmetric"


class SingularSigma(InputError):
    code = "singular-sigma"


class AssumptionError(MFLQError):
    """No assumption set in scope holds (case ``Neither``)."""

    code = "unsupported-case"


class NearSingularGain(MFLQError, ArithmeticError):
    code = "near-singular-gain"


class BlowUp(MFLQError, ArithmeticError):
    code = "blow-up"


class PositivityViolated(MFLQError, ArithmeticError):
    code = "positivity-violated"


class SingularP(MFLQError, ArithmeticError):
    code = "singular-P"


class SingularG(MFLQError, ArithmeticError):
    code = "singular-G"


class IllConditioned(MFLQError, ArithmeticError):
    code = "ill-conditioned"


class Infeasible(MFLQError):
    code = "infeasible"


class Unsolvable(MFLQError):
    code = "unsolvable"


class SingularHessian(MFLQError, ArithmeticError):
    code = "singular-hessian"
