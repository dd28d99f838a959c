"""Exception types shared across the package."""


class DomainError(ValueError):
    """A model evaluation produced a value outside its admissible domain.

    Raised e.g. when a forward map returns non-finite entries or a noise
    scale is evaluated outside its positive support.
    """


class NumericalError(RuntimeError):
    """A linear-algebra operation failed in a way that indicates a bug.

    Cholesky failure of a Gram matrix falls in this category: the Gram
    matrix is positive definite whenever the noise scale is positive, so a
    failed factorization points at a defective model rather than an
    unlucky proposal.
    """
