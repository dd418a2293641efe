class ContractError(ValueError):
    """Raised when an input violates a module contract.

    Messages are prefixed with the owning module name (``"quantizer: ..."``)
    so the CLI can surface them verbatim.
    """

    def __init__(self, module, message):
        self.module = module
        super().__init__(f"{module}: {message}")


class NotFittedError(ContractError):
    def __init__(self, estimator):
        super().__init__(
            type(estimator).__name__,
            "this instance is not fitted yet; call 'fit' first",
        )
