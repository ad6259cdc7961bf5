class TranGCNError(Exception):
    """Base class for all package errors."""


class ConfigError(TranGCNError, ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ShapeError(TranGCNError, ValueError):
    pass


class ContractError(TranGCNError, ValueError):
    pass


class NumericError(TranGCNError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, stage: str, epoch: int, detail: str = "loss is not finite"):
        self.stage = stage
        self.epoch = epoch
        super().__init__(f"stage {stage}, epoch {epoch}: {detail}")


class IngestionError(TranGCNError, OSError):
    pass
