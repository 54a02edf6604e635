class GraspError(Exception):
    """Base error. `status` is the HTTP status the JSON handlers reply with."""
    status = 400

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"status": self.status, "error": self.message}


class ParseError(GraspError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class EmptyGraphError(GraspError):
    pass


class NotFoundError(GraspError):
    status = 404


class ValidationError(GraspError):
    pass


class DimensionError(GraspError):
    def __init__(self, op: str, left: tuple, right: tuple):
        super().__init__(f"{op}: incompatible shapes {left} and {right}")
        self.shapes = (left, right)


class NumericFault(GraspError):
    status = 500


class ContractError(GraspError):
    pass


class ConfigurationError(GraspError):
    def __init__(self, message: str, slot: str | None = None):
        super().__init__(message)
        self.slot = slot


class CheckpointError(GraspError):
    pass


class MissingCheckpointError(GraspError):
    def __init__(self, missing: list):
        super().__init__(f"missing checkpoint(s): {', '.join(str(m) for m in missing)}")
        self.missing = list(missing)


class TransportError(GraspError):
    status = 502

    def __init__(self, message: str, retries: int = 0):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class DecisionParseError(GraspError):
    pass


class GroundingError(GraspError):
    pass


class UnlabelableError(GraspError):
    pass


class TrainingError(GraspError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GenerationError(GraspError):
    pass
