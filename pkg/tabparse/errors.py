from typing import Any, Dict, List, Optional


def error_payload(code: str, message: str, details: Optional[List[Dict[str, str]]] = None) -> Dict[str, Any]:
    return {"error": {"code": code, "message": message, "details": details or []}}


class TableError(Exception):
    code = "INTERNAL_ERROR"

    def __init__(self, message: str, details: Optional[List[Dict[str, str]]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or []

    def to_payload(self) -> Dict[str, Any]:
        return error_payload(self.code, self.message, self.details)


class ValidationError(TableError):
    code = "VALIDATION_ERROR"


class ConfigError(ValidationError):
    code = "CONFIG_ERROR"


class AnnotationError(TableError):
    code = "ANNOTATION_ERROR"


class GeometryError(TableError):
    code = "GEOMETRY_ERROR"


class CheckpointError(TableError):
    code = "CHECKPOINT_ERROR"


class TrainingDivergedError(TableError):
    code = "TRAINING_DIVERGED"
