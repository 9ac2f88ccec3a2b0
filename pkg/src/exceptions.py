"""
Exception classes and error handling for densityfed
"""

from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any
from enum import Enum, IntEnum


class ErrorType(Enum):
    """Types of errors that can occur"""
    FILE_ERROR = "file_error"
    FORMAT_ERROR = "format_error"
    CONFIGURATION_ERROR = "configuration_error"
    TRAINING_ERROR = "training_error"
    PROTOCOL_ERROR = "protocol_error"
    FEDERATION_ERROR = "federation_error"
    STATISTICS_ERROR = "statistics_error"
    VALIDATION_ERROR = "validation_error"


class ErrorCode(Enum):
    """Specific error codes"""
    # File errors
    FILE_NOT_FOUND = "FILE_NOT_FOUND"
    FILE_EXISTS = "FILE_EXISTS"
    FILE_ERROR = "FILE_ERROR"
    PERMISSION_DENIED = "PERMISSION_DENIED"

    # Format errors
    MALFORMED_HEADER = "MALFORMED_HEADER"
    TRUNCATED_PAYLOAD = "TRUNCATED_PAYLOAD"
    UNSUPPORTED_FORMAT = "UNSUPPORTED_FORMAT"
    CRC_MISMATCH = "CRC_MISMATCH"

    # Configuration errors
    INVALID_CONFIG = "INVALID_CONFIG"
    SHAPE_MISMATCH = "SHAPE_MISMATCH"

    # Training errors
    NON_FINITE_VALUE = "NON_FINITE_VALUE"
    EMPTY_PARTITION = "EMPTY_PARTITION"

    # Protocol and federation errors
    PROTOCOL_VIOLATION = "PROTOCOL_VIOLATION"
    CONNECTION_FAILED = "CONNECTION_FAILED"
    FEDERATION_ABORTED = "FEDERATION_ABORTED"

    # Statistics errors
    UNDEFINED_STATISTIC = "UNDEFINED_STATISTIC"

    # Validation errors
    INVALID_ARGUMENTS = "INVALID_ARGUMENTS"
    EMPTY_INPUT = "EMPTY_INPUT"


class ProtocolErrorCode(IntEnum):
    """u16 codes carried by ERROR frames on the federation wire"""
    BAD_FRAME = 1
    UNKNOWN_TYPE = 2
    WRONG_ROUND = 3
    DUPLICATE_ID = 4
    UNKNOWN_COLLABORATOR = 5
    PEER_DISCONNECTED = 6
    SHAPE_MISMATCH = 7
    UNEXPECTED_MESSAGE = 8
    TIMEOUT = 9


@dataclass
class ErrorResponse:
    """Structured error response"""
    error_type: ErrorType
    error_message: str
    error_code: ErrorCode
    success: bool = False
    suggestions: List[str] = field(default_factory=list)
    details: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for CLI / report output"""
        return {
            "success": self.success,
            "error": {
                "type": self.error_type.value,
                "message": self.error_message,
                "code": self.error_code.value,
                "suggestions": self.suggestions,
                "details": self.details or {}
            }
        }


class DensityFedError(Exception):
    """Base exception for densityfed errors"""

    def __init__(self, message: str, error_type: ErrorType, error_code: ErrorCode,
                 suggestions: Optional[List[str]] = None, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.error_type = error_type
        self.error_code = error_code
        self.suggestions = suggestions or []
        self.details = details or {}

    def to_error_response(self) -> ErrorResponse:
        """Convert to ErrorResponse"""
        return ErrorResponse(
            error_type=self.error_type,
            error_message=self.message,
            error_code=self.error_code,
            suggestions=self.suggestions,
            details=self.details
        )


class FileError(DensityFedError):
    """File-related errors"""

    def __init__(self, message: str, error_code: ErrorCode, file_path: Optional[str] = None,
                 suggestions: Optional[List[str]] = None):
        details = {"file_path": file_path} if file_path else None
        super().__init__(message, ErrorType.FILE_ERROR, error_code, suggestions, details)


class FormatError(DensityFedError):
    """Malformed PGM images, weight files, frames or session recordings"""

    def __init__(self, message: str, error_code: ErrorCode, format_name: Optional[str] = None,
                 suggestions: Optional[List[str]] = None):
        details = {"format": format_name} if format_name else None
        super().__init__(message, ErrorType.FORMAT_ERROR, error_code, suggestions, details)


class ConfigurationError(DensityFedError):
    """Configuration-related errors"""

    def __init__(self, message: str, error_code: ErrorCode = ErrorCode.INVALID_CONFIG,
                 config_key: Optional[str] = None, suggestions: Optional[List[str]] = None):
        details = {"config_key": config_key} if config_key else None
        super().__init__(message, ErrorType.CONFIGURATION_ERROR, error_code, suggestions, details)


class ShapeError(ConfigurationError):
    """Tensor shapes, parameter names or raster dimensions disagree"""

    def __init__(self, message: str, expected: Any = None, actual: Any = None,
                 suggestions: Optional[List[str]] = None):
        super().__init__(message, ErrorCode.SHAPE_MISMATCH, suggestions=suggestions)
        self.details = {"expected": expected, "actual": actual}


class TrainingError(DensityFedError):
    """Training-related errors"""

    def __init__(self, message: str, error_code: ErrorCode = ErrorCode.NON_FINITE_VALUE,
                 parameter_name: Optional[str] = None, suggestions: Optional[List[str]] = None):
        details = {"parameter_name": parameter_name} if parameter_name else None
        super().__init__(message, ErrorType.TRAINING_ERROR, error_code, suggestions, details)
        self.parameter_name = parameter_name


class ProtocolError(DensityFedError):
    """A peer violated the federation wire protocol"""

    def __init__(self, message: str, wire_code: ProtocolErrorCode,
                 suggestions: Optional[List[str]] = None):
        super().__init__(message, ErrorType.PROTOCOL_ERROR, ErrorCode.PROTOCOL_VIOLATION,
                         suggestions, {"wire_code": int(wire_code)})
        self.wire_code = wire_code


class FederationError(DensityFedError):
    """The federation could not complete"""

    def __init__(self, message: str, error_code: ErrorCode = ErrorCode.FEDERATION_ABORTED,
                 wire_code: Optional[ProtocolErrorCode] = None,
                 suggestions: Optional[List[str]] = None):
        details = {"wire_code": int(wire_code)} if wire_code is not None else None
        super().__init__(message, ErrorType.FEDERATION_ERROR, error_code, suggestions, details)
        self.wire_code = wire_code


class StatisticsError(DensityFedError):
    """A statistic is undefined for the given input"""

    def __init__(self, message: str, error_code: ErrorCode = ErrorCode.UNDEFINED_STATISTIC,
                 suggestions: Optional[List[str]] = None):
        super().__init__(message, ErrorType.STATISTICS_ERROR, error_code, suggestions)


class ValidationError(DensityFedError):
    """Validation-related errors"""

    def __init__(self, message: str, error_code: ErrorCode = ErrorCode.INVALID_ARGUMENTS,
                 field_name: Optional[str] = None, suggestions: Optional[List[str]] = None):
        details = {"field_name": field_name} if field_name else None
        super().__init__(message, ErrorType.VALIDATION_ERROR, error_code, suggestions, details)


def create_shape_mismatch_error(what: str, expected: Any, actual: Any) -> ShapeError:
    """Create a shape mismatch error with helpful suggestions"""
    return ShapeError(
        message=f"{what}: expected {expected}, got {actual}",
        expected=expected,
        actual=actual,
        suggestions=[
            "Check that weights were produced by the same UNet configuration",
            "Ensure input rasters were resized to the network input size",
        ]
    )


def create_crc_mismatch_error(expected: int, actual: int) -> FormatError:
    """Create a CRC mismatch error for a weight blob"""
    return FormatError(
        message=f"Weight blob CRC mismatch: stored {expected:#010x}, computed {actual:#010x}",
        error_code=ErrorCode.CRC_MISMATCH,
        format_name="MFLW",
        suggestions=[
            "The file or frame was corrupted in transit or on disk",
            "Re-export the weights from the training run",
        ]
    )


def create_file_not_found_error(file_path: str) -> FileError:
    """Create a file not found error with helpful suggestions"""
    return FileError(
        message=f"File not found: {file_path}",
        error_code=ErrorCode.FILE_NOT_FOUND,
        file_path=file_path,
        suggestions=[
            "Check if the file path is correct",
            "Run the generate or train command first",
        ]
    )


def create_non_finite_error(parameter_name: str, stage: str) -> TrainingError:
    """Create a training error for NaN/Inf values"""
    return TrainingError(
        message=f"Non-finite {stage} for parameter '{parameter_name}'",
        parameter_name=parameter_name,
        suggestions=[
            "Lower the learning rate",
            "Check that input images were min-max normalised",
        ]
    )
