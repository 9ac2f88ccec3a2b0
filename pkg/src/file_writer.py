"""
File I/O and output handling for densityfed artifacts
"""

import csv
import io
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union
import logging

try:
    from .exceptions import FileError, ErrorCode
    from .utils import is_non_empty_directory
except ImportError:
    from exceptions import FileError, ErrorCode
    from utils import is_non_empty_directory


class FileWriter:
    """Writes datasets, weights and reports below one output directory"""

    def __init__(self, output_dir: Union[str, Path], force: bool = False,
                 logger: Optional[logging.Logger] = None):
        """
        Initialize file writer

        Args:
            output_dir: Root directory for every artifact of a command
            force: Allow writing into a non-empty directory and replacing files
            logger: Optional logger for file operations
        """
        self.output_dir = Path(output_dir)
        self.force = force
        self.logger = logger or logging.getLogger(__name__)

    def prepare(self) -> Path:
        """
        Create the output directory, refusing to reuse a non-empty one

        Returns:
            Path: The output directory

        Raises:
            FileError: If the directory is non-empty and force is off, or
                cannot be created
        """
        if is_non_empty_directory(self.output_dir) and not self.force:
            raise FileError(
                f"Output directory is not empty: {self.output_dir}",
                ErrorCode.FILE_EXISTS,
                file_path=str(self.output_dir),
                suggestions=[
                    "Pass --force to write into it anyway",
                    "Choose a different --out directory"
                ]
            )
        self.ensure_output_directory(self.output_dir)
        return self.output_dir

    def ensure_output_directory(self, directory_path: Union[str, Path]) -> bool:
        """
        Ensure output directory exists

        Raises:
            FileError: If directory cannot be created
        """
        path = Path(directory_path)
        try:
            if path.exists() and not path.is_dir():
                raise FileError(
                    f"Output path exists but is not a directory: {path}",
                    ErrorCode.FILE_ERROR,
                    file_path=str(path),
                    suggestions=[
                        "Choose a different output directory",
                        "Remove the existing file"
                    ]
                )
            if not path.exists():
                path.mkdir(parents=True, exist_ok=True)
                self.logger.debug(f"Created output directory: {path}")
            return True
        except PermissionError:
            raise FileError(
                f"Permission denied creating directory: {path}",
                ErrorCode.PERMISSION_DENIED,
                file_path=str(path),
                suggestions=[
                    "Check write permissions for the parent directory",
                    "Choose a directory you have write access to"
                ]
            )
        except OSError as e:
            raise FileError(
                f"Error creating directory {path}: {e}",
                ErrorCode.FILE_ERROR,
                file_path=str(path),
                suggestions=["Check available disk space", "Ensure the path is valid"]
            )

    def resolve(self, relative_path: Union[str, Path]) -> Path:
        """Absolute location of an artifact below the output directory"""
        return self.output_dir / relative_path

    def write_bytes(self, relative_path: Union[str, Path], data: bytes) -> Path:
        """
        Write binary content

        Returns:
            Path: Where the file was written

        Raises:
            FileError: If the file exists without force, or cannot be written
        """
        target = self.resolve(relative_path)
        self.ensure_output_directory(target.parent)
        self._check_conflict(target)
        try:
            target.write_bytes(data)
        except PermissionError:
            raise FileError(
                f"Permission denied writing to: {target}",
                ErrorCode.PERMISSION_DENIED,
                file_path=str(target),
                suggestions=["Check write permissions for the output directory"]
            )
        except OSError as e:
            raise FileError(
                f"Error writing file {target}: {e}",
                ErrorCode.FILE_ERROR,
                file_path=str(target),
                suggestions=["Check available disk space", "Ensure the path is valid"]
            )
        self.logger.debug(f"Wrote {len(data)} bytes to {target}")
        return target

    def write_text(self, relative_path: Union[str, Path], content: str) -> Path:
        """Write UTF-8 text with '\\n' line endings"""
        return self.write_bytes(relative_path, content.encode("utf-8"))

    def write_csv(self, relative_path: Union[str, Path], header: Sequence[str],
                  rows: Iterable[Sequence[Any]]) -> Path:
        """Write a CSV file with a pinned header row"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
        path = self.write_text(relative_path, buffer.getvalue())
        self.logger.info(f"Wrote {path}")
        return path

    def claim(self, relative_path: Union[str, Path]) -> Path:
        """
        Reserve a path for a file written by someone else (a child process,
        a streaming recorder)

        Raises:
            FileError: If the file exists without force
        """
        target = self.resolve(relative_path)
        self.ensure_output_directory(target.parent)
        self._check_conflict(target)
        return target

    def _check_conflict(self, target: Path) -> None:
        if target.exists() and not self.force:
            raise FileError(
                f"File already exists: {target}",
                ErrorCode.FILE_EXISTS,
                file_path=str(target),
                suggestions=[
                    "Pass --force to replace existing artifacts",
                    "Remove the existing file"
                ]
            )
