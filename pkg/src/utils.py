"""
Utility functions for densityfed
"""

import logging
import re
import zlib
from pathlib import Path
from typing import Union

import numpy as np


def sanitize_name(name: str, max_length: int = 64) -> str:
    """
    Make an identifier safe for use as a path component

    Args:
        name: Subject, institution or regime identifier
        max_length: Maximum length of the result

    Returns:
        Name with path-hostile characters replaced by underscores
    """
    sanitized = re.sub(r'[<>:"/\\|?*\s]', '_', name).strip('._')
    if len(sanitized) > max_length:
        sanitized = sanitized[:max_length]
    return sanitized or "unnamed"


def make_rng(seed: int, *stream: str) -> np.random.Generator:
    """
    Create a named, reproducible random stream

    Streams are Philox counter-based generators keyed by the run seed and
    the CRC32 of each stream label, so ("train", "breast") and
    ("train", "dense") never share state and are identical across machines.

    Args:
        seed: Run seed
        stream: Stream labels, e.g. ("init", "breast")

    Returns:
        Seeded numpy Generator
    """
    spawn_key = tuple(zlib.crc32(label.encode("utf-8")) for label in stream)
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(sequence))


def format_duration(seconds: float) -> str:
    """
    Format a duration in human-readable form

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted duration string
    """
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, secs = divmod(seconds, 60)
    if minutes < 60:
        return f"{int(minutes)}m{secs:04.1f}s"
    hours, minutes = divmod(minutes, 60)
    return f"{int(hours)}h{int(minutes):02d}m"


def setup_logging(log_level: str = "INFO") -> None:
    """
    Setup logging configuration

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    """
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def is_non_empty_directory(directory_path: Union[str, Path]) -> bool:
    """True when the path is an existing directory with at least one entry"""
    path = Path(directory_path)
    return path.is_dir() and any(path.iterdir())
