"""
Utility functions for the capacity control toolkit
"""
import os
import hashlib
import logging

import pandas as pd

logger = logging.getLogger(__name__)

TOOL_NAME = "dccontrol"
TOOL_VERSION = "1.0.0"


class DomainError(ValueError):
    """A precondition or model invariant does not hold"""


class TraceParseError(DomainError):
    """A trace file row could not be parsed"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceValidationError(DomainError):
    """A trace file parsed but its content is invalid"""


def ensure_dir(path):
    """Ensure the parent directory of an output file exists"""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def file_digest(*paths):
    """
    Digest the content of one or more files

    Args:
        paths: File paths; missing or None entries are skipped

    Returns:
        str: First 16 hex characters of the sha256 over all file bytes
    """
    h = hashlib.sha256()
    for path in paths:
        if path is None or not os.path.exists(path):
            continue
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()[:16]


def array_digest(*arrays):
    """Digest numpy arrays by shape, dtype and raw bytes"""
    h = hashlib.sha256()
    for arr in arrays:
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def metadata_line(digest=None, seed=None, **extra):
    """
    Build the metadata header line written at the top of every output

    Args:
        digest (str): Configuration digest
        seed (int): Master random seed
        **extra: Additional key=value pairs, written in sorted order

    Returns:
        str: Header line starting with '#', without newline
    """
    fields = [f"tool={TOOL_NAME}", f"version={TOOL_VERSION}"]
    fields.append(f"digest={digest if digest is not None else 'none'}")
    fields.append(f"seed={seed if seed is not None else 'none'}")
    for key in sorted(extra):
        value = str(extra[key]).replace(" ", "_")
        fields.append(f"{key}={value}")
    return "# " + " ".join(fields)


def read_metadata(path):
    """Read the metadata header of an output file into a dict"""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        return {}
    meta = {}
    for token in first[1:].split():
        if "=" in token:
            key, value = token.split("=", 1)
            meta[key] = value
    return meta


def write_csv(df, path, meta):
    """
    Write a DataFrame as CSV preceded by a metadata line

    Args:
        df (pd.DataFrame): Data to write
        path (str): Output file path
        meta (str): Metadata line from metadata_line()

    Returns:
        str: The path written
    """
    ensure_dir(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(meta + "\n")
        df.to_csv(f, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(df)} rows to {path}")
    return path


def read_csv(path):
    """Read a CSV written by write_csv, skipping the metadata line"""
    return pd.read_csv(path, comment="#")
