"""
Validation utilities for pipeline inputs and outputs.
"""
import os
import logging
from typing import Iterable, Tuple

import pandas as pd

from ..config import CSV_COLUMNS

logger = logging.getLogger('validators')

REQUIRED_CSV_COLUMNS = [c for c in CSV_COLUMNS if c != 'capacity_ah']


def validate_input_file(file_path: str, extensions: Iterable[str] = ('csv',)) -> Tuple[bool, str]:
    """
    Validate an input file before a stage reads it.

    Args:
        file_path (str): Path to the file
        extensions: Accepted extensions (without the dot)

    Returns:
        Tuple[bool, str]: (is_valid, error_message)
    """
    if not file_path:
        return False, "No input path given"
    if not os.path.exists(file_path):
        return False, f"File not found at {file_path}"
    if not os.path.isfile(file_path):
        return False, f"Not a regular file: {file_path}"

    extensions = [e.lower() for e in extensions]
    _, extension = os.path.splitext(file_path)
    if extensions and extension.lower().lstrip('.') not in extensions:
        return False, f"Unsupported file format: {extension}. Supported formats: {', '.join(extensions)}"

    try:
        if os.path.getsize(file_path) == 0:
            return False, f"File is empty: {file_path}"
    except OSError as e:
        logger.error(f"Error checking file size: {str(e)}")
        return False, f"Error checking file size: {str(e)}"
    return True, ""


def validate_cycler_csv(file_path: str) -> Tuple[bool, str]:
    """Check that a cycler export exists and its header names every required column"""
    is_valid, error_message = validate_input_file(file_path)
    if not is_valid:
        return is_valid, error_message
    try:
        header = [c.strip() for c in pd.read_csv(file_path, nrows=0, encoding='utf-8').columns]
    except Exception as e:
        return False, f"Cannot read CSV header of {file_path}: {str(e)}"
    missing = [c for c in REQUIRED_CSV_COLUMNS if c not in header]
    if missing:
        return False, f"{file_path}: missing column(s) {', '.join(missing)}"
    return True, ""


def validate_output_dir(dir_path: str) -> Tuple[bool, str]:
    """The output directory must exist (or be creatable) and be writable"""
    try:
        os.makedirs(dir_path, exist_ok=True)
    except OSError as e:
        return False, f"Cannot create output directory {dir_path}: {str(e)}"
    if not os.access(dir_path, os.W_OK):
        return False, f"Output directory is not writable: {dir_path}"
    return True, ""
