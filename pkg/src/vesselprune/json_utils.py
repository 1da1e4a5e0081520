import json
import os

import numpy as np
from alpineer import io_utils


def to_jsonable(obj):
    """Converts tuples, numpy scalars and arrays nested in `obj` to plain JSON types.

    Args:
        obj (Any): dicts, lists, tuples, numpy values or JSON scalars

    Returns:
        Any:
            the same structure built from dicts, lists and Python scalars only
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(json_object) -> str:
    """Stable JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(to_jsonable(json_object), indent=2, sort_keys=True) + "\n"


def read_json_file(json_path, encoding=None):
    """Reads json file and returns json file object while verifying dirs exist.

    Args:
        json_path (str): path to json file
        encoding (str): type of file encoding
    Returns:
        dict: the JSON object loaded from `json_path`
    """
    # call to validate paths will raise errors if anything wrong, and do nothing if
    # file path valid
    io_utils.validate_paths(json_path)

    with open(json_path, mode="r", encoding=encoding) as jp:
        json_file = json.load(jp)

    return json_file


def write_json_file(json_path, json_object, encoding=None):
    """Writes json file object to json file. Raises error if directory doesn't exist.

    Keys are sorted and numpy values converted so identical objects give identical bytes.

    Args:
        json_path (str): full path to write json file
        json_object (dict): data to save to the file
        encoding (str): type of file encoding
    """
    # get the path minus the proposed file name.
    dir_path = os.path.dirname(os.path.abspath(json_path))

    # Raises error if path doesnt exist
    io_utils.validate_paths(dir_path)

    with open(json_path, mode="w", encoding=encoding) as jp:
        jp.write(dumps(json_object))
