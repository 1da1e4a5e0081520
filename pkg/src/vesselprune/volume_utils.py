import os
import struct

import numpy as np
from alpineer import io_utils

from vesselprune import settings
from vesselprune.vessel_tree import FeatureStack, ScalarVolume

# magic, version, nx, ny, nz, sx, sy, sz
_HEADER = struct.Struct("<4sIIIIfff")
HEADER_SIZE = _HEADER.size


class VolumeFormatError(ValueError):
    """Raised when a CVOL stream is malformed."""


def volume_to_bytes(vol: ScalarVolume) -> bytes:
    """Encodes a volume as a CVOL byte string.

    Args:
        vol (ScalarVolume): the volume

    Returns:
        bytes:
            little-endian header followed by x-fastest float32 values
    """
    header = _HEADER.pack(settings.CVOL_MAGIC, settings.CVOL_VERSION, *vol.dims, *vol.spacing)
    return header + vol.flat().astype("<f4").tobytes()


def volume_from_bytes(buffer: bytes) -> ScalarVolume:
    """Decodes a CVOL byte string.

    Args:
        buffer (bytes): the encoded volume

    Returns:
        ScalarVolume:
            the decoded volume, values widened to float64

    Raises:
        VolumeFormatError:
            on a magic/version mismatch, a truncated header or payload, or extra payload bytes
    """
    if len(buffer) < _HEADER.size:
        raise VolumeFormatError(
            f"Truncated header: {len(buffer)} bytes, expected at least {_HEADER.size}"
        )
    magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(buffer)
    if magic != settings.CVOL_MAGIC:
        raise VolumeFormatError(f"Bad magic {magic!r}, expected {settings.CVOL_MAGIC!r}")
    if version != settings.CVOL_VERSION:
        raise VolumeFormatError(f"Unsupported CVOL version {version}")

    n_values = nx * ny * nz
    payload = len(buffer) - _HEADER.size
    if payload < 4 * n_values:
        raise VolumeFormatError(
            f"Truncated payload: {payload} bytes for dims {(nx, ny, nz)}, expected {4 * n_values}"
        )
    if payload > 4 * n_values:
        raise VolumeFormatError(
            f"Payload of {payload} bytes disagrees with dims {(nx, ny, nz)} ({4 * n_values} bytes)"
        )
    flat = np.frombuffer(buffer, dtype="<f4", count=n_values, offset=_HEADER.size)
    return ScalarVolume.from_flat(flat.astype(np.float64), (nx, ny, nz), (sx, sy, sz))


def volume_io(direction, stream, vol: ScalarVolume = None):
    """Reads a volume from or writes a volume to a binary stream.

    Args:
        direction (str): `"read"` or `"write"`
        stream (BinaryIO): the stream to read from or write to
        vol (ScalarVolume): the volume to write, required for `"write"`

    Returns:
        ScalarVolume | bytes:
            the decoded volume when reading, the written bytes when writing
    """
    if direction == "read":
        return volume_from_bytes(stream.read())
    if direction == "write":
        if vol is None:
            raise ValueError("A volume is required to write")
        encoded = volume_to_bytes(vol)
        stream.write(encoded)
        return encoded
    raise ValueError(f"Invalid direction {direction}, must be one of ['read', 'write']")


def read_volume(volume_path) -> ScalarVolume:
    """Reads a CVOL file.

    Args:
        volume_path (str | PathLike): path to the file

    Returns:
        ScalarVolume:
            the volume
    """
    io_utils.validate_paths(volume_path)

    with open(volume_path, mode="rb") as f:
        return volume_io("read", f)


def write_volume(volume_path, vol: ScalarVolume):
    """Writes a CVOL file. Raises an error if the directory doesn't exist.

    Args:
        volume_path (str | PathLike): full path to write the file
        vol (ScalarVolume): the volume to save
    """
    io_utils.validate_paths(os.path.dirname(os.path.abspath(volume_path)))

    with open(volume_path, mode="wb") as f:
        volume_io("write", f, vol)


def load_feature_stack(volume_paths, channel_names=None) -> FeatureStack:
    """Loads externally computed feature volumes, e.g. CNN activations, as a feature stack.

    Args:
        volume_paths (list): CVOL files, one per feature layer, in layer order
        channel_names (list): optional names, defaults to the file names without extension

    Returns:
        FeatureStack:
            the stacked layers
    """
    io_utils.validate_paths(list(volume_paths))
    if channel_names is None:
        channel_names = [os.path.splitext(os.path.basename(p))[0] for p in volume_paths]
    return FeatureStack(tuple(read_volume(p) for p in volume_paths), tuple(channel_names))

