import io
import os
import struct
import tempfile

import numpy as np
import pytest

from vesselprune import settings, volume_utils
from vesselprune.vessel_tree import ScalarVolume


def test_volume_to_bytes_layout():
    vol = ScalarVolume.from_flat(np.arange(6, dtype=float) / 8, (3, 2, 1), (0.5, 1.0, 2.0))
    encoded = volume_utils.volume_to_bytes(vol)

    assert volume_utils.HEADER_SIZE == 32
    assert len(encoded) == 32 + 4 * 6
    magic, version, nx, ny, nz, sx, sy, sz = struct.unpack_from("<4sIIIIfff", encoded)
    assert magic == b"CVOL"
    assert version == settings.CVOL_VERSION
    assert (nx, ny, nz) == (3, 2, 1)
    assert (sx, sy, sz) == (0.5, 1.0, 2.0)

    # payload is x-fastest little-endian float32
    payload = np.frombuffer(encoded, dtype="<f4", offset=32)
    assert payload.tolist() == (np.arange(6) / 8).tolist()

    decoded = volume_utils.volume_from_bytes(encoded)
    assert decoded.dims == (3, 2, 1)
    assert decoded.spacing == (0.5, 1.0, 2.0)
    assert np.array_equal(decoded.data, vol.data)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b[:20], "Truncated header"),
        (lambda b: b"XVOL" + b[4:], "Bad magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "Unsupported CVOL version"),
        (lambda b: b[:-4], "Truncated payload"),
        (lambda b: b + b"\x00" * 4, "disagrees with dims"),
    ],
)
def test_volume_from_bytes_rejects_malformed(mutate, match):
    encoded = volume_utils.volume_to_bytes(ScalarVolume.zeros((2, 2, 2)))
    with pytest.raises(volume_utils.VolumeFormatError, match=match):
        volume_utils.volume_from_bytes(mutate(encoded))


def test_volume_io_streams():
    vol = ScalarVolume(np.full((2, 3, 4), 0.25))
    stream = io.BytesIO()
    written = volume_utils.volume_io("write", stream, vol)
    assert stream.getvalue() == written

    stream.seek(0)
    read = volume_utils.volume_io("read", stream)
    assert np.array_equal(read.data, vol.data)

    with pytest.raises(ValueError, match="Invalid direction"):
        volume_utils.volume_io("append", stream, vol)
    with pytest.raises(ValueError, match="volume is required"):
        volume_utils.volume_io("write", stream)


def test_read_write_volume_and_feature_stack():
    with tempfile.TemporaryDirectory() as temp_dir:
        paths = []
        for i, name in enumerate(["raw", "smooth"]):
            path = os.path.join(temp_dir, f"{name}.cvol")
            volume_utils.write_volume(path, ScalarVolume(np.full((3, 3, 3), i / 2)))
            paths.append(path)

        assert np.all(volume_utils.read_volume(paths[1]).data == 0.5)

        stack = volume_utils.load_feature_stack(paths)
        assert stack.channel_names == ("raw", "smooth")
        assert stack.n_layers == 2

        named = volume_utils.load_feature_stack(paths, ["a", "b"])
        assert named.channel_names == ("a", "b")

        with pytest.raises(FileNotFoundError, match=r"A bad path*"):
            volume_utils.read_volume(os.path.join(temp_dir, "missing.cvol"))
        with pytest.raises(FileNotFoundError, match=r"A bad path*"):
            volume_utils.load_feature_stack(paths + [os.path.join(temp_dir, "missing.cvol")])
