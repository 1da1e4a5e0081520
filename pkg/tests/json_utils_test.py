import json
import tempfile

import numpy as np
import pytest

from vesselprune import json_utils


def test_to_jsonable():
    data = {
        "dims": (4, 5, 6),
        "spacing": np.array([1.0, 0.5]),
        "count": np.int64(3),
        "valid": np.bool_(True),
        "loss": np.float32(0.25),
        1: None,
    }
    converted = json_utils.to_jsonable(data)
    assert converted == {
        "dims": [4, 5, 6],
        "spacing": [1.0, 0.5],
        "count": 3,
        "valid": True,
        "loss": 0.25,
        "1": None,
    }
    assert type(converted["count"]) is int
    assert type(converted["valid"]) is bool


def test_dumps_is_stable():
    a = json_utils.dumps({"b": 1, "a": [np.float64(0.5)]})
    b = json_utils.dumps({"a": [0.5], "b": 1})
    assert a == b
    assert a.endswith("\n")
    assert a.index('"a"') < a.index('"b"')
    assert json.loads(a) == {"a": [0.5], "b": 1}


def test_read_json_file():
    with tempfile.TemporaryDirectory() as tmp_dir:
        # create fake jsons
        manifest = {"stage": "trace", "files": {"scene_000.swc": "abc"}}
        json_path = tmp_dir + "/test.json"

        # write test json
        with open(json_path, "w") as jp:
            json.dump(manifest, jp)

        # Test bad path
        bad_path = "/neasdf1246ljea/asdfje12ua3421ndsf/asdf.json"
        with pytest.raises(FileNotFoundError, match=r"A bad path*"):
            json_utils.read_json_file(bad_path)

        # Read json with read_json_file function assuming file path is good
        newfile_test = json_utils.read_json_file(json_path)

        # Make sure using the read_json_file leads to the same object as manifest
        assert newfile_test == manifest


def test_write_json_file():
    with tempfile.TemporaryDirectory() as tmp_dir:
        # create fake jsons
        manifest = {"stage": "trace", "files": {"scene_000.swc": "abc"}}
        json_path = tmp_dir + "/test.json"

        # To be 100% you would want to create some massive random string instead of hardcode
        bad_path = "/mf8575b20d/bgjeidu45483hdck/asdf.json"

        # test bad path
        with pytest.raises(FileNotFoundError, match=r"A bad path*"):
            json_utils.write_json_file(json_path=bad_path, json_object=manifest)

        # Write file after file path is validated
        json_utils.write_json_file(json_path=json_path, json_object=manifest)

        # Read file with standard method
        with open(json_path, "r") as jp:
            newfile_test = json.load(jp)

        # Make sure the file written with write_json_file is the same as starting point
        assert newfile_test == manifest

        with open(json_path, "r") as jp:
            assert jp.read() == json_utils.dumps(manifest)
