import os
import shutil
import tempfile

import numpy as np
import pytest

from vesselprune import file_hash
from vesselprune.vessel_tree import ScalarVolume
from vesselprune.volume_utils import write_volume


def _write_volumes(directory, count, rng):
    for i in range(count):
        path = os.path.join(directory, "scene_{:03d}.cvol".format(i))
        write_volume(path, ScalarVolume(rng.random((6, 6, 6))))


def test_get_hash(rng):
    with tempfile.TemporaryDirectory() as temp_dir:
        _write_volumes(temp_dir, 2, rng)

        shutil.copy(
            os.path.join(temp_dir, "scene_000.cvol"),
            os.path.join(temp_dir, "scene_000_copy.cvol"),
        )

        hash1 = file_hash.get_hash(os.path.join(temp_dir, "scene_000.cvol"))
        hash1_copy = file_hash.get_hash(os.path.join(temp_dir, "scene_000_copy.cvol"))
        hash2 = file_hash.get_hash(os.path.join(temp_dir, "scene_001.cvol"))

        assert hash1 != hash2
        assert hash1 == hash1_copy

        hashes = file_hash.hash_files(temp_dir, ["scene_000.cvol", "scene_001.cvol"])
        assert hashes == {"scene_000.cvol": hash1, "scene_001.cvol": hash2}


def test_compare_directories(rng):
    with tempfile.TemporaryDirectory() as top_level_dir:
        dir_1 = os.path.join(top_level_dir, "dir_1")
        os.makedirs(dir_1)

        # make fake data for testing
        _write_volumes(dir_1, 5, rng)

        # copy same data into second directory
        dir_2 = os.path.join(top_level_dir, "dir_2")
        shutil.copytree(dir_1, dir_2)

        assert file_hash.compare_directories(dir_1, dir_2) == []

        # a changed artifact is reported
        write_volume(os.path.join(dir_2, "scene_003.cvol"), ScalarVolume(np.zeros((6, 6, 6))))
        assert file_hash.compare_directories(dir_1, dir_2) == ["scene_003.cvol"]

        # ignored files are neither required nor compared
        with open(os.path.join(dir_1, "vesselprune_log.txt"), "w") as f:
            f.write("run 1\n")
        assert file_hash.compare_directories(
            dir_1, dir_2, ignore=("vesselprune_log.txt", "scene_003.cvol")
        ) == []
        with pytest.raises(ValueError):
            file_hash.compare_directories(dir_1, dir_2)

        os.remove(os.path.join(dir_1, "vesselprune_log.txt"))

        # check that warning is raised when sub-folder is present in first directory
        sub_folder_1 = os.path.join(dir_1, "sub_folder")
        os.makedirs(sub_folder_1)

        with pytest.warns(UserWarning, match="first directory"):
            file_hash.compare_directories(dir_1, dir_2)

        # check that warning is raised when sub-folder is present in second directory
        shutil.rmtree(sub_folder_1)
        sub_folder_2 = os.path.join(dir_2, "sub_folder")
        os.makedirs(sub_folder_2)

        with pytest.warns(UserWarning, match="second directory"):
            file_hash.compare_directories(dir_1, dir_2)
