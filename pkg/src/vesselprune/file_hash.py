import hashlib
import os
import warnings

from alpineer import io_utils, misc_utils


def get_hash(filepath):
    """Computes the hash of the specified file to verify artifact integrity.

    Args:
        filepath (str | PathLike): full path to file

    Returns:
        string: the blake2b hex digest of the file
    """
    with open(filepath, "rb") as f:
        file_hash = hashlib.blake2b()
        while chunk := f.read(8192):
            file_hash.update(chunk)
    return file_hash.hexdigest()


def hash_files(directory, files):
    """Hashes `files`, given relative to `directory`, into a name -> digest mapping."""
    return {name: get_hash(os.path.join(directory, name)) for name in files}


def compare_directories(dir_1, dir_2, ignore=()):
    """Compares two stage directories to ensure all artifacts are present with the same hashes.

    Args:
        dir_1: first directory to compare
        dir_2: second directory to compare
        ignore (tuple): file names excluded from the comparison, e.g. run logs

    Returns:
        list: a list of files with different hashes between the two directories
    """
    for label, directory in (("first", dir_1), ("second", dir_2)):
        sub_folders = io_utils.list_folders(directory)
        if len(sub_folders) > 0:
            warnings.warn(
                f"The following subfolders were found in the {label} directory. Sub-folder "
                "contents will not be compared, run this function on those subdirectories "
                f"to compare them: {sub_folders}"
            )

    dir_1_files = [f for f in io_utils.list_files(dir_1) if f not in ignore]
    dir_2_files = [f for f in io_utils.list_files(dir_2) if f not in ignore]

    misc_utils.verify_same_elements(directory_1=dir_1_files, directory_2=dir_2_files)

    bad_files = []
    for file in sorted(dir_1_files):
        if get_hash(os.path.join(dir_1, file)) != get_hash(os.path.join(dir_2, file)):
            print("Found a file with differing hashes: {}".format(file))
            bad_files.append(file)

    return bad_files
