import os
from importlib import metadata

from alpineer import io_utils
from natsort import natsorted

from vesselprune import settings
from vesselprune.file_hash import get_hash, hash_files
from vesselprune.json_utils import read_json_file, write_json_file

VERSIONED_PACKAGES = ["vesselprune", "numpy", "scipy", "pandas", "scikit-learn", "networkx"]


class HashMismatchError(ValueError):
    """Raised in strict mode when an artifact no longer matches its manifest."""


def package_versions():
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def stage_outputs(stage_dir):
    """Artifact file names of a stage directory in natural order, the manifest excluded."""
    files = io_utils.list_files(stage_dir)
    return natsorted(f for f in files if f != settings.MANIFEST_FILE_NAME)


def write_manifest(stage_dir, stage, config_hash, seed, inputs=None):
    """Records what a stage ran with and what it produced.

    Args:
        stage_dir (str): the stage output directory
        stage (str): stage name
        config_hash (str): hash of the full pipeline config
        seed (int): the global seed
        inputs (dict): input label -> file path; each file is hashed

    Returns:
        dict:
            the manifest written to `<stage_dir>/manifest.json`
    """
    inputs = inputs or {}
    manifest = {
        "stage": stage,
        "config_hash": config_hash,
        "seed": int(seed),
        "versions": package_versions(),
        "inputs": {label: get_hash(path) for label, path in sorted(inputs.items())},
        "outputs": hash_files(stage_dir, stage_outputs(stage_dir)),
    }
    write_json_file(os.path.join(stage_dir, settings.MANIFEST_FILE_NAME), manifest)
    return manifest


def read_manifest(stage_dir):
    return read_json_file(os.path.join(stage_dir, settings.MANIFEST_FILE_NAME))


def verify_manifest(stage_dir):
    """Re-hashes the outputs listed in a stage manifest.

    Args:
        stage_dir (str): the stage output directory

    Raises:
        HashMismatchError:
            if a listed output is missing or its content changed
    """
    manifest = read_manifest(stage_dir)
    bad = []
    for name, digest in manifest["outputs"].items():
        path = os.path.join(stage_dir, name)
        if not os.path.exists(path) or get_hash(path) != digest:
            bad.append(name)
    if bad:
        raise HashMismatchError(
            f"Artifacts of stage {manifest['stage']} in {stage_dir} changed since they were "
            f"written: {bad}"
        )
