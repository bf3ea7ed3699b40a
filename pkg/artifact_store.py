"""
Versioned artifact files and provenance hashes.

Archives are numpy ``.npz`` files holding named arrays plus a ``header`` entry
with a JSON document (format version, artifact kind, config hash and free
metadata).
"""

import hashlib
import json
import logging
import os
import zipfile
from pathlib import Path

import numpy as np

from errors import ConfigurationError, MissingArtifactError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def canonical_json(payload):
    """Serialize ``payload`` with sorted keys so equal content hashes equally."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def config_hash(section):
    """SHA-256 of the canonical JSON of a config section."""
    return hashlib.sha256(canonical_json(section).encode("utf-8")).hexdigest()


def array_digest(*arrays):
    """Digest of one or more arrays (dtype, shape and raw bytes)."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.dtype).encode("ascii"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def save_archive(path, kind, arrays, header=None):
    """Write ``arrays`` and a JSON header into one ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(header or {})
    document["format_version"] = FORMAT_VERSION
    document["kind"] = kind
    encoded = np.frombuffer(canonical_json(document).encode("utf-8"), dtype=np.uint8)
    # np.savez appends .npz to bare names; write through a handle to keep the path
    with open(path, "wb") as handle:
        np.savez(handle, header=encoded, **arrays)
    logger.info("Saved %s archive to %s", kind, path)
    return path


def load_archive(path, kind, producer=None):
    """Read an archive written by :func:`save_archive`.

    Returns ``(header, arrays)``. A missing file raises MissingArtifactError
    naming ``producer`` when given.
    """
    path = Path(path)
    if not path.exists():
        if producer is not None:
            raise MissingArtifactError(path, producer)
        raise ConfigurationError(f"file not found: {path}")

    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(archive["header"].tobytes().decode("utf-8"))
            arrays = {name: archive[name] for name in archive.files if name != "header"}
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
        raise unreadable_artifact(path, producer, e) from e
    if not isinstance(header, dict):
        raise unreadable_artifact(path, producer, "header is not a JSON object")

    if header.get("kind") != kind:
        raise ConfigurationError(f"{path} holds a '{header.get('kind')}' archive, expected '{kind}'")
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"{path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    return header, arrays


def unreadable_artifact(path, producer, reason):
    """ConfigurationError for a file that exists but cannot be decoded."""
    rerun = f"; rerun '{producer}' with --force" if producer else ""
    return ConfigurationError(f"cannot read {path} ({reason}){rerun}")


def archive_matches(path, kind, expected_hash):
    """True when ``path`` exists and was produced from ``expected_hash``."""
    if not os.path.exists(path):
        return False
    try:
        header, _ = load_archive(path, kind)
    except (ConfigurationError, OSError, ValueError, KeyError):
        return False
    return header.get("config_hash") == expected_hash
