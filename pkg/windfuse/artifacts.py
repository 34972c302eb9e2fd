"""Output directory management for windfuse runs.

This module owns everything written under a run's ``--out`` directory:
artifact naming, content digests and the ``manifest.json`` that makes a
run replayable.
"""

import json
import logging
import os
import re
from typing import Any, Dict, List, Optional

from windfuse.utils import sha256_file
from windfuse.version import APP_NAME, __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# Windows/Unix reserved characters and control characters
INVALID_CHARS = r'[<>:"/\\|?*\x00-\x1f]'


def safe_name(name: str) -> str:
    """Replaces reserved filename characters with underscores."""
    cleaned = re.sub(INVALID_CHARS, "_", str(name)).strip()
    if not cleaned or cleaned in (".", ".."):
        raise ValueError(f"unusable artifact name: {name!r}")
    return cleaned


class ArtifactStore:
    """Manages the files of one run's output directory."""

    def __init__(self, base_dir: str):
        """Initializes the ArtifactStore.

        Args:
            base_dir: The run's output directory; created on demand.
        """
        self.base_dir = base_dir
        self.inputs: Dict[str, str] = {}
        self.artifacts: List[str] = []

    def ensure(self) -> str:
        os.makedirs(self.base_dir, exist_ok=True)
        return self.base_dir

    def path(self, name: str) -> str:
        """Path of a named artifact inside the directory, recorded for the manifest.

        Args:
            name: Artifact file name; reserved characters are sanitized.

        Returns:
            The path to write to.
        """
        self.ensure()
        name = safe_name(name)
        if name not in self.artifacts:
            self.artifacts.append(name)
        return os.path.join(self.base_dir, name)

    def record(self, path: str):
        """Records a file written by another module (e.g. curve images)."""
        name = os.path.relpath(path, self.base_dir)
        if name not in self.artifacts:
            self.artifacts.append(name)

    def write_text(self, name: str, text: str) -> str:
        dest = self.path(name)
        with open(dest, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        return dest

    def add_input(self, source_path: str) -> str:
        """Digests an input file for the manifest.

        Raises:
            FileNotFoundError: If the source file does not exist.
        """
        if not source_path or not os.path.exists(source_path):
            raise FileNotFoundError(f"input not found: {source_path}")
        digest = sha256_file(source_path)
        self.inputs[os.path.abspath(source_path)] = digest
        return digest

    def write_manifest(self, command: str, config_json: str, seed: int, extra: Optional[Dict[str, Any]] = None) -> str:
        """Writes manifest.json: config, seed, input digests, artifacts with digests.

        Args:
            command: The subcommand that produced the directory.
            config_json: The resolved RunConfig as canonical JSON.
            seed: The run seed.
            extra: Command-specific entries (e.g. fold count).

        Returns:
            The manifest path.
        """
        self.ensure()
        artifacts = {}
        for name in sorted(self.artifacts):
            full = os.path.join(self.base_dir, name)
            if os.path.isfile(full):
                artifacts[name] = sha256_file(full)
        doc = {
            "app": APP_NAME,
            "version": __version__,
            "command": command,
            "seed": seed,
            "config": json.loads(config_json),
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": artifacts,
        }
        if extra:
            doc.update(extra)
        dest = os.path.join(self.base_dir, MANIFEST_NAME)
        with open(dest, "w", encoding="utf-8", newline="\n") as f:
            json.dump(doc, f, sort_keys=True, indent=2)
            f.write("\n")
        logger.info("wrote manifest with %d artifacts to %s", len(artifacts), dest)
        return dest

    @staticmethod
    def read_manifest(directory: str) -> Dict[str, Any]:
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, encoding="utf-8") as f:
            return json.load(f)
