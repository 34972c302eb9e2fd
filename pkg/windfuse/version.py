"""Version information for windfuse."""

import subprocess
import sys
from typing import Optional

# Used when git is unavailable, e.g. in a frozen executable
DEFAULT_VERSION = "0.3.0"

APP_NAME = "windfuse"
BUNDLE_FORMAT_VERSION = 1


def _git(*args: str) -> Optional[str]:
    """Runs a git command and returns its stripped stdout, or None."""
    try:
        out = subprocess.check_output(
            ["git", *args], stderr=subprocess.DEVNULL
        )
    except (subprocess.CalledProcessError, FileNotFoundError, OSError):
        return None
    return out.decode().strip()


def get_current_version() -> str:
    """Determines the version from the closest git tag.

    A frozen executable reports DEFAULT_VERSION. A checkout that is not
    exactly on a tag, or has uncommitted changes, gets '-dev' appended.
    """
    if getattr(sys, "frozen", False):
        return DEFAULT_VERSION

    tag = _git("describe", "--tags", "--abbrev=0")
    if not tag:
        return f"{DEFAULT_VERSION}-dev"

    version_str = tag.lstrip("v")
    on_tag = _git("describe", "--tags", "--exact-match") is not None
    dirty = bool(_git("status", "--porcelain", "--untracked-files=no"))
    if not on_tag or dirty:
        return f"{version_str}-dev"
    return version_str


__version__ = get_current_version()
