"""Write build_info.py so run manifests can name the exact code that produced them."""

from __future__ import annotations

import os
import subprocess
import tomllib
from importlib import metadata
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def _git(*args: str) -> str | None:
    result = subprocess.run(["git", *args], cwd=ROOT, check=False, capture_output=True, text=True)
    return result.stdout.strip() if result.returncode == 0 else None


def project_version() -> str:
    """Return the version declared in pyproject.toml."""
    with (ROOT / "pyproject.toml").open("rb") as f:
        return str(tomllib.load(f)["project"]["version"])


def build_id() -> str:
    """Return STRATMED_BUILD_ID, else the short Git revision with a -dirty suffix."""
    override = os.environ.get("STRATMED_BUILD_ID")
    if override:
        return override
    revision = _git("rev-parse", "--short", "HEAD")
    if revision is None:
        return "unknown"
    return f"{revision}-dirty" if _git("status", "--porcelain") else revision


def numpy_version() -> str:
    """Return the installed numpy version, or "unknown"."""
    try:
        return metadata.version("numpy")
    except metadata.PackageNotFoundError:
        return "unknown"


def main() -> None:
    """Write build_info.py at the repository root."""
    lines = [
        f"BUILD_VERSION = {project_version()!r}",
        f"BUILD_ID = {build_id()!r}",
        f"BUILD_NUMPY = {numpy_version()!r}",
    ]
    (ROOT / "build_info.py").write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
