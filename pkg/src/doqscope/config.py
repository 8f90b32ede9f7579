"""TOML configuration loading shared by the CLI, the orchestrator and the testbed."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


def load_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fp:
        return tomllib.load(fp)
