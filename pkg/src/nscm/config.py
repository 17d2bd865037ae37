"""TOML loading and pipeline configuration."""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def load_toml(path) -> dict:
    with open(Path(path), "rb") as fh:
        return tomllib.load(fh)
