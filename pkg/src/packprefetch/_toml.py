from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def load_toml(path: Union[str, Path]) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)
