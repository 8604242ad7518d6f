"""File helpers: provenance headers, deterministic CSV/JSON writers."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Any, Optional

import pandas as pd

from tlf import __version__

PROVENANCE_PREFIX = "# tlf "


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def _source_digest() -> str:
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:7]


def version_string() -> str:
    return f"{__version__}+g{_source_digest()}"


def make_provenance(config: Optional[dict]) -> Optional[dict]:
    if config is None:
        return None
    return {
        "config": config,
        "config_hash": config_hash(config),
        "version": version_string(),
    }


def read_provenance(path) -> Optional[dict]:
    """Return the provenance dict stored in a CSV/SVG/JSON output, if any."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("provenance")
    with open(path) as fh:
        first = fh.readline()
    if path.suffix == ".svg":
        start = first.find(PROVENANCE_PREFIX.strip())
        if "<!--" not in first or start < 0:
            return None
        body = first[start + len(PROVENANCE_PREFIX.strip()):]
        return json.loads(body[: body.rindex("-->")].strip())
    if first.startswith(PROVENANCE_PREFIX):
        return json.loads(first[len(PROVENANCE_PREFIX):])
    return None


def write_csv(frame: pd.DataFrame, path, provenance: Optional[dict] = None, **kw) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if provenance is not None:
        buf.write(PROVENANCE_PREFIX + canonical_json(provenance) + "\n")
    frame.to_csv(buf, index=False, lineterminator="\n", **kw)
    path.write_text(buf.getvalue())
    return path


def read_csv(path, **kw) -> pd.DataFrame:
    """Read a CSV, skipping a leading provenance line when present."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    skip = 1 if first.startswith("#") else 0
    return pd.read_csv(path, skiprows=skip, **kw)


def write_json(obj: dict, path, provenance: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if provenance is not None:
        obj = {**obj, "provenance": provenance}
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=str) + "\n")
    return path
