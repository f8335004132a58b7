"""CSV artifact IO with a reproducibility header.

Every emitted file starts with one comment row carrying the resolved config
hash, the master seed and the code version, so identical runs produce
byte-identical artifacts.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def meta_comment(meta: dict) -> str:
    inner = " ".join(f"{k}={_fmt(v)}" for k, v in meta.items())
    return f"# {inner}"


def write_csv(path, columns, rows, meta: dict) -> None:
    lines = [meta_comment(meta), ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[dict], dict]:
    """Rows as string dicts plus the parsed header-comment metadata."""
    meta: dict = {}
    rows: list[dict] = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for part in line[1:].split():
                    if "=" in part:
                        k, v = part.split("=", 1)
                        meta[k] = v
                continue
            cells = line.split(",")
            if header is None:
                header = cells
            else:
                rows.append(dict(zip(header, cells)))
    return rows, meta
