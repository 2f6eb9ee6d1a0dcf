"""Typed key-value config files (INI sections) and provenance digests."""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path


def _coerce(value: str):
    v = value.strip()
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        pass
    if "," in v:
        return [_coerce(p) for p in v.split(",")]
    return v


def load_config(path: str | Path) -> dict:
    """Load an INI-style config into {section: {key: typed value}}."""
    cp = configparser.ConfigParser()
    read = cp.read(str(path))
    if not read:
        raise FileNotFoundError(path)
    out: dict = {}
    for section in cp.sections():
        out[section] = {k: _coerce(v) for k, v in cp.items(section)}
    return out


def save_config(cfg: dict, path: str | Path):
    cp = configparser.ConfigParser()
    for section, items in cfg.items():
        cp[section] = {}
        for k, v in items.items():
            if isinstance(v, (list, tuple)):
                cp[section][k] = ",".join(str(x) for x in v)
            else:
                cp[section][k] = str(v)
    with open(path, "w") as fh:
        cp.write(fh)


def digest_of(*objs) -> str:
    """Stable hex digest of JSON-serializable objects (and raw bytes)."""
    h = hashlib.sha256()
    for obj in objs:
        if isinstance(obj, bytes):
            h.update(obj)
        else:
            h.update(json.dumps(obj, sort_keys=True, default=str).encode())
    return h.hexdigest()
