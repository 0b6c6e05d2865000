"""Strict JSON-to-dataclass loading shared by every config file."""
from __future__ import annotations

import dataclasses
import hashlib
import json


def strict_from_dict(cls, data: dict, path: str = "", nested: dict | None = None):
    """Build dataclass ``cls`` from ``data``, rejecting unknown fields.

    ``nested`` maps ``(cls, field_name)`` to the dataclass used for a nested
    object.  Error messages carry the dotted field path.
    """
    nested = nested or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path or cls.__name__}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ValueError(f"unknown config field(s): {', '.join(where + u for u in unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = nested.get((cls, key))
        kwargs[key] = strict_from_dict(sub, value, f"{path}.{key}" if path else key, nested) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path or cls.__name__}: {exc}") from None


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of a dataclass or plain object."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()
