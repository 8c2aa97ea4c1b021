"""Config digests for stage caching."""

import hashlib
import json
from dataclasses import asdict, is_dataclass


def canonical_json(value) -> str:
    if is_dataclass(value) and not isinstance(value, type):
        value = asdict(value)
    return json.dumps(value, sort_keys=True, separators=(",", ":"), default=str)


def config_digest(value) -> str:
    """SHA-256 hex digest of the canonical JSON form of a dataclass or plain value."""
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()

