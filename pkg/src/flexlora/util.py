from __future__ import annotations

import hashlib
import json


def stable_hash(obj, length: int = 16) -> str:
    """Short sha256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode()).hexdigest()[:length]
