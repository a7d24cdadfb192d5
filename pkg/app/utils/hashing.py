"""Canonical digests for configs, graphs and datasets"""

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    """키 정렬 + 공백 없는 JSON (digest 입력용)"""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest(obj: Any, length: int = 16) -> str:
    """JSON 직렬화 가능한 객체의 sha256 digest"""
    if not isinstance(obj, (bytes, str)):
        obj = canonical_json(obj)
    if isinstance(obj, str):
        obj = obj.encode("utf-8")
    return hashlib.sha256(obj).hexdigest()[:length]
