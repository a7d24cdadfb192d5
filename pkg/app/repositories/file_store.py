"""파일 저장 공통 함수 - 모든 산출물은 temp 파일 + rename으로 원자적 기록"""

import json
import os
from pathlib import Path
import tempfile
from typing import Any

import pandas as pd


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, obj: Any) -> Path:
    """정렬된 키, 2칸 들여쓰기 - 재실행 시 바이트 동일"""
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: str | Path, frame: pd.DataFrame, preamble: str = "") -> Path:
    """preamble은 '# ' 주석 줄로 헤더 앞에 붙는다"""
    text = frame.to_csv(index=False, lineterminator="\n", float_format="%.10g")
    if preamble:
        text = f"# {preamble}\n{text}"
    return atomic_write_text(path, text)


def read_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
