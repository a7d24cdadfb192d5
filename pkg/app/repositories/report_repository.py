"""CSV / JSON 리포트와 run manifest 기록"""

from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import pandas as pd

from ..core.constants import DECISION_CSV_COLUMNS
from ..models.discovery import DecisionRecord
from ..models.experiment import RunManifest
from .file_store import read_csv, write_csv, write_json

DIGEST_FIELD = "manifest_digest"


def write_rows(path: str | Path, rows: Iterable[dict], columns: Sequence[str],
               manifest_digest: Optional[str] = None) -> Path:
    """헤더는 columns 그대로, 행에 없는 컬럼은 빈 칸. digest는 헤더 앞 주석 줄에 실린다"""
    preamble = f"{DIGEST_FIELD}={manifest_digest}" if manifest_digest else ""
    return write_csv(path, pd.DataFrame(list(rows), columns=list(columns)), preamble)


def read_rows(path: str | Path) -> pd.DataFrame:
    return read_csv(path)


def csv_manifest_digest(path: str | Path) -> Optional[str]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    prefix = f"# {DIGEST_FIELD}="
    return first[len(prefix):] if first.startswith(prefix) else None


def write_decisions(path: str | Path, decisions: Sequence[DecisionRecord],
                    manifest_digest: Optional[str] = None) -> Path:
    return write_rows(path, (d.as_row() for d in decisions), DECISION_CSV_COLUMNS, manifest_digest)


def write_report(path: str | Path, payload: Dict[str, Any], manifest: RunManifest) -> Path:
    return write_json(path, {**payload, DIGEST_FIELD: manifest.digest()})


def manifest_path(output: str | Path) -> Path:
    output = Path(output)
    if output.suffix:
        return output.with_name(f"{output.stem}.manifest.json")
    return output / "manifest.run.json"


def write_manifest(output: str | Path, manifest: RunManifest) -> Path:
    """wall-clock 필드는 digest에 들어가지 않는다"""
    return write_json(manifest_path(output), {**manifest.model_dump(mode="json"), "digest": manifest.digest()})
