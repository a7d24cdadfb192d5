"""시간 관련 유틸리티 함수들"""

from datetime import datetime

import pytz


def now_utc() -> datetime:
    """현재 UTC 시간 반환"""
    return datetime.now(pytz.UTC)


def now_utc_iso() -> str:
    """현재 UTC 시간을 ISO 형식으로 반환"""
    return now_utc().isoformat()
