import inspect
from pathlib import Path
import traceback
from typing import Any, Dict

from traceloggerx import set_logger

from .config import settings

_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class Logger:
    """프로세스 단일 로거. bind()로 붙인 실행 컨텍스트(command, config digest)가 모든 레코드에 실린다"""

    _instance = None
    _base_logger = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Logger, cls).__new__(cls)
            cls._instance._context = {}
        return cls._instance

    def __init__(self):
        if self._base_logger is None:
            self._setup_logger()

    def _setup_logger(self):
        Path(settings.LOG_DIR).mkdir(parents=True, exist_ok=True)
        level = settings.LOG_LEVEL.upper()
        self._base_logger = set_logger(
            "vit-circuits",
            level=level if level in _LEVELS else "INFO",
            extra={"tool": settings.APP_NAME, "version": settings.APP_VERSION},
        )

    def bind(self, **context: Any):
        """이후 레코드에 붙일 실행 컨텍스트 (None 값은 제거)"""
        for key, value in context.items():
            if value is None:
                self._context.pop(key, None)
            else:
                self._context[key] = value

    @property
    def context(self) -> Dict[str, Any]:
        return dict(self._context)

    @staticmethod
    def _caller() -> str:
        """logger 모듈 바깥의 첫 프레임 -> 'module:function:line'"""
        frame = inspect.currentframe()
        try:
            while frame is not None and frame.f_code.co_filename == __file__:
                frame = frame.f_back
            if frame is None:
                return "unknown:unknown:0"
            return f"{Path(frame.f_code.co_filename).stem}:{frame.f_code.co_name}:{frame.f_lineno}"
        finally:
            del frame

    def _log(self, level: str, message: str, **kwargs):
        extra = {**self._context, **kwargs}
        if level == "error" and "traceback" not in extra:
            extra["traceback"] = [line.strip() for line in traceback.format_stack()[-4:-2] if line.strip()]
            extra.setdefault("error_type", "unknown")
        getattr(self._base_logger, level)(f"[{self._caller()}] {message}", extra=extra)

    def debug(self, message: str, **kwargs):
        self._log("debug", message, **kwargs)

    def info(self, message: str, **kwargs):
        self._log("info", message, **kwargs)

    def warning(self, message: str, **kwargs):
        self._log("warning", message, **kwargs)

    def error(self, message: str, **kwargs):
        self._log("error", message, **kwargs)

    def performance(self, operation: str, duration: float, message: str, **kwargs):
        self.info(message, operation=operation, duration=duration, **kwargs)

    def experiment_event(self, event_type: str, message: str, **kwargs):
        """실험 마일스톤 (circuit 발견, sweep 완료 등)"""
        self.info(message, event_type=event_type, **kwargs)


logger = Logger()
