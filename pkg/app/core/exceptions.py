from typing import Any, Dict


class CustomError(Exception):
    """애플리케이션 에러 클래스 - 단일 클래스로 모든 에러 처리"""

    # 에러 코드, 기본 메시지, 프로세스 종료 코드를 한번에 정의
    ERRORS = {
        # 공통 에러 (300xxx)
        "INTERNAL_ERROR": ("300001", "Unexpected internal error.", 1),

        # 사용법/설정 에러 (301xxx) - exit 2
        "CONFIG_ERROR": ("301001", "Invalid configuration.", 2),
        "USAGE_ERROR": ("301002", "Inconsistent command-line flags.", 2),
        "ARGUMENT_ERROR": ("301003", "Invalid argument.", 2),

        # 수치 에러 (302xxx) - exit 3
        "NUMERIC_ERROR": ("302001", "Non-finite value encountered.", 3),

        # 아티팩트 에러 (303xxx) - exit 4
        "FORMAT_ERROR": ("303001", "Malformed artifact file.", 4),
        "ARTIFACT_MISMATCH": ("303002", "Artifact does not match the model or graph.", 4),
    }

    def __init__(self, error_key: str, custom_message: str = None, **format_args):
        if error_key not in self.ERRORS:
            error_key = "INTERNAL_ERROR"

        self.error_key = error_key
        self.error_code, default_message, self.exit_status = self.ERRORS[error_key]

        # 커스텀 메시지가 있으면 사용, 없으면 기본 메시지 사용
        if custom_message:
            self.message = custom_message.format(**format_args) if format_args else custom_message
        else:
            self.message = default_message.format(**format_args) if format_args else default_message

        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """딕셔너리로 변환 (CLI JSON 출력용)"""
        return {
            "status": "fail",
            "error_key": self.error_key,
            "error_code": self.error_code,
            "message": self.message
        }
