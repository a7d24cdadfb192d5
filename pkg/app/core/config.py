import os

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process settings - 실험 파라미터는 YAML config, 실행 환경은 여기서 관리"""

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")  # DEBUG, INFO, WARNING, ERROR
    LOG_DIR: str = os.getenv("LOG_DIR", "logs")

    # Application
    APP_NAME: str = os.getenv("APP_NAME", "ViT Circuit Discovery")
    APP_VERSION: str = os.getenv("APP_VERSION", "1.0.0")

    # Compute
    TORCH_NUM_THREADS: int = int(os.getenv("TORCH_NUM_THREADS", "0"))  # 0이면 torch 기본값 사용
    SHOW_PROGRESS: bool = os.getenv("SHOW_PROGRESS", "false").lower() == "true"

    # Prometheus exporter (0이면 비활성화)
    METRICS_PORT: int = int(os.getenv("METRICS_PORT", "0"))

    class Config:
        # 우선순위: 1. 환경변수 2. .env 파일 3. 기본값
        env_file = ".env"
        case_sensitive = False
        extra = "ignore"


settings = Settings()
