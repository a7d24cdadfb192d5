"""
실험 모니터링
- 핵심 카운터만 추적 (patched forward 수, pruning 결정, 커맨드 소요시간)
- Prometheus 기반, METRICS_PORT 설정 시 HTTP exporter 노출
"""
from functools import wraps
import os
import time

from prometheus_client import Counter, Gauge, Histogram, start_http_server
import psutil

from .logger import logger

# ===== 핵심 Prometheus 메트릭 정의 =====

patched_forwards_total = Counter(
    'patched_forwards_total',
    'Total number of circuit-restricted forward passes',
    ['mode']
)

discovery_decisions_total = Counter(
    'discovery_decisions_total',
    'Total number of per-edge pruning decisions',
    ['method', 'decision']
)

command_duration_seconds = Histogram(
    'command_duration_seconds',
    'CLI command duration in seconds',
    ['command']
)

memory_usage_bytes = Gauge(
    'memory_usage_bytes',
    'Process memory usage in bytes'
)

cpu_usage_percent = Gauge(
    'cpu_usage_percent',
    'Process CPU usage percentage'
)


def track_patched_forward(mode: str, count: int = 1):
    """patched forward 실행 횟수 추적"""
    patched_forwards_total.labels(mode=mode).inc(count)


def track_decision(method: str, decision: str):
    """엣지 pruning 결정 추적"""
    discovery_decisions_total.labels(method=method, decision=decision).inc()


def start_prometheus_server(port: int):
    """Prometheus 메트릭 서버 시작"""
    start_http_server(port)
    logger.info(f"Prometheus metrics server started on port {port}")


def collect_system_metrics():
    """프로세스 메트릭 수집"""
    try:
        process = psutil.Process(os.getpid())
        rss = process.memory_info().rss
        memory_usage_bytes.set(rss)
        cpu = process.cpu_percent(interval=None)
        cpu_usage_percent.set(cpu)
        return {"memory_mb": round(rss / (1024 ** 2), 2), "cpu_percent": cpu}
    except Exception as e:
        logger.warning(f"Error collecting process metrics: {e}")
        return {}


def track_command(command: str):
    """커맨드 소요시간 추적 데코레이터"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                duration = time.perf_counter() - start_time
                command_duration_seconds.labels(command=command).observe(duration)
                logger.performance(command, duration, f"⚡ {command}: {duration:.2f}s",
                                   **collect_system_metrics())
        return wrapper
    return decorator
