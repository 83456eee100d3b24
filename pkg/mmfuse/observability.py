"""
Observability - Prometheus metrics per training run and OpenTelemetry traces
"""
import logging
import os
from functools import wraps
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from .config import OTEL_ENABLED

logger = logging.getLogger(__name__)

# OpenTelemetry setup (optional)
tracer = None
if OTEL_ENABLED:
    try:
        from opentelemetry import trace
        from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter
        from opentelemetry.sdk.resources import Resource
        from opentelemetry.sdk.trace import TracerProvider
        from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter

        resource = Resource.create({"service.name": "mmfuse"})
        provider = TracerProvider(resource=resource)

        # Configure exporter (OTLP or Console)
        otlp_endpoint = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT")
        exporter = OTLPSpanExporter(endpoint=otlp_endpoint) if otlp_endpoint else ConsoleSpanExporter()

        provider.add_span_processor(BatchSpanProcessor(exporter))
        trace.set_tracer_provider(provider)
        tracer = trace.get_tracer(__name__)
    except ImportError:
        logger.warning("OTEL_ENABLED is set but opentelemetry is not installed; tracing disabled")


class MetricsCollector:
    """Prometheus metrics of one run, kept in their own registry so runs never share counters"""

    def __init__(self) -> None:
        self.registry = CollectorRegistry()
        self.train_steps = Counter(
            'mmfuse_train_steps_total',
            'Optimizer steps taken',
            registry=self.registry,
        )
        self.epoch_loss = Gauge(
            'mmfuse_epoch_loss',
            'Mean BCE loss of the latest epoch',
            ['split'],
            registry=self.registry,
        )
        self.epoch_auroc = Gauge(
            'mmfuse_epoch_auroc',
            'AUROC of the latest epoch',
            ['split'],
            registry=self.registry,
        )
        self.step_duration = Histogram(
            'mmfuse_step_duration_seconds',
            'Forward + backward + update time per step',
            registry=self.registry,
        )
        self.nonfinite_aborts = Counter(
            'mmfuse_nonfinite_aborts_total',
            'Runs aborted because the loss became NaN or infinite',
            registry=self.registry,
        )

    def record_step(self, duration: float) -> None:
        self.train_steps.inc()
        self.step_duration.observe(duration)

    def record_epoch(self, split: str, loss: float, auroc: float | None) -> None:
        self.epoch_loss.labels(split=split).set(loss)
        if auroc is not None:
            self.epoch_auroc.labels(split=split).set(auroc)

    def record_nonfinite(self) -> None:
        self.nonfinite_aborts.inc()

    def write_metrics(self, path: str | Path) -> None:
        """Dump the registry in the text exposition format"""
        write_to_textfile(str(path), self.registry)


def trace_operation(operation_name: str):
    """Decorator to trace operations with OpenTelemetry"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            if tracer is None:
                return func(*args, **kwargs)
            with tracer.start_as_current_span(operation_name) as span:
                try:
                    result = func(*args, **kwargs)
                    span.set_attribute("success", True)
                    return result
                except Exception as e:
                    span.set_attribute("success", False)
                    span.set_attribute("error", str(e))
                    raise
        return wrapper
    return decorator
