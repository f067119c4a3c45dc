import functools
import logging
import os
import time

from opentelemetry import metrics, trace
from opentelemetry.exporter.otlp.proto.http.metric_exporter import OTLPMetricExporter
from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk.metrics import MeterProvider
from opentelemetry.sdk.metrics.export import InMemoryMetricReader, PeriodicExportingMetricReader
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor

logger = logging.getLogger("perpetua.metrics")

_resource = Resource.create({
    "service.name": os.getenv("OTEL_SERVICE_NAME", "perpetua"),
})
_testing = os.getenv("TESTING", "").lower() in ("1", "true")
_endpoint = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT")
if _testing or not _endpoint:
    _reader = InMemoryMetricReader()
else:
    _reader = PeriodicExportingMetricReader(OTLPMetricExporter(), export_interval_millis=60_000)
_provider = MeterProvider(resource=_resource, metric_readers=[_reader])
metrics.set_meter_provider(_provider)

_meter = metrics.get_meter("perpetua")
_tracer = trace.get_tracer("perpetua")

# Experiment metrics
EXPERIMENT_LATENCY = _meter.create_histogram(
    "perpetua.experiment.duration",
    description="Experiment wall time",
    unit="s",
)
EXPERIMENT_COUNT = _meter.create_counter(
    "perpetua.experiment.total",
    description="Experiment runs by status",
)
REPLICATE_COUNT = _meter.create_counter(
    "perpetua.replicates.total",
    description="Replicates simulated",
)

# Verification metrics
CHECK_COUNT = _meter.create_counter(
    "perpetua.check.total",
    description="Verification checks by suite and outcome",
)

# Worker pool size, observed
_active_workers = 0


def _observe_active_workers(options):
    yield metrics.Observation(_active_workers)


ACTIVE_WORKERS_GAUGE = _meter.create_observable_gauge(
    "perpetua.workers.active",
    callbacks=[_observe_active_workers],
    description="Worker processes in the replicate pool",
)


class _WorkerGauge:
    """set/inc/dec over the observable gauge."""

    def set(self, value):
        global _active_workers
        _active_workers = value

    def inc(self, amount=1):
        global _active_workers
        _active_workers += amount

    def dec(self, amount=1):
        global _active_workers
        _active_workers -= amount


ACTIVE_WORKERS = _WorkerGauge()


def track_experiment(experiment_name: str):
    """Decorator that records EXPERIMENT_COUNT and EXPERIMENT_LATENCY for an experiment."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            status = "success"
            with _tracer.start_as_current_span(f"experiment {experiment_name}"):
                try:
                    return func(*args, **kwargs)
                except Exception:
                    status = "error"
                    raise
                finally:
                    duration = time.perf_counter() - start
                    EXPERIMENT_LATENCY.record(duration, {"experiment": experiment_name})
                    EXPERIMENT_COUNT.add(1, {"experiment": experiment_name, "status": status})
        return wrapper
    return decorator


def record_check(suite: str, passed: bool):
    CHECK_COUNT.add(1, {"suite": suite, "outcome": "pass" if passed else "fail"})


def start_metrics():
    if _testing or not _endpoint:
        logger.debug("OTLP export disabled; metrics stay in memory")
        return
    headers = os.getenv("OTEL_EXPORTER_OTLP_HEADERS", "not set")
    logger.info(f"OTLP endpoint: {_endpoint}")
    logger.info(f"OTLP headers configured: {headers != 'not set'}")

    _tracer_provider = TracerProvider(resource=_resource)
    _tracer_provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter()))
    trace.set_tracer_provider(_tracer_provider)

    logger.info(
        "OpenTelemetry metrics and tracing configured (export interval: 60s, "
        f"service: {os.getenv('OTEL_SERVICE_NAME', 'perpetua')})"
    )


def shutdown_metrics():
    _provider.shutdown()
