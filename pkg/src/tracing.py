"""Optional OTLP tracing of pipeline stages and backend requests.

Tracing is off unless :func:`setup_tracing` gets an endpoint; :func:`span` is then a
no-op context manager.
"""

import logging
from contextlib import contextmanager
from typing import Any, Generator, Optional

from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor
from opentelemetry.trace import Span, Tracer

logger = logging.getLogger(__name__)

SERVICE_NAME = "gridloc"
_OTLP_SPAN_EXPORTER_TIMEOUT = 1

_provider: Optional[TracerProvider] = None
_tracer: Optional[Tracer] = None


def setup_tracing(endpoint: Optional[str], service_name: str = SERVICE_NAME) -> bool:
    """Export spans to an OTLP/HTTP endpoint; returns whether tracing is on."""
    global _provider, _tracer
    if not endpoint:
        logger.debug("No tracing endpoint configured, tracing is off")
        return False
    resource = Resource.create(attributes={"service.name": service_name})
    provider = TracerProvider(resource=resource)
    exporter = OTLPSpanExporter(endpoint=endpoint, timeout=_OTLP_SPAN_EXPORTER_TIMEOUT)
    provider.add_span_processor(BatchSpanProcessor(exporter))
    _provider = provider
    _tracer = provider.get_tracer(service_name)
    logger.info(f"Exporting traces to '{endpoint}'")
    return True


@contextmanager
def span(name: str, **attributes: Any) -> Generator[Optional[Span], Any, Any]:
    """Context to create a span if there is a tracer, otherwise do nothing."""
    if _tracer is None:
        yield None
        return
    attrs = {
        k: v if isinstance(v, (int, float, bool)) else str(v) for k, v in attributes.items()
    }
    with _tracer.start_as_current_span(name, attributes=attrs) as current:
        yield current


def shutdown_tracing() -> None:
    """Flush buffered spans without blocking for long, then stop exporting."""
    global _provider, _tracer
    if _provider is None:
        return
    if not _provider.force_flush(timeout_millis=1000):
        logger.warning("Some spans could not be flushed before shutdown")
    _provider.shutdown()
    _provider = None
    _tracer = None
