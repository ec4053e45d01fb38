"""
Optional OpenTelemetry tracing.

Spans are opened around long-running work (dataset generation, training,
evaluation, CLI commands). When the SDK is not installed every span is a
no-op.
"""

import logging
from contextlib import contextmanager
from typing import Any, Iterator, Optional

logger = logging.getLogger(__name__)

try:
    from opentelemetry import trace
    from opentelemetry.sdk.trace import TracerProvider
    OPENTELEMETRY_AVAILABLE = True
except (ImportError, TypeError) as e:
    # TypeError shows up with mismatched typing_extensions pins
    OPENTELEMETRY_AVAILABLE = False
    logger.debug("OpenTelemetry not available: %s", e)

_tracer = None


def get_tracer() -> Optional[Any]:
    """Install a tracer provider once and hand back the package tracer"""
    global _tracer
    if not OPENTELEMETRY_AVAILABLE:
        return None
    if _tracer is None:
        if not isinstance(trace.get_tracer_provider(), TracerProvider):
            trace.set_tracer_provider(TracerProvider())
        _tracer = trace.get_tracer("cabin2tire")
    return _tracer


def _attribute_value(value: Any) -> Any:
    if isinstance(value, (bool, int, float, str)):
        return value
    return str(value)


@contextmanager
def span(name: str, **attributes: Any) -> Iterator[Optional[Any]]:
    tracer = get_tracer()
    if tracer is None:
        yield None
        return
    with tracer.start_as_current_span(name) as current:
        for key, value in attributes.items():
            current.set_attribute(key, _attribute_value(value))
        yield current
