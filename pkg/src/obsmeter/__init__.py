"""Lightweight measurement instrumentation: in-app measurement points,
streaming filters, a text wire protocol and a collection server."""

from .measurement import ClientIdentity, InjectOutcome, MeasurementLibrary, MetricType, MPSchema, Sample

__all__ = ["ClientIdentity", "InjectOutcome", "MeasurementLibrary", "MetricType", "MPSchema", "Sample"]
__version__ = "0.1.0"
