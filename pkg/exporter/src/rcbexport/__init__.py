"""Replay-store exporter: records scripted model probes for offline analysis.

The analysis side never loads a model; it replays stores written here.
This package owns the writing half of that contract: embed images, walk
the scripted probe set against a live backend, truncate the responses to
what the analysis math needs, and commit everything under a manifest.
The two sides share only the on-disk format; neither imports the other.
"""
from .errors import ExportError
from .export import (
    ExportJob,
    export_analysis_requests,
    expected_request_keys,
    script_image_requests,
    validate_store,
    window_indices,
)
from .model import StubCaptioner, build_model
from .store import RequestLine, StoreWriter, top_ids

__all__ = [
    "ExportError",
    "ExportJob",
    "RequestLine",
    "StoreWriter",
    "StubCaptioner",
    "build_model",
    "expected_request_keys",
    "export_analysis_requests",
    "script_image_requests",
    "top_ids",
    "validate_store",
    "window_indices",
]
