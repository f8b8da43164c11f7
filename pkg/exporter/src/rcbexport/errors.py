"""Exporter failure modes."""


class ExportError(Exception):
    """A job, backend or store operation that cannot proceed."""
