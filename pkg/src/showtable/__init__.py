"""Self-correcting table-to-infographic pipeline orchestrator and the
TableVisBench five-dimension evaluation harness, with pluggable model
backends, deterministic mocks, training-data construction pipelines, and
pure closed-form implementations of the training arithmetic."""

__version__ = "0.1.0"

from .tables import (  # noqa: F401
    Cell,
    MalformedTable,
    NotATable,
    TableGrid,
    TableInstance,
    canonicalize_cell,
    count_data_points,
    parse_markdown_table,
    serialize_markdown,
)
