"""Markdown table parsing, canonicalization, and data-point counting.

Tables are the unit of work for the whole harness: every pipeline run,
benchmark instance, and scoring formula is anchored on a parsed grid and
its count of key data points.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

logger = logging.getLogger(__name__)


class TableError(ValueError):
    pass


class MalformedTable(TableError):
    """Pipe-structured text that is not a valid table (no separator row, empty, ...)."""


class NotATable(TableError):
    """Input contains no pipe-structured lines at all."""


# Leading currency symbols stripped once before numeric parsing.
_CURRENCY = "$€£¥"

# Plain integers/decimals, optionally with 1,234-style thousands separators.
_NUMERIC_RE = re.compile(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[+-]?\.\d+")

_SEPARATOR_CELL_RE = re.compile(r":?-+:?")


@dataclass(frozen=True)
class Cell:
    """A canonicalized table cell.

    ``canonical`` is the trimmed, space-collapsed text; ``key`` the casefolded
    comparison copy; ``numeric_value`` is set iff the content parses as a
    finite decimal after stripping one leading currency symbol, one trailing
    percent sign, and thousands separators.
    """

    raw: str
    canonical: str
    key: str
    numeric_value: Decimal | None

    def equivalent(self, other: "Cell") -> bool:
        """Numeric cells compare numerically, text cells by comparison key."""
        if self.numeric_value is not None and other.numeric_value is not None:
            return self.numeric_value == other.numeric_value
        if self.numeric_value is None and other.numeric_value is None:
            return self.key == other.key
        return False


@dataclass
class TableGrid:
    header: list[str]
    body: list[list[str]]
    column_count: int
    warnings: list[str] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.column_count < 1:
            raise MalformedTable("column_count must be >= 1")
        if len(self.header) != self.column_count:
            raise MalformedTable("header width does not match column_count")
        for i, row in enumerate(self.body):
            if len(row) != self.column_count:
                raise MalformedTable(f"body row {i} width does not match column_count")


@dataclass
class TableInstance:
    id: str
    topic: str
    grid: TableGrid
    source_markdown: str
    n_total: int
    reference_image: str | None = None

    @classmethod
    def from_markdown(
        cls,
        instance_id: str,
        topic: str,
        markdown: str,
        reference_image: str | None = None,
    ) -> "TableInstance":
        if not instance_id:
            raise ValueError("instance id must be non-empty")
        grid = parse_markdown_table(markdown)
        return cls(
            id=instance_id,
            topic=topic,
            grid=grid,
            source_markdown=markdown,
            n_total=count_data_points(grid),
            reference_image=reference_image,
        )


def canonicalize_cell(raw: str) -> Cell:
    """Trim, collapse internal space runs, and parse a numeric value if any."""
    canonical = re.sub(r"\s+", " ", raw.strip())
    key = canonical.casefold()
    return Cell(raw=raw, canonical=canonical, key=key, numeric_value=_parse_numeric(canonical))


def _parse_numeric(text: str) -> Decimal | None:
    s = text
    if s and s[0] in _CURRENCY:
        s = s[1:].strip()
    if s.endswith("%"):
        s = s[:-1].strip()
    if not _NUMERIC_RE.fullmatch(s):
        return None
    try:
        value = Decimal(s.replace(",", ""))
    except InvalidOperation:
        return None
    if not value.is_finite():
        return None
    return value


def _split_row(line: str) -> list[str]:
    stripped = line.strip()
    if stripped.startswith("|"):
        stripped = stripped[1:]
    if stripped.endswith("|"):
        stripped = stripped[:-1]
    return [cell.strip() for cell in stripped.split("|")]


def _is_separator_row(cells: list[str]) -> bool:
    return len(cells) >= 1 and all(_SEPARATOR_CELL_RE.fullmatch(c) for c in cells)


def parse_markdown_table(text: str) -> TableGrid:
    """Parse a pipe-delimited markdown table into a :class:`TableGrid`.

    Leading/trailing pipes are optional and cells are trimmed. Ragged body
    rows are repaired: short rows are right-padded with empty cells, long
    rows truncated, and a warning is recorded on the grid either way.
    """
    if not text or not text.strip():
        raise MalformedTable("empty input")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    pipe_lines = [ln for ln in lines if "|" in ln]
    if not pipe_lines:
        raise NotATable("no pipe-structured lines")
    if len(pipe_lines) < 2:
        raise MalformedTable("missing separator row")

    header = _split_row(pipe_lines[0])
    separator = _split_row(pipe_lines[1])
    if not _is_separator_row(separator):
        raise MalformedTable("second row is not a dash separator")
    if len(header) < 1:
        raise MalformedTable("header has no cells")

    column_count = len(header)
    warnings: list[str] = []
    body: list[list[str]] = []
    for idx, line in enumerate(pipe_lines[2:], start=1):
        row = _split_row(line)
        if len(row) < column_count:
            warnings.append(f"body row {idx} padded from {len(row)} to {column_count} cells")
            row = row + [""] * (column_count - len(row))
        elif len(row) > column_count:
            warnings.append(f"body row {idx} truncated from {len(row)} to {column_count} cells")
            row = row[:column_count]
        body.append(row)

    for message in warnings:
        logger.warning("table repair: %s", message)
    return TableGrid(header=header, body=body, column_count=column_count, warnings=warnings)


def serialize_markdown(grid: TableGrid) -> str:
    """Render the canonical form: leading/trailing pipes, single-space padding,
    a three-dash separator per column. Deterministic byte-for-byte."""
    lines = [_render_row(grid.header), _render_row(["---"] * grid.column_count)]
    lines.extend(_render_row(row) for row in grid.body)
    return "\n".join(lines)


def _render_row(cells: list[str]) -> str:
    return "| " + " | ".join(cells) + " |"


def count_data_points(grid: TableGrid) -> int:
    """Count body cells with numeric content; fall back to non-empty cells
    for purely categorical tables."""
    numeric = 0
    non_empty = 0
    for row in grid.body:
        for raw in row:
            cell = canonicalize_cell(raw)
            if cell.canonical:
                non_empty += 1
            if cell.numeric_value is not None:
                numeric += 1
    return numeric if numeric > 0 else non_empty


def grid_fingerprint(grid: TableGrid) -> str:
    """Content digest of the canonical serialization (used for dedup/identity)."""
    return hashlib.sha256(serialize_markdown(grid).encode("utf-8")).hexdigest()
