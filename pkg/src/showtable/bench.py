"""Benchmark running: dataset loading, resumable concurrent execution of
pipeline + evaluation per instance, and report aggregation/rendering."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backends import BackendConfig, ImageBlob
from .judge import DimensionScores, aggregate_score, evaluate_instance
from .pipeline import PipelineConfig, run_pipeline
from .runstore import RunStore, safe_segment
from .tables import TableError, TableInstance, count_data_points

logger = logging.getLogger(__name__)

HISTOGRAM_EDGES = (1, 5, 10, 15, 20, 25, 30, 35, 40)
OVERFLOW_BUCKET = "[40+]"

DIMENSION_KEYS = ("da", "tr", "rr", "aa", "aq")


class DatasetError(Exception):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class BenchDataset:
    instances: list[TableInstance]
    source_path: str


@dataclass
class BenchReport:
    rows: list[dict]  # {"id", "da", "tr", "rr", "aa", "aq", "score"}
    failures: list[dict]  # {"id", "error"}
    dimension_means: dict
    mean_score: float | None
    score_of_dimension_means: float | None
    histogram: dict

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "failures": self.failures,
            "dimension_means": self.dimension_means,
            "mean_score": self.mean_score,
            "score_of_dimension_means": self.score_of_dimension_means,
            "histogram": self.histogram,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchReport":
        return cls(
            rows=doc["rows"],
            failures=doc["failures"],
            dimension_means=doc["dimension_means"],
            mean_score=doc["mean_score"],
            score_of_dimension_means=doc["score_of_dimension_means"],
            histogram=doc["histogram"],
        )


def load_dataset(path: str | Path) -> BenchDataset:
    """Parse a line-delimited JSON dataset of table instances.

    Line schema: {"id", "topic", "table_markdown", "reference_image_path"?}.
    Duplicate ids and unparseable tables are rejected with the line number.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    instances: list[TableInstance] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc}", lineno) from exc
        if not isinstance(doc, dict) or not doc.get("id") or "table_markdown" not in doc:
            raise DatasetError("each line needs at least 'id' and 'table_markdown'", lineno)
        instance_id = str(doc["id"])
        if instance_id in seen:
            raise DatasetError(f"duplicate id {instance_id!r}", lineno)
        seen.add(instance_id)
        try:
            instance = TableInstance.from_markdown(
                instance_id,
                str(doc.get("topic", "")),
                doc["table_markdown"],
                reference_image=doc.get("reference_image_path"),
            )
        except TableError as exc:
            raise DatasetError(f"table for id {instance_id!r} does not parse: {exc}", lineno) from exc
        for warning in instance.grid.warnings:
            logger.warning("dataset %s id %s: %s", path.name, instance_id, warning)
        instances.append(instance)
    return BenchDataset(instances=instances, source_path=str(path))


def bucket_label(count: int) -> str:
    if count >= HISTOGRAM_EDGES[-1]:
        return OVERFLOW_BUCKET
    for lo, hi in zip(HISTOGRAM_EDGES, HISTOGRAM_EDGES[1:]):
        if count < hi:
            return f"[{lo}-{hi})"
    return OVERFLOW_BUCKET


def histogram_buckets() -> list[str]:
    labels = [f"[{lo}-{hi})" for lo, hi in zip(HISTOGRAM_EDGES, HISTOGRAM_EDGES[1:])]
    return labels + [OVERFLOW_BUCKET]


def stats(dataset: BenchDataset) -> dict:
    """Histogram of key-data-point counts over the dataset."""
    counts = {label: 0 for label in histogram_buckets()}
    for instance in dataset.instances:
        counts[bucket_label(count_data_points(instance.grid))] += 1
    return counts


def run_bench(
    dataset: BenchDataset,
    pipeline_cfg: PipelineConfig,
    judge_cfg: BackendConfig,
    aesthetic_cfg: BackendConfig,
    store: RunStore,
    concurrency: int = 4,
    resume: bool = False,
) -> BenchReport:
    """Run pipeline + evaluation for every instance, bounded-parallel.

    With ``resume``, instances whose scores document is already complete are
    skipped entirely (no backend calls). Per-instance failures are recorded,
    never abort the batch.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    rows: dict[str, dict] = {}
    failures: dict[str, str] = {}

    def _one(instance: TableInstance) -> None:
        key = f"runs/{safe_segment(instance.id)}/scores.json"
        if resume:
            existing = store.read_document(key)
            if existing is not None and "score" in existing:
                rows[instance.id] = _row_from_scores(instance.id, DimensionScores.from_dict(existing))
                return
        try:
            record = run_pipeline(instance, pipeline_cfg, store)
            final_blob = ImageBlob.from_bytes(store.get_blob(record.final_image))
            scores = evaluate_instance(
                instance, final_blob, judge_cfg, aesthetic_cfg,
                templates=pipeline_cfg.templates, store=store,
            )
            rows[instance.id] = _row_from_scores(instance.id, scores)
        except Exception as exc:  # per-instance isolation
            logger.error("instance %s failed: %s", instance.id, exc)
            failures[instance.id] = f"{type(exc).__name__}: {exc}"

    if concurrency == 1:
        for instance in dataset.instances:
            _one(instance)
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            list(pool.map(_one, dataset.instances))

    ordered_rows = [rows[i.id] for i in dataset.instances if i.id in rows]
    ordered_failures = [
        {"id": i.id, "error": failures[i.id]} for i in dataset.instances if i.id in failures
    ]
    report = BenchReport(
        rows=ordered_rows,
        failures=ordered_failures,
        dimension_means=_dimension_means(ordered_rows),
        mean_score=_mean([r["score"] for r in ordered_rows]),
        score_of_dimension_means=None,
        histogram=stats(dataset),
    )
    report.score_of_dimension_means = _score_of_means(report.dimension_means)
    return report


def _row_from_scores(instance_id: str, scores: DimensionScores) -> dict:
    return {"id": instance_id, **scores.to_dict()}


def _mean(values: list) -> float | None:
    cleaned = [v for v in values if v is not None]
    if not cleaned:
        return None
    return sum(cleaned) / len(cleaned)


def _dimension_means(rows: list[dict]) -> dict:
    return {key: _mean([row[key] for row in rows]) for key in DIMENSION_KEYS}


def _score_of_means(means: dict) -> float | None:
    if any(means.get(k) is None for k in ("da", "tr", "rr", "aq")):
        return None
    return aggregate_score(means["da"], means["tr"], means["rr"], means["aq"], means.get("aa"))


def emit_report(report: BenchReport, format: str = "markdown") -> str:
    """Render the report: markdown at one decimal, JSON at full precision."""
    if format == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if format != "markdown":
        raise ValueError(f"unknown report format: {format}")
    header = "| Method | DA | TR | RR | AA | AQ | Score |"
    rule = "| --- | --- | --- | --- | --- | --- | --- |"
    lines = [header, rule]
    for row in report.rows:
        lines.append(_markdown_row(row["id"], row))
    if report.rows:
        lines.append(_markdown_row("mean", {**report.dimension_means, "score": report.mean_score}))
    return "\n".join(lines) + "\n"


def _markdown_row(label: str, values: dict) -> str:
    cells = [label]
    for key in ("da", "tr", "rr", "aa", "aq", "score"):
        value = values.get(key)
        cells.append("-" if value is None else f"{value:.1f}")
    return "| " + " | ".join(cells) + " |"
