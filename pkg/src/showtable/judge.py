"""TableVisBench scoring: drive the auditor model with the four dimension
prompts, parse its structured error reports, and compute the deterministic
dimension scores and their aggregate.

Dimension scale is 0-100 (error-count ratios scaled); aesthetic quality is
0-10. The aggregate is (DA + TR + RR + AA + 10*AQ) / 5, dropping to a
four-term mean when no additional-information sub-metric applied.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

from . import backends
from .backends import BackendConfig, ChatMessage, ImageBlob
from .runstore import RunStore, safe_segment
from .tables import TableInstance, serialize_markdown
from .templating import TemplateSet

logger = logging.getLogger(__name__)

DIMENSIONS = ("DA", "TR", "RR", "AA")

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL | re.IGNORECASE)

REASK_PROMPT = (
    "Your previous reply could not be parsed. Reply again with only the required "
    "JSON object inside a ```json fenced block and nothing else."
)


class JudgeProtocolError(Exception):
    """The auditor produced no parseable report, even after one re-ask."""


@dataclass
class DaReport:
    n_total: int
    n_error: int


@dataclass
class TrReport:
    l_total: int
    l_error: int


@dataclass
class RrReport:
    n_total: int
    n_error: int


@dataclass
class AaReport:
    label_error_pct: float | None = None
    misaligned: tuple[int, int] | None = None  # (n_misaligned, n_total)
    mark_inappropriate_pct: float | None = None


@dataclass
class DimensionScores:
    da: float
    tr: float
    rr: float
    aa: float | None
    aq: float
    score: float

    def to_dict(self) -> dict:
        return {"da": self.da, "tr": self.tr, "rr": self.rr, "aa": self.aa, "aq": self.aq, "score": self.score}

    @classmethod
    def from_dict(cls, doc: dict) -> "DimensionScores":
        return cls(da=doc["da"], tr=doc["tr"], rr=doc["rr"], aa=doc.get("aa"), aq=doc["aq"], score=doc["score"])


# -- scoring formulas ----------------------------------------------------------


def score_da(r: DaReport) -> float:
    return 100.0 * (r.n_total - r.n_error) / r.n_total


def score_tr(r: TrReport) -> float:
    if r.l_total == 0:
        return 0.0
    return 100.0 * (r.l_total - r.l_error) / r.l_total


def score_rr(r: RrReport) -> float:
    return 100.0 * (r.n_total - r.n_error) / r.n_total


def score_aa(r: AaReport) -> float | None:
    """Mean of the sub-metrics that applied; None when none did."""
    parts: list[float] = []
    if r.label_error_pct is not None:
        parts.append(1.0 - r.label_error_pct)
    if r.misaligned is not None:
        n_mis, n_total = r.misaligned
        parts.append((n_total - n_mis) / n_total)
    if r.mark_inappropriate_pct is not None:
        parts.append(1.0 - r.mark_inappropriate_pct)
    if not parts:
        return None
    return 100.0 * sum(parts) / len(parts)


def aggregate_score(da: float, tr: float, rr: float, aq: float, aa: float | None = None) -> float:
    """Final score; AA contributes only when it was measurable."""
    if aa is None:
        return (da + tr + rr + 10.0 * aq) / 4.0
    return (da + tr + rr + aa + 10.0 * aq) / 5.0


# -- report parsing --------------------------------------------------------------


def extract_json_object(reply: str) -> dict | None:
    """The last parseable fenced JSON object, or the whole reply if it is one."""
    candidates = [m.group(1) for m in _FENCE_RE.finditer(reply)]
    stripped = reply.strip()
    if stripped.startswith("{") and stripped.endswith("}"):
        candidates.append(stripped)
    for text in reversed(candidates):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _clamped_count(value: object, minimum: int, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise JudgeProtocolError(f"{name} must be an integer, got {value!r}")
    count = int(value)
    if count < minimum:
        logger.warning("judge reported %s=%d; clamped to %d", name, count, minimum)
        count = minimum
    return count


def _error_list(value: object, name: str) -> list[str]:
    if not isinstance(value, list):
        raise JudgeProtocolError(f"{name} must be a list")
    return [str(item) for item in value]


def _clamped_fraction(value: object, name: str) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise JudgeProtocolError(f"{name} must be a number or null")
    fraction = float(value)
    if not 0.0 <= fraction <= 1.0:
        logger.warning("judge reported %s=%s outside [0,1]; clamped", name, fraction)
        fraction = min(1.0, max(0.0, fraction))
    return fraction


def parse_da_report(obj: dict) -> DaReport:
    n_total = _clamped_count(obj.get("total_points"), 1, "total_points")
    errors = _error_list(obj.get("errors"), "errors")
    n_error = len(errors)
    if n_error > n_total:
        logger.warning("judge reported %d errors over %d points; clamped", n_error, n_total)
        n_error = n_total
    return DaReport(n_total=n_total, n_error=n_error)


def parse_tr_report(obj: dict) -> TrReport:
    l_total = _clamped_count(obj.get("total_chars"), 0, "total_chars")
    l_error = _clamped_count(obj.get("error_chars"), 0, "error_chars")
    if l_error > l_total:
        logger.warning("judge reported error_chars=%d over total_chars=%d; clamped", l_error, l_total)
        l_error = l_total
    return TrReport(l_total=l_total, l_error=l_error)


def parse_rr_report(obj: dict) -> RrReport:
    n_total = _clamped_count(obj.get("total_points"), 1, "total_points")
    violations = _error_list(obj.get("violations"), "violations")
    n_error = min(len(violations), n_total)
    return RrReport(n_total=n_total, n_error=n_error)


def parse_aa_report(obj: dict) -> AaReport:
    label = _clamped_fraction(obj.get("label_error_pct"), "label_error_pct")
    mark = _clamped_fraction(obj.get("inappropriate_mark_pct"), "inappropriate_mark_pct")
    misaligned: tuple[int, int] | None = None
    if obj.get("total_points") is not None and obj.get("misaligned_points") is not None:
        n_total = _clamped_count(obj.get("total_points"), 1, "total_points")
        n_mis = _clamped_count(obj.get("misaligned_points"), 0, "misaligned_points")
        if n_mis > n_total:
            logger.warning("judge reported %d misaligned over %d points; clamped", n_mis, n_total)
            n_mis = n_total
        misaligned = (n_mis, n_total)
    return AaReport(label_error_pct=label, misaligned=misaligned, mark_inappropriate_pct=mark)


_PARSERS = {
    "DA": parse_da_report,
    "TR": parse_tr_report,
    "RR": parse_rr_report,
    "AA": parse_aa_report,
}

_TEMPLATE_NAMES = {"DA": "audit_da", "TR": "audit_tr", "RR": "audit_rr", "AA": "audit_aa"}


def audit_dimension(
    dim: str,
    table: TableInstance,
    image: ImageBlob,
    judge_backend: BackendConfig,
    templates: TemplateSet | None = None,
) -> tuple[DaReport | TrReport | RrReport | AaReport, str]:
    """Run one dimension audit; returns (parsed report, raw reply).

    One re-ask retry on an unparseable reply, then JudgeProtocolError.
    """
    if dim not in _PARSERS:
        raise ValueError(f"unknown dimension: {dim}")
    templates = templates or TemplateSet()
    prompt = templates.render(
        _TEMPLATE_NAMES[dim],
        TABLE_MARKDOWN=serialize_markdown(table.grid),
        N_TOTAL=table.n_total,
    )
    messages = [ChatMessage.with_images("user", prompt, [image])]
    reply = backends.chat_complete(judge_backend, messages)
    report, problem = _try_parse(dim, reply)
    if report is None:
        logger.warning("%s audit reply unparseable (%s); re-asking once", dim, problem)
        messages = messages + [
            ChatMessage.text("assistant", reply),
            ChatMessage.text("user", REASK_PROMPT),
        ]
        reply = backends.chat_complete(judge_backend, messages)
        report, problem = _try_parse(dim, reply)
    if report is None:
        raise JudgeProtocolError(f"{dim} audit reply unusable after re-ask: {problem}")
    return report, reply


def _try_parse(dim: str, reply: str):
    obj = extract_json_object(reply)
    if obj is None:
        return None, "no parseable fenced JSON object"
    try:
        return _PARSERS[dim](obj), None
    except JudgeProtocolError as exc:
        return None, str(exc)


def evaluate_instance(
    table: TableInstance,
    image: ImageBlob,
    judge_backend: BackendConfig,
    aesthetic_backend: BackendConfig,
    templates: TemplateSet | None = None,
    store: RunStore | None = None,
) -> DimensionScores:
    """Full five-dimension evaluation of one image against its table.

    DA/TR/RR/AQ failures fail the instance; an AA failure only drops that
    dimension from the aggregate. Raw auditor replies are persisted next to
    the scores when a store is given.
    """
    audits: dict[str, dict] = {}

    da_report, da_raw = audit_dimension("DA", table, image, judge_backend, templates)
    audits["da"] = {"raw_reply": da_raw, "report": vars(da_report)}
    tr_report, tr_raw = audit_dimension("TR", table, image, judge_backend, templates)
    audits["tr"] = {"raw_reply": tr_raw, "report": vars(tr_report)}
    rr_report, rr_raw = audit_dimension("RR", table, image, judge_backend, templates)
    audits["rr"] = {"raw_reply": rr_raw, "report": vars(rr_report)}

    aa_value: float | None = None
    try:
        aa_report, aa_raw = audit_dimension("AA", table, image, judge_backend, templates)
        audits["aa"] = {
            "raw_reply": aa_raw,
            "report": {
                "label_error_pct": aa_report.label_error_pct,
                "misaligned": list(aa_report.misaligned) if aa_report.misaligned else None,
                "mark_inappropriate_pct": aa_report.mark_inappropriate_pct,
            },
        }
        aa_value = score_aa(aa_report)
    except JudgeProtocolError as exc:
        logger.warning("AA audit failed (%s); dimension excluded from aggregate", exc)
        audits["aa"] = {"raw_reply": None, "report": None, "failed": str(exc)}

    aq = backends.aesthetic_score(aesthetic_backend, image)

    da, tr, rr = score_da(da_report), score_tr(tr_report), score_rr(rr_report)
    scores = DimensionScores(
        da=da, tr=tr, rr=rr, aa=aa_value, aq=aq,
        score=aggregate_score(da, tr, rr, aq, aa_value),
    )
    if store is not None:
        prefix = f"runs/{safe_segment(table.id)}"
        for dim, doc in audits.items():
            store.write_document(f"{prefix}/audits/{dim}.json", {"dimension": dim.upper(), **doc})
        store.write_document(
            f"{prefix}/scores.json",
            {"instance_id": table.id, "evaluated_image": image.sha256, **scores.to_dict()},
        )
    return scores
