"""Training-data construction: collection filters, rewriting SFT assembly,
rollout-filtered refinement samples, and two-judge voted preference pairs.

Record formats (all line-delimited JSON, UTF-8):
    SFT:        {"table_markdown", "rationale", "description"}
    refinement: {"initial_image_sha256", "instruction", "table_markdown", "kept", "verdicts"}
    preference: {"prompt", "winner_sha256", "loser_sha256", "source", "votes"}
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import backends
from .backends import BackendConfig, ChatMessage, ImageBlob
from .tables import TableError, TableGrid, TableInstance, canonicalize_cell, parse_markdown_table, serialize_markdown
from .templating import TemplateSet

logger = logging.getLogger(__name__)

MIN_RESOLUTION = 200  # images under 200x200 are discarded

PAIR_SOURCES = ("refined_vs_initial", "strong_vs_weak", "groundtruth_vs_generated")


@dataclass
class SftSample:
    table_markdown: str
    rationale: str
    description: str

    def to_record(self) -> dict:
        return {
            "table_markdown": self.table_markdown,
            "rationale": self.rationale,
            "description": self.description,
        }


@dataclass
class RefinementSample:
    initial_image: str  # blob digest
    instruction: str
    table_markdown: str


@dataclass
class RolloutDecision:
    kept: bool
    verdicts: list[str]  # "BETTER" / "WORSE" per candidate
    reason: str = ""


@dataclass
class JudgeVote:
    judge_id: str
    preferred: str  # first | second | tie


@dataclass
class PreferencePair:
    prompt: str
    winner: str  # blob digest
    loser: str
    source: str
    votes: list[JudgeVote] = field(default_factory=list, compare=False)

    def __post_init__(self) -> None:
        if self.winner == self.loser:
            raise ValueError("winner and loser must differ")
        if self.source not in PAIR_SOURCES:
            raise ValueError(f"unknown pair source: {self.source}")

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "winner_sha256": self.winner,
            "loser_sha256": self.loser,
            "source": self.source,
            "votes": [{"judge_id": v.judge_id, "preferred": v.preferred} for v in self.votes],
        }


# -- collection filters -----------------------------------------------------------


def resolution_filter(width: int, height: int) -> bool:
    """Keep only images at least 200x200 (the 200x200 boundary passes)."""
    if width <= 0 or height <= 0:
        raise ValueError("dimensions must be positive")
    return width >= MIN_RESOLUTION and height >= MIN_RESOLUTION


def consensus_filter(annot_a: str, annot_b: str) -> TableGrid | None:
    """Accept a pair of independent table annotations only when they agree.

    Agreement means identical shape and cell-wise equivalence after
    canonicalization (numeric cells compared numerically, text casefolded).
    Unparseable annotations count as inconsistent.
    """
    try:
        grid_a = parse_markdown_table(annot_a)
        grid_b = parse_markdown_table(annot_b)
    except TableError:
        return None
    if grid_a.column_count != grid_b.column_count or len(grid_a.body) != len(grid_b.body):
        return None
    rows_a = [grid_a.header] + grid_a.body
    rows_b = [grid_b.header] + grid_b.body
    for row_a, row_b in zip(rows_a, rows_b):
        for cell_a, cell_b in zip(row_a, row_b):
            if not canonicalize_cell(cell_a).equivalent(canonicalize_cell(cell_b)):
                return None
    return grid_a


def consensus_filter_with_approval(
    annot_a: str,
    annot_b: str,
    backend_a: BackendConfig,
    backend_b: BackendConfig,
) -> TableGrid | None:
    """Strict consensus plus a cross-approval pass: each judge must approve
    the other's annotation (YES/NO protocol)."""
    grid = consensus_filter(annot_a, annot_b)
    if grid is None:
        return None
    for cfg, other in ((backend_a, annot_b), (backend_b, annot_a)):
        prompt = (
            "Is the following markdown table a faithful annotation you would approve?\n\n"
            + other
            + "\n\nReply with exactly one word as the final token of your answer: YES or NO."
        )
        if _final_token(backends.chat_complete(cfg, [ChatMessage.text("user", prompt)]), ("YES", "NO")) != "YES":
            return None
    return grid


def screen_statistical(image: ImageBlob, chat_backend: BackendConfig, templates: TemplateSet | None = None) -> bool:
    """YES/NO screen: does statistical data form the main body of the image?"""
    templates = templates or TemplateSet()
    prompt = templates.render("screen")
    reply = backends.chat_complete(chat_backend, [ChatMessage.with_images("user", prompt, [image])])
    return _final_token(reply, ("YES", "NO")) == "YES"


def _final_token(reply: str, allowed: tuple[str, ...]) -> str | None:
    tokens = reply.strip().split()
    if not tokens:
        return None
    last = tokens[-1].strip(".,!:;\"'`").upper()
    return last if last in allowed else None


# -- rewriting SFT assembly --------------------------------------------------------


def build_rewrite_sample(
    table: TableInstance,
    gt_image: ImageBlob,
    chat_backend: BackendConfig,
    templates: TemplateSet | None = None,
) -> SftSample | None:
    """Two chained chat calls: (table, image) -> description, then
    (table, description) -> rationale. Empty output at either step skips
    the sample (returns None)."""
    templates = templates or TemplateSet()
    table_md = serialize_markdown(table.grid)
    describe_prompt = templates.render("describe", TABLE_MARKDOWN=table_md)
    description = backends.chat_complete(
        chat_backend, [ChatMessage.with_images("user", describe_prompt, [gt_image])]
    ).strip()
    if not description:
        logger.warning("sample %s skipped: empty description", table.id)
        return None
    rationale_prompt = templates.render("rationale", TABLE_MARKDOWN=table_md, DESCRIPTION=description)
    rationale = backends.chat_complete(chat_backend, [ChatMessage.text("user", rationale_prompt)]).strip()
    if not rationale:
        logger.warning("sample %s skipped: empty rationale", table.id)
        return None
    return SftSample(table_markdown=table_md, rationale=rationale, description=description)


def build_rewrite_batch(
    items: list[tuple[TableInstance, ImageBlob]],
    chat_backend: BackendConfig,
    templates: TemplateSet | None = None,
) -> tuple[list[SftSample], list[dict]]:
    """Batch assembly with per-item skip accounting."""
    samples: list[SftSample] = []
    skips: list[dict] = []
    for table, image in items:
        try:
            sample = build_rewrite_sample(table, image, chat_backend, templates)
        except backends.BackendError as exc:
            skips.append({"id": table.id, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        if sample is None:
            skips.append({"id": table.id, "reason": "empty model output"})
        else:
            samples.append(sample)
    return samples, skips


# -- rollout filtering -------------------------------------------------------------


def rollout_decision(
    sample: RefinementSample,
    initial: ImageBlob,
    edit_backend: BackendConfig,
    judge_backend: BackendConfig,
    k: int = 5,
    templates: TemplateSet | None = None,
) -> RolloutDecision:
    """Produce k edit candidates (seeds 0..k-1) and ask the judge whether each
    beats the initial image (BETTER/WORSE final-token protocol). A sample is
    kept unless the verdicts are unanimous either way."""
    if k < 2:
        raise ValueError("k must be >= 2")
    templates = templates or TemplateSet()
    prompt = templates.render("rollout_compare", TABLE_MARKDOWN=sample.table_markdown)
    verdicts: list[str] = []
    for seed in range(k):
        candidate = backends.edit_image(edit_backend, initial, sample.instruction, seed=seed)
        verdict = _judged_verdict(prompt, initial, candidate, judge_backend)
        if verdict is None:
            return RolloutDecision(kept=False, verdicts=verdicts, reason="judge protocol failure")
        verdicts.append(verdict)
    if all(v == "WORSE" for v in verdicts):
        return RolloutDecision(kept=False, verdicts=verdicts, reason="all candidates worse (too hard)")
    if all(v == "BETTER" for v in verdicts):
        return RolloutDecision(kept=False, verdicts=verdicts, reason="all candidates better (too easy)")
    return RolloutDecision(kept=True, verdicts=verdicts)


def _judged_verdict(
    prompt: str, initial: ImageBlob, candidate: ImageBlob, judge_backend: BackendConfig
) -> str | None:
    # One retry on a malformed reply, mirroring the audit protocol.
    for _ in range(2):
        reply = backends.chat_complete(
            judge_backend, [ChatMessage.with_images("user", prompt, [initial, candidate])]
        )
        token = _final_token(reply, ("BETTER", "WORSE"))
        if token is not None:
            return token
        logger.warning("rollout judge reply missing BETTER/WORSE token; retrying once")
    return None


def rollout_filter(
    sample: RefinementSample,
    initial: ImageBlob,
    edit_backend: BackendConfig,
    judge_backend: BackendConfig,
    k: int = 5,
    templates: TemplateSet | None = None,
) -> bool:
    return rollout_decision(sample, initial, edit_backend, judge_backend, k, templates).kept


def keep_by_verdicts(verdicts: list[str]) -> bool:
    """The unanimity rule on its own: keep unless all BETTER or all WORSE."""
    if not verdicts:
        return False
    return not all(v == "BETTER" for v in verdicts) and not all(v == "WORSE" for v in verdicts)


# -- preference pairs ---------------------------------------------------------------


def build_preference_pairs(
    candidates: list[tuple[str, ImageBlob, ImageBlob, str]],
    judges: tuple[BackendConfig, BackendConfig],
    templates: TemplateSet | None = None,
) -> list[PreferencePair]:
    """Each (prompt, image_a, image_b, source) is judged by both backends;
    a pair is emitted only when both votes agree on a non-tie winner."""
    templates = templates or TemplateSet()
    pairs: list[PreferencePair] = []
    for prompt, image_a, image_b, source in candidates:
        rendered = templates.render("pair_compare", PROMPT=prompt)
        votes: list[JudgeVote] = []
        failed = False
        for judge_index, judge_cfg in enumerate(judges):
            try:
                reply = backends.chat_complete(
                    judge_cfg, [ChatMessage.with_images("user", rendered, [image_a, image_b])]
                )
            except backends.BackendError as exc:
                logger.warning("pair dropped: judge %d failed (%s)", judge_index, exc)
                failed = True
                break
            token = _final_token(reply, ("FIRST", "SECOND", "TIE"))
            if token is None:
                logger.warning("pair dropped: judge %d reply missing FIRST/SECOND/TIE", judge_index)
                failed = True
                break
            votes.append(JudgeVote(judge_id=f"judge{judge_index}", preferred=token.lower()))
        if failed or len(votes) != 2:
            continue
        first, second = votes[0].preferred, votes[1].preferred
        if first != second or first == "tie":
            continue
        winner, loser = (image_a, image_b) if first == "first" else (image_b, image_a)
        pairs.append(
            PreferencePair(prompt=prompt, winner=winner.sha256, loser=loser.sha256, source=source, votes=votes)
        )
    return pairs
