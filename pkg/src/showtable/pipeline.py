"""The four-stage self-correcting loop: rewrite the table into a visual plan,
generate an initial image, then iterate reflect -> refine until the reflector
is satisfied or the round budget is spent. Every intermediate artifact is
persisted through the run store before the record is returned."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

from . import backends
from .backends import BackendConfig, ChatMessage, ImageBlob
from .runstore import RunStore, safe_segment
from .tables import TableInstance, serialize_markdown
from .templating import TemplateSet

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 3

SATISFACTORY = "Satisfactory"
NEEDS_REFINEMENT = "NeedsRefinement"
EARLY_STOP = "EarlyStop"
MAX_ROUNDS = "MaxRounds"

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL | re.IGNORECASE)
_VERDICT_RE = re.compile(r"^\s*VERDICT:\s*(SATISFACTORY|NEEDS_REFINEMENT)\s*$", re.IGNORECASE | re.MULTILINE)
_NUMBERED_RE = re.compile(r"^\s*\d+[.)]\s+(.*\S)\s*$")


class ParseError(Exception):
    """A stage reply could not be interpreted at all (empty, no description)."""


@dataclass
class RewriteOutput:
    rationale: str
    description: str


@dataclass
class ReflectionVerdict:
    status: str  # SATISFACTORY | NEEDS_REFINEMENT constants above
    instructions: list[str]
    raw_text: str

    @property
    def satisfied(self) -> bool:
        return self.status == SATISFACTORY


@dataclass
class RoundRecord:
    round_index: int
    verdict: ReflectionVerdict
    input_image: str
    output_image: str | None  # absent when the verdict was Satisfactory


@dataclass
class RunRecord:
    instance_id: str
    rewrite: RewriteOutput
    initial_image: str
    rounds: list[RoundRecord]
    final_image: str
    termination: str  # EarlyStop | MaxRounds
    config_fingerprint: str
    failure: str | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "rewrite": {"rationale": self.rewrite.rationale, "description": self.rewrite.description},
            "initial_image": self.initial_image,
            "rounds": [
                {
                    "round_index": r.round_index,
                    "verdict": {
                        "status": r.verdict.status,
                        "instructions": r.verdict.instructions,
                        "raw_text": r.verdict.raw_text,
                    },
                    "input_image": r.input_image,
                    "output_image": r.output_image,
                }
                for r in self.rounds
            ],
            "final_image": self.final_image,
            "termination": self.termination,
            "config_fingerprint": self.config_fingerprint,
            "failure": self.failure,
            "notes": self.notes,
        }


@dataclass
class PipelineConfig:
    rewrite: BackendConfig
    generate: BackendConfig
    reflect: BackendConfig
    refine: BackendConfig
    max_rounds: int = DEFAULT_MAX_ROUNDS
    templates: TemplateSet = field(default_factory=TemplateSet)
    include_prior_instructions: bool = False
    include_description: bool = False

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def fingerprint(self) -> str:
        doc = {
            "max_rounds": self.max_rounds,
            "templates": self.templates.source_id(),
            "include_prior_instructions": self.include_prior_instructions,
            "include_description": self.include_description,
            "roles": {
                "rewrite": self.rewrite.fingerprint_fields(),
                "generate": self.generate.fingerprint_fields(),
                "reflect": self.reflect.fingerprint_fields(),
                "refine": self.refine.fingerprint_fields(),
            },
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def split_rewrite_reply(reply: str) -> RewriteOutput:
    """Split a rewrite reply into rationale and description.

    The template asks for a think-delimited rationale followed by the
    description; without the delimiters, the whole reply is the description.
    """
    if not reply or not reply.strip():
        raise ParseError("empty rewrite reply")
    match = _THINK_RE.search(reply)
    if match:
        rationale = match.group(1).strip()
        description = (reply[: match.start()] + reply[match.end() :]).strip()
    else:
        rationale = ""
        description = reply.strip()
    if not description:
        raise ParseError("rewrite reply has no description outside the think block")
    return RewriteOutput(rationale=rationale, description=description)


def rewrite(table: TableInstance, cfg: PipelineConfig) -> RewriteOutput:
    prompt = cfg.templates.render(
        "rewrite",
        TOPIC=table.topic,
        TABLE_MARKDOWN=serialize_markdown(table.grid),
    )
    reply = backends.chat_complete(cfg.rewrite, [ChatMessage.text("user", prompt)])
    return split_rewrite_reply(reply)


def parse_reflection_reply(reply: str) -> ReflectionVerdict:
    """Parse the trailing verdict line (last occurrence wins) plus the
    numbered instruction list above it. A non-empty reply with no verdict
    line counts as NeedsRefinement with the whole text as one instruction."""
    if not reply or not reply.strip():
        raise ParseError("empty reflection reply")
    matches = list(_VERDICT_RE.finditer(reply))
    if not matches:
        logger.warning("reflection protocol deviation: no verdict line; treating reply as one instruction")
        return ReflectionVerdict(NEEDS_REFINEMENT, [reply.strip()], reply)
    last = matches[-1]
    if last.group(1).upper() == "SATISFACTORY":
        return ReflectionVerdict(SATISFACTORY, [], reply)
    before = reply[: last.start()]
    instructions = [m.group(1) for ln in before.splitlines() if (m := _NUMBERED_RE.match(ln))]
    if not instructions:
        fallback = before.strip() or reply.strip()
        logger.warning("reflection protocol deviation: no numbered list; using reply text as instruction")
        instructions = [fallback]
    return ReflectionVerdict(NEEDS_REFINEMENT, instructions, reply)


def reflect(
    table: TableInstance,
    image: ImageBlob,
    cfg: PipelineConfig,
    round_index: int = 1,
    prior_instructions: list[str] | None = None,
    description: str = "",
) -> ReflectionVerdict:
    prior_block = ""
    if cfg.include_prior_instructions and prior_instructions:
        prior_block = "Previously requested fixes:\n" + join_instructions(prior_instructions) + "\n"
    description_block = ""
    if cfg.include_description and description:
        description_block = "Intended description:\n" + description + "\n"
    prompt = cfg.templates.render(
        "reflect",
        TABLE_MARKDOWN=serialize_markdown(table.grid),
        ROUND=round_index,
        PRIOR_INSTRUCTIONS=prior_block,
        REWRITE_DESCRIPTION=description_block,
    )
    reply = backends.chat_complete(cfg.reflect, [ChatMessage.with_images("user", prompt, [image])])
    return parse_reflection_reply(reply)


def join_instructions(instructions: list[str]) -> str:
    """One numbered edit block per round, preserving instruction order."""
    return "\n".join(f"{i}. {text}" for i, text in enumerate(instructions, start=1))


def run_pipeline(table: TableInstance, cfg: PipelineConfig, store: RunStore) -> RunRecord:
    """Execute rewrite -> generate -> (reflect -> refine)* for one table.

    Performs at most ``max_rounds`` refine calls; stops early the moment a
    reflection is satisfactory. On rewrite/generate/reflect errors the
    partial record is persisted with a failure marker and the error
    re-raised; a refine failure carries the previous image forward and the
    run ends with MaxRounds semantics.
    """
    fingerprint = cfg.fingerprint()
    record = RunRecord(
        instance_id=table.id,
        rewrite=RewriteOutput("", ""),
        initial_image="",
        rounds=[],
        final_image="",
        termination=MAX_ROUNDS,
        config_fingerprint=fingerprint,
    )
    try:
        record.rewrite = rewrite(table, cfg)
        image = backends.generate_image(cfg.generate, record.rewrite.description)
        store.put_blob(image.data)
        record.initial_image = image.sha256
        record.final_image = image.sha256

        prior: list[str] = []
        for round_index in range(1, cfg.max_rounds + 1):
            verdict = reflect(
                table, image, cfg,
                round_index=round_index,
                prior_instructions=prior,
                description=record.rewrite.description,
            )
            if verdict.satisfied:
                record.rounds.append(RoundRecord(round_index, verdict, image.sha256, None))
                record.termination = EARLY_STOP
                break
            prior.extend(verdict.instructions)
            instruction_block = join_instructions(verdict.instructions)
            try:
                edited = backends.edit_image(cfg.refine, image, instruction_block)
            except backends.BackendError as exc:
                # Carry the current image forward; the run stays scoreable.
                logger.warning("refine call failed (%s); keeping previous image", exc)
                record.rounds.append(RoundRecord(round_index, verdict, image.sha256, image.sha256))
                record.notes.append(f"round {round_index}: refine failed, image carried forward")
                record.termination = MAX_ROUNDS
                break
            store.put_blob(edited.data)
            record.rounds.append(RoundRecord(round_index, verdict, image.sha256, edited.sha256))
            image = edited
            record.final_image = image.sha256
    except Exception as exc:
        record.failure = f"{type(exc).__name__}: {exc}"
        _persist(store, record)
        raise
    _persist(store, record)
    return record


def _persist(store: RunStore, record: RunRecord) -> None:
    store.write_document(f"runs/{safe_segment(record.instance_id)}/run.json", record.to_dict())
