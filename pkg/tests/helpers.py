"""Shared test utilities: random grid generation and mock config builders."""

from __future__ import annotations

import random
import string

from showtable.backends import BackendConfig, MockScript, mock_config
from showtable.pipeline import PipelineConfig
from showtable.tables import TableGrid, TableInstance

# Cells must survive a serialize -> parse round trip: no pipes or newlines,
# no leading/trailing whitespace, no interior runs that trimming would alter.
_CELL_CHARS = string.ascii_letters + string.digits + " .%$-+,:()"


def random_cell(rng: random.Random, max_len: int = 10) -> str:
    length = rng.randint(0, max_len)
    cell = "".join(rng.choice(_CELL_CHARS) for _ in range(length)).strip()
    return cell


def random_grid(rng: random.Random, max_cols: int = 6, max_rows: int = 8) -> TableGrid:
    cols = rng.randint(1, max_cols)
    n_rows = rng.randint(0, max_rows)
    header = [random_cell(rng) for _ in range(cols)]
    body = [[random_cell(rng) for _ in range(cols)] for _ in range(n_rows)]
    return TableGrid(header=header, body=body, column_count=cols)


def make_instance(instance_id: str = "t1", markdown: str | None = None, topic: str = "Revenue") -> TableInstance:
    markdown = markdown or "| Region | Sales |\n| --- | --- |\n| North | 10 |\n| South | 30 |"
    return TableInstance.from_markdown(instance_id, topic, markdown)


def verdict_reply(satisfied: bool, n_instructions: int = 2) -> str:
    if satisfied:
        return "Everything matches.\nVERDICT: SATISFACTORY"
    lines = [f"{i}. Fix element {i}." for i in range(1, n_instructions + 1)]
    return "\n".join(lines) + "\nVERDICT: NEEDS_REFINEMENT"


def scripted_pipeline_config(
    reflect_replies: list[str],
    rewrite_reply: str = "<think>plan</think>\nA bar chart of the table.",
    max_rounds: int = 3,
) -> tuple[PipelineConfig, dict[str, MockScript]]:
    """Pipeline config whose reflect backend replays the given replies."""
    scripts = {
        "rewrite": MockScript().push(rewrite_reply),
        "generate": MockScript(),
        "reflect": MockScript().push(*reflect_replies),
        "refine": MockScript(),
    }
    cfg = PipelineConfig(
        rewrite=mock_config(scripts["rewrite"]),
        generate=mock_config(scripts["generate"]),
        reflect=mock_config(scripts["reflect"]),
        refine=mock_config(scripts["refine"]),
        max_rounds=max_rounds,
    )
    return cfg, scripts


def judge_reply(
    total_points: int = 10,
    errors: int = 0,
    total_chars: int = 100,
    error_chars: int = 0,
    violations: int = 0,
    label_error_pct=None,
    misaligned_points=None,
    inappropriate_mark_pct=None,
) -> str:
    import json

    doc = {
        "total_points": total_points,
        "errors": [f"point {i}" for i in range(errors)],
        "total_chars": total_chars,
        "error_chars": error_chars,
        "violations": [f"violation {i}" for i in range(violations)],
        "label_error_pct": label_error_pct,
        "misaligned_points": misaligned_points,
        "inappropriate_mark_pct": inappropriate_mark_pct,
    }
    return "```json\n" + json.dumps(doc) + "\n```"


def perfect_judge_script(instances: int = 1) -> MockScript:
    """Queue of flawless audit replies for DA, TR, RR, AA per instance."""
    script = MockScript()
    for _ in range(instances):
        script.push(
            judge_reply(total_points=10, errors=0),
            judge_reply(total_chars=100, error_chars=0),
            judge_reply(total_points=10, violations=0),
            judge_reply(label_error_pct=0.0, total_points=10, misaligned_points=0, inappropriate_mark_pct=0.0),
        )
    return script
