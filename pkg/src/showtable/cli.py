"""Command-line surface: pipeline runs, benchmark execution, standalone
evaluation, datagen pipelines, dataset stats, report rendering, and store
verification.

Exit codes: 0 success, 1 instance failures / store violations,
2 configuration or dataset errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import backends, datagen
from .backends import BackendConfig, ImageBlob, MockScript, mock_config
from .bench import BenchDataset, BenchReport, DatasetError, emit_report, load_dataset, run_bench, stats
from .judge import evaluate_instance
from .pipeline import DEFAULT_MAX_ROUNDS, PipelineConfig, run_pipeline
from .runstore import RunStore
from .tables import TableInstance, serialize_markdown
from .templating import TemplateSet

logger = logging.getLogger(__name__)

LIVE_ENV = "SHOWTABLE_LIVE"

ROLE_NAMES = ("rewrite", "generate", "reflect", "refine", "judge", "aesthetic")

# Combined default audit reply: each dimension parser picks its own keys.
DEFAULT_AUDIT_REPLY = (
    "Audit complete.\n```json\n"
    '{"total_points": 8, "errors": [], "total_chars": 120, "error_chars": 6, '
    '"violations": ["slice 2 oversized"], "label_error_pct": 0.1, '
    '"misaligned_points": 1, "inappropriate_mark_pct": null}\n```'
)

DEFAULT_REWRITE_REPLY = (
    "<think>Choose a horizontal bar chart; one bar per row, muted palette, light background.</think>\n"
    "A clean horizontal bar chart infographic of the table values, every bar labeled with its "
    "category and number, muted blue palette on an off-white background. Layout variant {stamp}."
)


class ConfigError(Exception):
    pass


def default_mock_responder(messages) -> str:
    """Route a chat request to a deterministic canned reply by template marker."""
    text = "\n".join(m.joined_text() for m in messages)
    images = [blob for m in messages for blob in m.image_blobs()]
    if "FIRST, SECOND, or TIE" in text:
        if len(images) >= 2:
            return "FIRST" if images[0].sha256 <= images[1].sha256 else "SECOND"
        return "TIE"
    if "BETTER" in text and "WORSE" in text:
        better = bool(images) and int(images[-1].sha256[0], 16) % 2 == 0
        return "BETTER" if better else "WORSE"
    if "YES or NO" in text:
        return "YES"
    if "VERDICT:" in text:
        return "VERDICT: SATISFACTORY"
    if "fenced JSON" in text:
        return DEFAULT_AUDIT_REPLY
    if "<think>" in text:
        # Stamp the description with a prompt digest so distinct tables
        # yield distinct (but reproducible) generated images.
        return DEFAULT_REWRITE_REPLY.format(stamp=hashlib.sha256(text.encode("utf-8")).hexdigest()[:8])
    if "covering data points, layout, color, and background" in text:
        return "A clean bar chart of the table values on a light background."
    if "Reply with the reasoning only" in text:
        return "The rows map naturally to bars; values set bar lengths; a muted palette keeps labels legible."
    return "OK"


def build_mock_roles() -> dict[str, BackendConfig]:
    return {
        role: mock_config(MockScript(responder=default_mock_responder), model_name=f"mock-{role}")
        for role in ROLE_NAMES
    }


def load_roles(config_path: str | None, mock: bool) -> tuple[dict[str, BackendConfig], dict]:
    """Resolve per-role backend configs from --config / --mock."""
    if mock:
        return build_mock_roles(), {}
    if not config_path:
        raise ConfigError("--config is required unless --mock is given")
    try:
        doc = json.loads(Path(config_path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    roles_doc = doc.get("roles")
    if not isinstance(roles_doc, dict):
        raise ConfigError("config must contain a 'roles' object")
    roles: dict[str, BackendConfig] = {}
    for role in ROLE_NAMES:
        entry = roles_doc.get(role)
        if entry is None:
            raise ConfigError(f"config missing role {role!r}")
        try:
            roles[role] = BackendConfig(
                kind=entry.get("kind", "http"),
                endpoint=entry.get("endpoint", ""),
                model_name=entry.get("model_name", ""),
                api_key_env=entry.get("api_key_env", ""),
                timeout_s=float(entry.get("timeout_s", 120.0)),
                max_retries=int(entry.get("max_retries", 2)),
                backoff_base_ms=float(entry.get("backoff_base_ms", 250.0)),
                max_inflight=int(entry.get("max_inflight", 4)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid backend config for role {role!r}: {exc}") from exc
    return roles, doc


def build_pipeline_config(roles: dict[str, BackendConfig], args, config_doc: dict) -> PipelineConfig:
    templates_dir = getattr(args, "templates", None) or config_doc.get("templates_dir")
    max_rounds = getattr(args, "max_rounds", None) or config_doc.get("max_rounds", DEFAULT_MAX_ROUNDS)
    return PipelineConfig(
        rewrite=roles["rewrite"],
        generate=roles["generate"],
        reflect=roles["reflect"],
        refine=roles["refine"],
        max_rounds=int(max_rounds),
        templates=TemplateSet(templates_dir),
    )


# -- subcommand handlers ---------------------------------------------------------


def cmd_run(args) -> int:
    if args.live_smoke:
        if os.environ.get(LIVE_ENV) != "1":
            print(f"--live-smoke requires {LIVE_ENV}=1", file=sys.stderr)
            return 2
        if args.mock:
            print("--live-smoke and --mock are mutually exclusive", file=sys.stderr)
            return 2
    dataset = load_dataset(args.dataset)
    instance = _pick_instance(dataset, args.id)
    roles, doc = load_roles(args.config, args.mock)
    cfg = build_pipeline_config(roles, args, doc)
    store = RunStore(args.out)
    record = run_pipeline(instance, cfg, store)
    result = {
        "instance_id": record.instance_id,
        "termination": record.termination,
        "rounds": len(record.rounds),
        "final_image": record.final_image,
    }
    if args.evaluate or args.live_smoke:
        final_blob = ImageBlob.from_bytes(store.get_blob(record.final_image))
        scores = evaluate_instance(
            instance, final_blob, roles["judge"], roles["aesthetic"],
            templates=cfg.templates, store=store,
        )
        result["scores"] = scores.to_dict()
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    dataset = load_dataset(args.dataset)
    roles, doc = load_roles(args.config, args.mock)
    cfg = build_pipeline_config(roles, args, doc)
    store = RunStore(args.out)
    report = run_bench(
        dataset, cfg, roles["judge"], roles["aesthetic"], store,
        concurrency=args.concurrency, resume=args.resume,
    )
    store.write_document("runs/bench_report.json", report.to_dict())
    print(emit_report(report, args.format))
    return 1 if report.failures else 0


def cmd_eval(args) -> int:
    table_md = Path(args.table_file).read_text("utf-8")
    instance = TableInstance.from_markdown(args.id, args.topic, table_md)
    image = ImageBlob.from_bytes(Path(args.image).read_bytes(), media_type=_media_type(args.image))
    roles, doc = load_roles(args.config, args.mock)
    store = RunStore(args.out) if args.out else None
    if store is not None:
        store.put_blob(image.data)
    templates = TemplateSet(getattr(args, "templates", None) or doc.get("templates_dir"))
    scores = evaluate_instance(instance, image, roles["judge"], roles["aesthetic"], templates, store)
    print(json.dumps(scores.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_stats(args) -> int:
    dataset = load_dataset(args.dataset)
    print(json.dumps(stats(dataset), indent=2))
    return 0


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    print(emit_report(BenchReport.from_dict(doc), args.format))
    return 0


def cmd_verify_store(args) -> int:
    store = RunStore(args.out)
    violations = store.verify()
    for violation in violations:
        print(f"{violation.kind}: {violation.path} ({violation.detail})")
    print(f"{len(violations)} violation(s)")
    return 1 if violations else 0


def cmd_datagen(args) -> int:
    roles, doc = load_roles(args.config, args.mock)
    store = RunStore(args.out)
    templates = TemplateSet(getattr(args, "templates", None) or doc.get("templates_dir"))
    handler = {
        "consensus": _datagen_consensus,
        "rewrite": _datagen_rewrite,
        "rollout": _datagen_rollout,
        "pairs": _datagen_pairs,
    }[args.pipeline]
    return handler(args, roles, store, templates)


def _datagen_consensus(args, roles, store: RunStore, templates) -> int:
    accepted = 0
    total = 0
    for lineno, doc in _read_jsonl(args.input):
        total += 1
        grid = datagen.consensus_filter(str(doc.get("annotation_a", "")), str(doc.get("annotation_b", "")))
        record = {"id": doc.get("id", f"line{lineno}"), "accepted": grid is not None}
        if grid is not None:
            record["table_markdown"] = serialize_markdown(grid)
            accepted += 1
        store.append_jsonl(f"datagen/consensus/{args.batch}.jsonl", record)
    print(json.dumps({"total": total, "accepted": accepted}))
    return 0


def _datagen_rewrite(args, roles, store: RunStore, templates) -> int:
    dataset = load_dataset(args.input)
    items = []
    for instance in dataset.instances:
        if not instance.reference_image:
            logger.warning("id %s skipped: no reference_image_path", instance.id)
            continue
        data = Path(instance.reference_image).read_bytes()
        blob = ImageBlob.from_bytes(data, media_type=_media_type(instance.reference_image))
        store.put_blob(blob.data)
        items.append((instance, blob))
    samples, skips = datagen.build_rewrite_batch(items, roles["judge"], templates)
    for sample in samples:
        store.append_jsonl(f"datagen/rewrite/{args.batch}.jsonl", sample.to_record())
    for skip in skips:
        store.append_jsonl(f"datagen/rewrite/{args.batch}.skips.jsonl", skip)
    print(json.dumps({"samples": len(samples), "skips": len(skips)}))
    return 0


def _datagen_rollout(args, roles, store: RunStore, templates) -> int:
    kept = 0
    total = 0
    for _, doc in _read_jsonl(args.input):
        total += 1
        data = Path(doc["initial_image_path"]).read_bytes()
        initial = ImageBlob.from_bytes(data, media_type=_media_type(doc["initial_image_path"]))
        store.put_blob(initial.data)
        sample = datagen.RefinementSample(
            initial_image=initial.sha256,
            instruction=str(doc["instruction"]),
            table_markdown=str(doc["table_markdown"]),
        )
        decision = datagen.rollout_decision(
            sample, initial, roles["refine"], roles["judge"], k=args.k, templates=templates
        )
        kept += int(decision.kept)
        store.append_jsonl(
            f"datagen/rollout/{args.batch}.jsonl",
            {
                "initial_image_sha256": sample.initial_image,
                "instruction": sample.instruction,
                "table_markdown": sample.table_markdown,
                "kept": decision.kept,
                "verdicts": decision.verdicts,
            },
        )
    print(json.dumps({"total": total, "kept": kept}))
    return 0


def _datagen_pairs(args, roles, store: RunStore, templates) -> int:
    candidates = []
    for _, doc in _read_jsonl(args.input):
        image_a = ImageBlob.from_bytes(Path(doc["image_a_path"]).read_bytes(), _media_type(doc["image_a_path"]))
        image_b = ImageBlob.from_bytes(Path(doc["image_b_path"]).read_bytes(), _media_type(doc["image_b_path"]))
        store.put_blob(image_a.data)
        store.put_blob(image_b.data)
        candidates.append((str(doc["prompt"]), image_a, image_b, str(doc.get("source", "strong_vs_weak"))))
    pairs = datagen.build_preference_pairs(candidates, (roles["judge"], roles["reflect"]), templates)
    for pair in pairs:
        store.append_jsonl(f"datagen/pairs/{args.batch}.jsonl", pair.to_record())
    print(json.dumps({"candidates": len(candidates), "pairs": len(pairs)}))
    return 0


# -- helpers -----------------------------------------------------------------------


def _pick_instance(dataset: BenchDataset, instance_id: str | None) -> TableInstance:
    if instance_id is None:
        if not dataset.instances:
            raise DatasetError("dataset is empty")
        return dataset.instances[0]
    for instance in dataset.instances:
        if instance.id == instance_id:
            return instance
    raise DatasetError(f"id {instance_id!r} not in dataset")


def _read_jsonl(path: str):
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"input file not found: {path}")
    for lineno, line in enumerate(p.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc}", lineno) from exc


def _media_type(path: str) -> str:
    suffix = Path(path).suffix.lower()
    return {"": "image/png", ".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}.get(
        suffix, "application/octet-stream"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="showtable", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_backends=True):
        p.add_argument("--out", default="runstore", help="run store directory")
        if needs_backends:
            p.add_argument("--config", help="backend config JSON")
            p.add_argument("--mock", action="store_true", help="use deterministic scripted mocks")
            p.add_argument("--templates", help="prompt templates directory (defaults to packaged)")

    p_run = sub.add_parser("run", help="run the pipeline on one instance")
    p_run.add_argument("--dataset", required=True)
    p_run.add_argument("--id", help="instance id (default: first)")
    p_run.add_argument("--max-rounds", type=int, dest="max_rounds")
    p_run.add_argument("--evaluate", action="store_true", help="also score the final image")
    p_run.add_argument("--live-smoke", action="store_true", help=f"one live end-to-end instance ({LIVE_ENV}=1)")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="run pipeline + evaluation over a dataset")
    p_bench.add_argument("--dataset", required=True)
    p_bench.add_argument("--max-rounds", type=int, dest="max_rounds")
    p_bench.add_argument("--concurrency", type=int, default=4)
    p_bench.add_argument("--resume", action="store_true")
    p_bench.add_argument("--format", choices=("markdown", "json"), default="markdown")
    common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_eval = sub.add_parser("eval", help="score an existing image against a table")
    p_eval.add_argument("--table-file", required=True, dest="table_file")
    p_eval.add_argument("--image", required=True)
    p_eval.add_argument("--id", default="eval-instance")
    p_eval.add_argument("--topic", default="")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_dg = sub.add_parser("datagen", help="training data construction pipelines")
    p_dg.add_argument("pipeline", choices=("consensus", "rewrite", "rollout", "pairs"))
    p_dg.add_argument("--input", required=True, help="input JSONL file")
    p_dg.add_argument("--batch", default="batch0", help="output batch name")
    p_dg.add_argument("--k", type=int, default=5, help="rollout candidates per sample")
    common(p_dg)
    p_dg.set_defaults(func=cmd_datagen)

    p_stats = sub.add_parser("stats", help="data-point count histogram of a dataset")
    p_stats.add_argument("--dataset", required=True)
    p_stats.set_defaults(func=cmd_stats)

    p_report = sub.add_parser("report", help="re-render a stored bench report")
    p_report.add_argument("--report", required=True, help="bench_report.json path")
    p_report.add_argument("--format", choices=("markdown", "json"), default="markdown")
    p_report.set_defaults(func=cmd_report)

    p_verify = sub.add_parser("verify-store", help="check blob digests and references")
    common(p_verify, needs_backends=False)
    p_verify.set_defaults(func=cmd_verify_store)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except backends.BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
