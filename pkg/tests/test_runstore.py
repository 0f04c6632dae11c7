from __future__ import annotations

import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from showtable.runstore import RunStore, safe_segment

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_put_blob_idempotent(tmp_path):
    store = RunStore(tmp_path)
    d1 = store.put_blob(b"hello")
    d2 = store.put_blob(b"hello")
    assert d1 == d2
    assert len(list(store.blobs_dir.iterdir())) == 1
    assert store.get_blob(d1) == b"hello"


def test_empty_blob_digest_matches_reference(tmp_path):
    store = RunStore(tmp_path)
    assert store.put_blob(b"") == EMPTY_SHA256
    # Independent check through hashlib on the stored file contents.
    assert hashlib.sha256(store.get_blob(EMPTY_SHA256)).hexdigest() == EMPTY_SHA256


def test_concurrent_identical_puts(tmp_path):
    store = RunStore(tmp_path)
    payload = b"x" * 4096
    with ThreadPoolExecutor(max_workers=8) as pool:
        digests = list(pool.map(lambda _: store.put_blob(payload), range(32)))
    assert len(set(digests)) == 1
    files = [p for p in store.blobs_dir.iterdir() if p.is_file()]
    assert len(files) == 1
    assert hashlib.sha256(files[0].read_bytes()).hexdigest() == files[0].name


def test_write_then_read_document(tmp_path):
    store = RunStore(tmp_path)
    store.write_document("runs/i1/run.json", {"a": 1, "nested": {"b": [1, 2]}})
    doc = store.read_document("runs/i1/run.json")
    assert doc["a"] == 1
    assert doc["nested"] == {"b": [1, 2]}
    assert doc["schema_version"] == 1


def test_read_missing_document_returns_none(tmp_path):
    assert RunStore(tmp_path).read_document("runs/i1/run.json") is None


def test_document_key_sanitization(tmp_path):
    store = RunStore(tmp_path)
    for bad in ("../escape.json", "runs//x.json", "runs/.hidden/run.json", "/abs.json"):
        with pytest.raises(ValueError):
            store.write_document(bad, {})


def test_safe_segment():
    assert safe_segment("inst/1:2") == "inst_1_2"
    assert safe_segment("...") == "_"
    assert safe_segment("ok-id.v2") == "ok-id.v2"


def test_leftover_temp_cleaned_on_open_and_ignored(tmp_path):
    store = RunStore(tmp_path)
    store.write_document("runs/i1/run.json", {"v": 1})
    leftover_blob = store.blobs_dir / ".tmp-deadbeef"
    leftover_blob.write_bytes(b"partial")
    leftover_doc = tmp_path / "runs" / "i1" / ".tmp-cafe"
    leftover_doc.write_bytes(b"{not json")
    # Readers never pick temps up.
    assert store.read_document("runs/i1/run.json") == {"v": 1, "schema_version": 1}
    assert store.verify() == []
    # Re-opening cleans them.
    RunStore(tmp_path)
    assert not leftover_blob.exists()
    assert not leftover_doc.exists()


def test_concurrent_writers_distinct_keys(tmp_path):
    store = RunStore(tmp_path)

    def write(i: int) -> None:
        store.write_document(f"runs/i{i}/run.json", {"value": i})

    with ThreadPoolExecutor(max_workers=16) as pool:
        list(pool.map(write, range(100)))
    for i in range(100):
        assert store.read_document(f"runs/i{i}/run.json")["value"] == i


def test_readers_never_see_partial_documents(tmp_path):
    store = RunStore(tmp_path)
    key = "runs/shared/doc.json"
    payload = {"value": 0, "pad": "x" * 2048}
    store.write_document(key, payload)
    stop = threading.Event()
    errors: list[str] = []

    def writer():
        for i in range(200):
            store.write_document(key, {"value": i, "pad": "x" * 2048})
        stop.set()

    def reader():
        while not stop.is_set():
            doc = store.read_document(key)
            if doc is None or len(doc.get("pad", "")) != 2048:
                errors.append(f"partial read: {doc if doc is None else len(doc.get('pad', ''))}")

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


def test_append_jsonl(tmp_path):
    store = RunStore(tmp_path)
    for i in range(5):
        store.append_jsonl("datagen/rewrite/b0.jsonl", {"i": i})
    lines = (tmp_path / "datagen" / "rewrite" / "b0.jsonl").read_text().splitlines()
    assert [json.loads(ln)["i"] for ln in lines] == list(range(5))


def test_verify_clean_store(tmp_path):
    store = RunStore(tmp_path)
    digest = store.put_blob(b"image bytes")
    store.write_document("runs/i1/run.json", {"initial_image": digest, "final_image": digest})
    assert store.verify() == []


def test_verify_detects_truncated_blob(tmp_path):
    store = RunStore(tmp_path)
    digest = store.put_blob(b"image bytes to truncate")
    store.blob_path(digest).write_bytes(b"image")
    violations = store.verify()
    assert any(v.kind == "digest_mismatch" for v in violations)


def test_verify_detects_dangling_reference(tmp_path):
    store = RunStore(tmp_path)
    missing = "0" * 64
    store.write_document("runs/i1/run.json", {"final_image": missing})
    violations = store.verify()
    assert any(v.kind == "dangling_reference" and v.detail == missing for v in violations)


def test_verify_ignores_non_reference_digests(tmp_path):
    store = RunStore(tmp_path)
    store.write_document("runs/i1/run.json", {"config_fingerprint": "f" * 64})
    assert store.verify() == []


def test_verify_checks_jsonl_references(tmp_path):
    store = RunStore(tmp_path)
    store.append_jsonl("datagen/pairs/b0.jsonl", {"winner_sha256": "1" * 64, "loser_sha256": "2" * 64})
    violations = store.verify()
    assert len([v for v in violations if v.kind == "dangling_reference"]) == 2


def test_verify_reports_unreadable_document(tmp_path):
    store = RunStore(tmp_path)
    path = tmp_path / "runs" / "i1" / "run.json"
    path.parent.mkdir(parents=True)
    path.write_text("{broken")
    assert any(v.kind == "unreadable" for v in store.verify())
