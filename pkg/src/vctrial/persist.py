"""Trial output files: summary CSV, cohort report JSON and run metadata JSON.

Every file starts with (or contains) a schema tag, the config hash and the
master seed. Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

from vctrial.metrics import SUMMARY_COLUMNS, SummaryRow, cohort_report

SUMMARY_SCHEMA = "vct-summary/1"
REPORT_SCHEMA = "vct-report/1"
METADATA_SCHEMA = "vct-metadata/1"
SUMMARY_FILE = "summary.csv"
REPORT_FILE = "report.json"
METADATA_FILE = "metadata.json"


def atomic_write(path, text: str):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def dumps_summary(rows, config_hash: str, master_seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={SUMMARY_SCHEMA}\n# config_hash={config_hash}\n"
              f"# master_seed={master_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v
                    for v in (getattr(r, c) for c in SUMMARY_COLUMNS)])
    return buf.getvalue()


def _dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def persist(result, out_dir) -> Path:
    """Write ``summary.csv``, ``report.json`` and ``metadata.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = result.metadata
    provenance = {"config_hash": meta["config_hash"], "master_seed": meta["master_seed"]}
    atomic_write(out / SUMMARY_FILE,
                 dumps_summary(result.rows, meta["config_hash"], meta["master_seed"]))
    atomic_write(out / REPORT_FILE, _dumps_json(
        {"schema": REPORT_SCHEMA, **provenance, "report": cohort_report(result.cohort)}))
    atomic_write(out / METADATA_FILE, _dumps_json({"schema": METADATA_SCHEMA, **meta}))
    return out


def _check(doc: dict, schema: str, path):
    if doc.get("schema") != schema:
        raise ValueError(f"{path}: expected schema {schema}")
    return doc


def load_report(in_dir) -> dict:
    path = Path(in_dir) / REPORT_FILE
    return _check(json.loads(path.read_text(encoding="utf-8")), REPORT_SCHEMA, path)


def load_metadata(in_dir) -> dict:
    path = Path(in_dir) / METADATA_FILE
    return _check(json.loads(path.read_text(encoding="utf-8")), METADATA_SCHEMA, path)


def load_summary(in_dir):
    """Rows of ``summary.csv`` as :class:`SummaryRow` plus the header fields."""
    path = Path(in_dir) / SUMMARY_FILE
    header = {}
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, value = ln[1:].strip().partition("=")
            header[key] = value
        elif ln:
            body.append(ln)
    if header.get("schema") != SUMMARY_SCHEMA:
        raise ValueError(f"{path}: expected schema {SUMMARY_SCHEMA}")
    reader = csv.DictReader(body)
    for rec in reader:
        rows.append(SummaryRow(
            id=int(rec["id"]), model=rec["model"],
            **{c: float(rec[c]) for c in SUMMARY_COLUMNS if c not in ("id", "model")}))
    return rows, header
