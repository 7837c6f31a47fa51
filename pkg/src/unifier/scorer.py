"""Standalone scorer over JSON record files, with schema validation."""

from __future__ import annotations

import csv
import io
import json
import math

from .exceptions import ConfigError
from .harness import GROUNDING_KINDS, score_records
from .vit import QUESTION_KINDS

REPORT_COLUMNS = ("scenario", "n", "vqa", "f1")


class SchemaError(ConfigError):
    """A scoring document violates the record format; ``field`` is a JSON pointer."""


def _fail(pointer, message):
    raise SchemaError(f"{pointer or '/'}: {message}", field=pointer or "/")


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_box(box, pointer):
    if not isinstance(box, list) or not 4 <= len(box) <= 6:
        _fail(pointer, "box must be a list [x1, y1, x2, y2, class, confidence]")
    for i, v in enumerate(box[:4]):
        if not _is_number(v):
            _fail(f"{pointer}/{i}", f"coordinate must be a finite number, got {v!r}")
    if box[2] < box[0] or box[3] < box[1]:
        _fail(pointer, f"box corners out of order (x2<x1 or y2<y1): {box[:4]}")
    if len(box) > 4 and box[4] is not None and (not isinstance(box[4], int) or isinstance(box[4], bool)):
        _fail(f"{pointer}/4", f"class must be an integer or null, got {box[4]!r}")
    if len(box) > 5 and box[5] is not None:
        if not _is_number(box[5]) or not 0.0 <= box[5] <= 1.0:
            _fail(f"{pointer}/5", f"confidence must lie in [0, 1], got {box[5]!r}")


def _check_answer(kind, value, pointer):
    if kind == "count":
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            _fail(pointer, f"count must be a nonnegative integer, got {value!r}")
    elif kind == "classification":
        if not isinstance(value, list):
            _fail(pointer, "classification answer must be a list of class ids")
        for i, c in enumerate(value):
            if not isinstance(c, int) or isinstance(c, bool):
                _fail(f"{pointer}/{i}", f"class id must be an integer, got {c!r}")
    elif kind == "true_false":
        if not isinstance(value, str):
            _fail(pointer, f"true/false answer must be a string, got {value!r}")
    else:
        if not isinstance(value, list):
            _fail(pointer, "grounding answer must be a list of boxes")
        for i, box in enumerate(value):
            _check_box(box, f"{pointer}/{i}")


def validate_records(doc, need=("prediction", "ground_truth")):
    """Check a scoring document and return its record list.

    Accepts a bare list or ``{"records": [...]}``. Errors name the offending
    location as a JSON pointer.
    """
    base = ""
    if isinstance(doc, dict):
        if "records" not in doc:
            _fail("/records", "missing required key")
        doc, base = doc["records"], "/records"
    if not isinstance(doc, list):
        _fail(base, "expected a list of records")
    for i, rec in enumerate(doc):
        p = f"{base}/{i}"
        if not isinstance(rec, dict):
            _fail(p, "record must be an object")
        for key in ("sample_id", "scenario", "kind", *need):
            if key not in rec:
                _fail(f"{p}/{key}", "missing required key")
        for key in ("sample_id", "scenario"):
            if not isinstance(rec[key], str):
                _fail(f"{p}/{key}", "must be a string")
        if rec["kind"] not in QUESTION_KINDS:
            _fail(f"{p}/kind", f"unknown kind {rec['kind']!r}; expected one of {list(QUESTION_KINDS)}")
        for key in need:
            _check_answer(rec["kind"], rec[key], f"{p}/{key}")
        if rec["kind"] == "classification" and "ground_truth" in need and not rec["ground_truth"]:
            _fail(f"{p}/ground_truth", "classification ground truth must be nonempty")
    return doc


def merge_ground_truth(preds, gts):
    """Join prediction records with ground-truth records on ``(sample_id, kind)``."""
    table = {}
    for i, g in enumerate(gts):
        key = (g["sample_id"], g["kind"])
        if key in table:
            _fail(f"/{i}", f"duplicate ground truth for {key}")
        table[key] = g
    merged = []
    for i, p in enumerate(preds):
        key = (p["sample_id"], p["kind"])
        if key not in table:
            _fail(f"/{i}", f"no ground truth for sample {key[0]!r} kind {key[1]!r}")
        merged.append({**p, "ground_truth": table[key]["ground_truth"]})
    return merged


def _load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", field=str(path)) from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc.msg} at line {exc.lineno}", field="/") from None


def score_files(pred_path, gt_path=None):
    """Score a combined record file, or a prediction file against a ground-truth file."""
    if gt_path is None:
        records = validate_records(_load(pred_path))
    else:
        preds = validate_records(_load(pred_path), need=("prediction",))
        gts = validate_records(_load(gt_path), need=("ground_truth",))
        records = merge_ground_truth(preds, gts)
    return build_report(records)


def build_report(records):
    scores = score_records(records)
    kinds = sorted({r["kind"] for r in records})
    return {
        "scenarios": scores,
        "n_records": len(records),
        "kinds": kinds,
        "has_grounding": any(k in GROUNDING_KINDS for k in kinds),
    }


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for scen, s in sorted(report["scenarios"].items()):
        w.writerow([scen, s["n"], repr(s["vqa"]), repr(s["f1"])])
    return buf.getvalue()
