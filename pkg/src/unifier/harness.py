"""Continual protocol: stream construction, per-step training, evaluation
after every step, run records and average/last aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError
from .metrics import (
    BBox,
    MatchResult,
    f1_scenario,
    match_boxes,
    score_classification,
    score_counting,
    score_exact,
    vqa_scenario_score,
)
from .synth import generate_dataset, read_jsonl
from .tasks import ScenarioTask

log = logging.getLogger(__name__)

VQA_KINDS = ("count", "classification", "true_false")
GROUNDING_KINDS = ("grounding", "fine_grounding")
CSV_COLUMNS = ("step", "scenario", "vqa", "f1", "mode", "seed")
LOG_COLUMNS = ("step", "task_loss", "l_vcc", "l_c_sum", "l_p_sum", "task")
METRICS = ("vqa", "f1")


# ---------------------------------------------------------------------------
# scoring


def _boxes(values, where):
    try:
        return [BBox.from_list(v) for v in values]
    except (ContractError, TypeError, ValueError) as exc:
        raise ContractError(f"{where}: {exc}") from None


def score_records(records):
    """Per-scenario ``{"vqa", "f1", "n"}`` from flat scoring records.

    Each record is a mapping with ``scenario``, ``kind``, ``prediction`` and
    ``ground_truth``. VQA kinds are pooled into one percentage; grounding
    TP/FP/FN are pooled over samples (and classes) before computing F1.
    """
    vqa = defaultdict(list)
    matches = defaultdict(dict)
    counts = defaultdict(int)
    for i, rec in enumerate(records):
        scen, kind = rec["scenario"], rec["kind"]
        pred, gt = rec["prediction"], rec["ground_truth"]
        counts[scen] += 1
        if kind == "count":
            vqa[scen].append(score_counting(pred, gt))
        elif kind == "classification":
            vqa[scen].append(score_classification(pred, gt))
        elif kind == "true_false":
            vqa[scen].append(score_exact(pred, gt))
        elif kind in GROUNDING_KINDS:
            where = f"record {i} ({rec.get('sample_id', '?')})"
            m = match_boxes(_boxes(pred, where), _boxes(gt, where), class_aware=kind == "fine_grounding")
            matches[scen][kind] = matches[scen].get(kind, MatchResult()) + m
        else:
            raise ContractError(f"record {i}: unknown kind {kind!r}")
    out = {}
    for scen in sorted(counts):
        m = matches[scen]
        out[scen] = {
            "vqa": vqa_scenario_score(vqa[scen]) if vqa[scen] else 0.0,
            "f1": f1_scenario(m["grounding"], m.get("fine_grounding")) if "grounding" in m else 0.0,
            "n": counts[scen],
        }
    return out


def prediction_records(model, samples):
    """Scoring records for every question of every sample, using ``model``'s answers."""
    answers = model.predict_samples(samples)
    return [
        {
            "sample_id": s.sample_id,
            "scenario": s.scenario,
            "kind": q.kind,
            "prediction": ans[q.kind],
            "ground_truth": gt,
        }
        for s, ans in zip(samples, answers)
        for q, gt in s.questions
    ]


def score_task(model, task):
    """``{"vqa", "f1"}`` percentages of ``model`` on one task's samples."""
    if task is None or len(task) == 0:
        raise ContractError("cannot score an empty or missing test set")
    s = score_records(prediction_records(model, task.samples))[task.scenario]
    return {"vqa": s["vqa"], "f1": s["f1"]}


def evaluate(model, test_sets, scenarios=None):
    """Score ``model`` on every scenario's test set; no parameters change."""
    scenarios = list(scenarios if scenarios is not None else sorted(test_sets))
    missing = [s for s in scenarios if s not in test_sets]
    if missing:
        raise ContractError(f"missing test set for {missing}")
    return {s: score_task(model, test_sets[s]) for s in scenarios}


# ---------------------------------------------------------------------------
# stream


@dataclass
class Stream:
    tasks: list
    T: int
    seed: int

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    @property
    def order(self):
        return [t.scenario for t in self.tasks]


def build_stream(pools, T, seed=1993):
    """Split each scenario's pool into ``T / n_scenarios`` equal disjoint subsets
    and order the (scenario, subset) pairs by a seeded shuffle."""
    scenarios = sorted(pools)
    if not scenarios:
        raise ConfigError("no scenario pools given", field="data.scenarios")
    if T < 1 or T % len(scenarios):
        raise ConfigError(f"T={T} is not a multiple of {len(scenarios)} scenarios", field="T")
    per = T // len(scenarios)
    chunks = []
    for scen in scenarios:
        samples = list(pools[scen].samples if isinstance(pools[scen], ScenarioTask) else pools[scen])
        size = len(samples) // per
        if size < 1:
            raise ConfigError(f"{scen} has {len(samples)} samples, too few for {per} steps", field="data.n_train")
        for j in range(per):
            chunks.append((scen, samples[j * size : (j + 1) * size]))
    order = np.random.default_rng(seed).permutation(len(chunks))
    tasks = [ScenarioTask(t + 1, chunks[i][0], chunks[i][1], "train") for t, i in enumerate(order)]
    return Stream(tasks=tasks, T=T, seed=seed)


# ---------------------------------------------------------------------------
# per-task operations


def snapshot_old(model):
    """Frozen deep copy of ``model``'s encoder."""
    return model.snapshot()


def train_task(model, task):
    """One protocol step; returns the per-update log entries it produced."""
    start = len(getattr(model, "log_", []))
    model.partial_fit(task)
    return model.log_[start:]


# ---------------------------------------------------------------------------
# run records


def _fmt(v):
    return repr(float(v))


class RunRecord:
    """Per-step, per-scenario scores of one run.

    Rows hold ``step, scenario, vqa, f1, mode, seed``. When ``path`` is set
    every row is appended and flushed as it arrives, so an interrupted run
    leaves a valid prefix.
    """

    def __init__(self, mode, seed, config_hash="", path=None):
        self.mode = mode
        self.seed = seed
        self.config_hash = config_hash
        self.rows = []
        self.wall_times = []
        self.path = path
        if path is not None:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_COLUMNS)

    def add(self, step, scenario, vqa, f1):
        row = {"step": int(step), "scenario": scenario, "vqa": float(vqa), "f1": float(f1),
               "mode": self.mode, "seed": int(self.seed)}
        self.rows.append(row)
        if self.path is not None:
            line = io.StringIO()
            csv.writer(line, lineterminator="\n").writerow(self._cells(row))
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                fh.write(line.getvalue())
                fh.flush()
                os.fsync(fh.fileno())
        return row

    @staticmethod
    def _cells(row):
        return [row["step"], row["scenario"], _fmt(row["vqa"]), _fmt(row["f1"]), row["mode"], row["seed"]]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow(self._cells(row))
        return buf.getvalue()

    @property
    def steps(self):
        return sorted({r["step"] for r in self.rows})

    @property
    def scenarios(self):
        return sorted({r["scenario"] for r in self.rows})

    def value(self, step, scenario, metric):
        for r in self.rows:
            if r["step"] == step and r["scenario"] == scenario:
                return r[metric]
        raise KeyError((step, scenario))

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ContractError(f"{path} holds no rows")
        missing = set(CSV_COLUMNS) - set(rows[0])
        if missing:
            raise ContractError(f"{path} lacks columns {sorted(missing)}")
        rec = cls(rows[0]["mode"], int(rows[0]["seed"]))
        for r in rows:
            rec.rows.append({"step": int(r["step"]), "scenario": r["scenario"], "vqa": float(r["vqa"]),
                             "f1": float(r["f1"]), "mode": r["mode"], "seed": int(r["seed"])})
        return rec


def aggregate(record, T=None):
    """``(mean, last)`` dicts keyed ``[scenario][metric]`` over steps ``1..T``.

    A scenario's step-t value is its test score after step t whether or not
    it has been trained yet.
    """
    rows = record.rows if isinstance(record, RunRecord) else list(record)
    if not rows:
        raise ContractError("run record has no rows")
    by = defaultdict(dict)
    for r in rows:
        by[r["scenario"]][r["step"]] = r
    T = T if T is not None else max(r["step"] for r in rows)
    mean, last = {}, {}
    for scen, steps in sorted(by.items()):
        missing = [t for t in range(1, T + 1) if t not in steps]
        if missing:
            raise ContractError(f"{scen} is missing steps {missing}")
        mean[scen] = {m: math.fsum(steps[t][m] for t in range(1, T + 1)) / T for m in METRICS}
        last[scen] = {m: steps[T][m] for m in METRICS}
    return mean, last


def write_train_log(entries, path):
    """Loss breakdown of every update; ``step`` counts updates over the whole run."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for i, e in enumerate(entries, start=1):
            w.writerow([i, *(_fmt(e[k]) for k in LOG_COLUMNS[1:5]), e["task"]])
    return path


# ---------------------------------------------------------------------------
# protocol


def load_pools(cfg, seed):
    """Per-scenario train pools and test sets, generated or read from ``dataset_dir``."""
    train, test = {}, {}
    for scen in cfg.data.scenarios:
        if cfg.data.dataset_dir:
            base = os.path.join(cfg.data.dataset_dir, scen)
            try:
                train[scen] = ScenarioTask(0, scen, read_jsonl(os.path.join(base, "train.jsonl")), "train")
                test[scen] = ScenarioTask(0, scen, read_jsonl(os.path.join(base, "test.jsonl")), "test")
            except OSError as exc:
                raise ConfigError(f"cannot read dataset for {scen}: {exc.strerror}", field="data.dataset_dir") from None
        else:
            train[scen], test[scen] = generate_dataset(scen, cfg.data.n_train, cfg.data.n_test, cfg.data.data_seed + seed)
    return train, test


@dataclass
class RunResult:
    record: RunRecord
    model: object
    stream: Stream
    logs: list = field(default_factory=list)


def run_protocol(cfg, seed=None, out_dir=None, data=None):
    """Execute the full stream for ``cfg.mode`` and score every scenario after every step.

    Returns a ``RunResult``; with ``out_dir`` the record CSV, a JSON config
    echo, the training loss log and a timing sidecar are written there.
    """
    from .estimator import ContinualVQA

    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    train, test = data if data is not None else load_pools(cfg, seed)
    stream = build_stream(train, cfg.T, cfg.order_seed)
    path = timing = stem = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, f"{cfg.mode}-seed{seed}")
        path, timing = stem + ".csv", stem + ".timing.jsonl"
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            json.dump({"config": cfg.to_dict(), "seed": seed, "config_hash": cfg.digest(), "order": stream.order},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        open(timing, "w").close()
    record = RunRecord(cfg.mode, seed, cfg.digest(), path=path)
    model = ContinualVQA(**cfg.estimator_params(seed))
    model._build()
    logs = []
    for t, task in enumerate(stream, start=1):
        start = time.perf_counter()
        logs.extend(train_task(model, task))
        scores = evaluate(model, test, cfg.data.scenarios)
        elapsed = time.perf_counter() - start
        record.wall_times.append(elapsed)
        for scen in cfg.data.scenarios:
            record.add(t, scen, scores[scen]["vqa"], scores[scen]["f1"])
        if timing is not None:
            with open(timing, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"step": t, "scenario": task.scenario, "seconds": elapsed,
                                     "at": time.strftime("%Y-%m-%dT%H:%M:%S")}) + "\n")
        log.info("step %d/%d (%s): %s", t, cfg.T, task.scenario,
                 ", ".join(f"{s} vqa={v['vqa']:.1f} f1={v['f1']:.1f}" for s, v in scores.items()))
    if stem is not None:
        write_train_log(logs, stem + ".trainlog.csv")
    return RunResult(record=record, model=model, stream=stream, logs=logs)
