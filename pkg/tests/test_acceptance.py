"""Acceptance gate: one test per criterion, each recording a pass/fail line.

Protocol runs are shared through a module cache so each (mode, variant,
stream, seed) combination trains once per session.
"""

import copy
import time

import numpy as np
import pytest

from oracles import composite_problem
from test_metrics import _seeded_case
from unifier import estimator
from unifier.autodiff import (
    Tensor,
    bce_with_logits,
    concat_last,
    cross_entropy,
    gelu,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    mean_reduce,
    sigmoid,
    smooth_l1,
    softmax,
    stack_mean,
    tmean,
    tsum,
)
from unifier.config import RunConfig
from unifier.csr import branch_checksums, expand_branch
from unifier.harness import aggregate, load_pools, run_protocol
from unifier.metrics import MatchResult, f1, match_boxes, match_boxes_exhaustive, score_classification
from unifier.report import write_report
from unifier.scorer import build_report, validate_records
from unifier.vcc import ConsistencyConfig, scenario_prototype, vcc_loss
from unifier.vit import encoder_forward
from test_metrics import _fixture_cases

SEEDS = (0, 1, 2)
_RUNS = {}
_POOLS = {}


def config(mode="unifier", T=4, variant="kl_reduced", scenarios=None):
    cfg = RunConfig(mode=mode, T=T)
    cfg.vcc.variant = variant
    if scenarios:
        cfg.data.scenarios = list(scenarios)
    return cfg.validate()


def run(seed, **kw):
    cfg = config(**kw)
    key = (seed, tuple(sorted(kw.items())))
    if key not in _RUNS:
        pool_key = (seed, tuple(cfg.data.scenarios))
        if pool_key not in _POOLS:
            _POOLS[pool_key] = load_pools(cfg, seed)
        _RUNS[key] = run_protocol(cfg, seed=seed, data=_POOLS[pool_key])
    return _RUNS[key]


def score(record, step, scenario):
    return 0.5 * (record.value(step, scenario, "vqa") + record.value(step, scenario, "f1"))


# -- 1. gradient correctness -------------------------------------------------------------


def _rand(shape, rng, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projected(out, rng):
    return tsum(out * Tensor(rng.normal(size=out.shape)))


def _op_cases(rng):
    a, b = _rand((3, 4), rng), _rand((3, 4), rng)
    w = _rand((4, 5), rng)
    g, beta = _rand((4,), rng), _rand((4,), rng)
    x3 = _rand((2, 3, 4), rng)
    labels = rng.integers(0, 4, size=3)
    mask = (rng.random((3, 4)) > 0.5).astype(float)
    tgt = rng.normal(size=(3, 4))
    return {
        "add": ([a, b], lambda: _projected(a + b, rng_r(0))),
        "mul": ([a, b], lambda: _projected(a * b, rng_r(1))),
        "div": ([a, b], lambda: _projected(a / (b * b + 1.0), rng_r(2))),
        "pow": ([a], lambda: _projected((a * a + 1.0) ** 1.5, rng_r(3))),
        "exp": ([a], lambda: _projected((a * 0.5).exp(), rng_r(4))),
        "log": ([a], lambda: _projected((a * a + 0.5).log(), rng_r(5))),
        "matmul": ([a, w], lambda: _projected(matmul(a, w), rng_r(6))),
        "concat_last": ([a, b], lambda: _projected(concat_last([a, b]), rng_r(7))),
        "stack_mean": ([a, b], lambda: _projected(stack_mean([a, b]), rng_r(8))),
        "mean_reduce_feature": ([x3], lambda: _projected(mean_reduce(x3, "feature"), rng_r(9))),
        "mean_reduce_embedding": ([x3], lambda: _projected(mean_reduce(x3, "embedding"), rng_r(10))),
        "softmax": ([a], lambda: _projected(softmax(a), rng_r(11))),
        "log_softmax": ([a], lambda: _projected(log_softmax(a), rng_r(12))),
        "layer_norm": ([a, g, beta], lambda: _projected(layer_norm(a, g, beta), rng_r(13))),
        "gelu": ([a], lambda: _projected(gelu(a), rng_r(14))),
        "sigmoid": ([a], lambda: _projected(sigmoid(a), rng_r(15))),
        "tmean": ([a], lambda: _projected(tmean(a, axis=0), rng_r(16))),
        "reshape_transpose": ([a], lambda: _projected(a.reshape(4, 3).transpose(1, 0), rng_r(17))),
        "getitem": ([a], lambda: _projected(a[1:, ::2], rng_r(18))),
        "cross_entropy": ([a], lambda: cross_entropy(a, labels, weights=mask[:, 0] + 0.5)),
        "bce_with_logits": ([a], lambda: bce_with_logits(a, mask, weights=mask + 0.1)),
        "smooth_l1": ([a], lambda: smooth_l1(a, tgt, weights=mask[:, 1] + 0.5, beta=0.5)),
    }


def rng_r(k):
    return np.random.default_rng(1000 + k)


@pytest.mark.slow
def test_criterion_1_gradient_correctness(criterion):
    start = time.process_time()
    worst = {}
    for seed in range(5):
        for name, (params, fn) in _op_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, params, h=1e-5))
        loss_fn, params = composite_problem(seed)
        worst["composite"] = max(worst.get("composite", 0.0), grad_check(loss_fn, params, h=1e-5))
    elapsed = time.process_time() - start
    top = max(worst, key=worst.get)
    passed = worst[top] <= 1e-4 and elapsed < 60.0
    criterion(1, passed, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks x 5 seeds, "
                          f"{elapsed:.0f}s CPU")
    assert passed


# -- 2. expansion invariance ----------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_expansion_invariance(criterion):
    model = copy.deepcopy(run(0).model)
    probe = np.stack([s.image for s in _POOLS[(0, ("S1", "S2", "S3", "S4"))][1]["S3"].samples])
    probe = np.concatenate([probe, probe])[:64]
    before, _ = encoder_forward(model.encoder_, probe)
    records = [expand_branch(m, 77, probe=t.a) for m, t in zip(model.encoder_.csr_modules, before)]
    after, _ = encoder_forward(model.encoder_, probe)
    delta = max(float(np.max(np.abs(a.p.data - b.p.data))) for a, b in zip(after, before))
    passed = delta == 0.0 and all(r.max_abs_delta == 0.0 for r in records) and len(probe) == 64
    criterion(2, passed, f"max |dp| = {delta} over {len(before)} layers, 64-sample probe")
    assert passed


# -- 3. parameter isolation -----------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_parameter_isolation(criterion):
    model = run(0).model
    order = run(0).stream.order
    mismatched = []
    for scenario in order[:3]:
        k = model.branch_of_[scenario]
        now = [branch_checksums(m)[k] for m in model.encoder_.csr_modules]
        if now != model.freeze_checksums_[scenario]:
            mismatched.append(scenario)
    passed = not mismatched
    criterion(3, passed, f"branches of {order[:3]} bit-identical since freeze; mismatches: {mismatched}")
    assert passed


# -- 4. consistency identities -------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_vcc_identities(criterion):
    model = copy.deepcopy(run(0).model)
    enc = model.encoder_
    for m in enc.csr_modules:
        for b in m.branches[1:]:
            b.load_state_dict(m.branches[0].state_dict())
    x = np.stack([s.image for s in _POOLS[(0, ("S1", "S2", "S3", "S4"))][1]["S1"].samples[:8]])
    traces, _ = encoder_forward(enc, x)
    for t in traces:
        mu = scenario_prototype(t.branch_outputs)
        assert all(np.array_equal(o.data, mu.data) for o in t.branch_outputs)
    agree, _ = vcc_loss(traces, [Tensor(t.p.data.copy()) for t in traces], ConsistencyConfig())
    first_task = [e for e in run(0).logs if e["task"] == 1]
    lc_first = max(abs(e["l_c_sum"]) for e in first_task)
    passed = abs(agree.item()) <= 1e-10 and lc_first == 0.0 and len(first_task) > 0
    criterion(4, passed, f"L_vcc at agreement = {agree.item():.1e}; max L_c over {len(first_task)} "
                          f"task-1 updates = {lc_first}")
    assert passed


# -- 5. metric oracle equivalence -------------------------------------------------------------


def test_criterion_5_metric_oracle(criterion):
    worst = 0.0
    cases = _fixture_cases()
    for case in cases:
        s = build_report(validate_records(case["records"]))["scenarios"]["S1"]
        worst = max(worst, abs(s["vqa"] - case["vqa"]), abs(s["f1"] - case["f1"]))
    anchors = score_classification({1, 2, 3, 9}, {1, 2, 3, 4}) == 0.625 and f1(MatchResult(1, 1, 0))[2] == 2 / 3
    rng = np.random.default_rng(2024)
    divergent = []
    for i in range(200):
        preds, gts = _seeded_case(rng)
        for aware in (False, True):
            if match_boxes(preds, gts, class_aware=aware).tp != match_boxes_exhaustive(preds, gts, class_aware=aware):
                divergent.append((i, aware))
    passed = len(cases) == 50 and worst <= 1e-9 and anchors and not divergent
    criterion(5, passed, f"{len(cases)} fixture cases, max diff {worst:.1e}; greedy/exhaustive divergences "
                          f"on 400 seeded cases: {len(divergent)}")
    assert passed


# -- 6. forgetting ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_forgetting(criterion):
    details, ok = [], 0
    for seed in SEEDS:
        drops = {}
        for mode in ("finetune", "unifier"):
            res = run(seed, mode=mode, T=2, scenarios=("S1", "S2"))
            first = res.stream.order[0]
            drops[mode] = score(res.record, 1, first) - score(res.record, 2, first)
        good = drops["finetune"] >= 10.0 and drops["unifier"] < drops["finetune"]
        ok += good
        details.append(f"seed {seed}: finetune -{drops['finetune']:.1f} unifier -{drops['unifier']:.1f}")
    passed = ok == len(SEEDS)
    criterion(6, passed, f"{ok}/3 seeds ({'; '.join(details)})")
    assert passed


# -- 7. bound ordering -----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_bound_ordering(criterion):
    counts = []
    for seed in SEEDS:
        recs = {m: run(seed, mode=m).record for m in ("joint", "unifier", "finetune")}
        n = 0
        for scen in recs["joint"].scenarios:
            for metric in ("vqa", "f1"):
                j, u, f = (recs[m].value(4, scen, metric) for m in ("joint", "unifier", "finetune"))
                n += j >= u >= f
        counts.append(n)
    passed = all(n >= 7 for n in counts)
    criterion(7, passed, f"cells with joint >= unifier >= finetune per seed: {counts} (need >= 7 of 8 each)")
    assert passed


# -- 8. ablation ordering ----------------------------------------------------------------------

VARIANTS = ("kl_reduced", "kl_spatial", "l2_reduced", "l2_full")


@pytest.mark.slow
def test_criterion_8_ablation_ordering(criterion):
    ordered, means = 0, []
    for seed in SEEDS:
        m = []
        for variant in VARIANTS:
            _, last = aggregate(run(seed, variant=variant).record)
            m.append(float(np.mean([v for s in last.values() for v in s.values()])))
        means.append(m)
        ordered += all(a >= b for a, b in zip(m, m[1:]))
    table = "; ".join("/".join(f"{v:.1f}" for v in m) for m in means)
    passed = ordered >= 2
    criterion(8, passed, f"all 4 variants completed on 3 seeds; ordering held in {ordered}/3 ({table})")
    assert passed


# -- 9. determinism -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_determinism(criterion, tmp_path):
    cfg = config()
    first = run(0).record
    estimator._PRETRAINED.clear()
    second = run_protocol(cfg, seed=0, out_dir=tmp_path / "b").record
    same_csv = first.to_csv() == (tmp_path / "b" / "unifier-seed0.csv").read_text() == second.to_csv()
    pa = write_report([first], tmp_path / "ra")
    pb = write_report([second], tmp_path / "rb")
    same_report = all(open(a, "rb").read() == open(b, "rb").read() for a, b in zip(pa, pb))
    passed = same_csv and same_report and len(pa) == 9
    criterion(9, passed, f"record CSV identical: {same_csv}; {len(pa) - 1} SVGs + summary identical: {same_report}")
    assert passed


# -- 10. same-scenario accumulation ----------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_accumulation(criterion):
    counts = []
    for seed in SEEDS:
        res = run(seed, T=8)
        n = 0
        for scen in res.record.scenarios:
            t1, t2 = [t for t, s in enumerate(res.stream.order, start=1) if s == scen]
            for metric in ("vqa", "f1"):
                n += res.record.value(t2, scen, metric) >= res.record.value(t1, scen, metric)
        counts.append(n)
    passed = all(n >= 7 for n in counts)
    criterion(10, passed, f"cells not worse after second training per seed: {counts} (need >= 7 of 8 each)")
    assert passed
