"""Acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts.  The trend criteria share one 3-seed pipeline run of
``configs/default.yaml``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from vitmerge import gate as gating
from vitmerge import merge, numkit, vit
from vitmerge.config import load_config
from vitmerge.data import SyntheticTaskSpec, generate
from vitmerge.pipeline import Run, gate_accuracy
from vitmerge.report import write_report
from vitmerge.train import loss_and_grads
from vitmerge.vit import ViTConfig

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"


def record(log, num, ok, text):
    log.append((num, bool(ok), text))
    print(f"{'PASS' if ok else 'FAIL'}  criterion {num}: {text}")
    assert ok, text


def jitter(p, seed, scale):
    rng = np.random.default_rng(seed)
    return p.replace({n: a + scale * rng.standard_normal(a.shape) for n, a in p.items()}).astype(np.float32)


class FixedGate:
    def __init__(self, logits):
        self._z = np.asarray(logits, dtype=np.float64)
        self.num_tasks = len(self._z)

    def logits(self, images):
        return np.tile(self._z, (len(images), 1))

    def param_count(self):
        return 0

    def flops(self):
        return 0


# ---------------------------------------------------------------- 1-4: property suites

def test_criterion_1_numeric_oracles(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    a, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 4))
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(4)] for i in range(6)])
    worst["matmul"] = np.linalg.norm(numkit.matmul(a, b) - ref) / np.linalg.norm(ref)
    m = rng.standard_normal((6, 6))
    spd = m @ m.T + 6 * np.eye(6)
    rhs = rng.standard_normal((6, 3))
    worst["solve"] = np.linalg.norm(numkit.solve(spd, rhs) - np.linalg.inv(spd) @ rhs) / np.linalg.norm(rhs)
    v = rng.standard_normal(7)
    e = [math.exp(x - max(v)) for x in v]
    worst["softmax"] = np.abs(numkit.softmax(v) - np.array(e) / sum(e)).max()
    u, w = rng.standard_normal(9), rng.standard_normal(9)
    ref = sum(x * y for x, y in zip(u, w)) / math.sqrt(sum(x * x for x in u) * sum(y * y for y in w))
    worst["cosine"] = abs(numkit.cosine_similarity(u, w) - ref)

    xs = [rng.standard_normal((30, 8)) for _ in range(3)]
    ws = [rng.standard_normal((8, 5)) for _ in range(3)]
    grams = [x.T @ x for x in xs]
    got = merge.regmean_tensor(ws, grams, 1.0)
    ref = np.linalg.inv(sum(grams)) @ sum(g @ wi for g, wi in zip(grams, ws))
    worst["regmean"] = np.linalg.norm(got - ref) / np.linalg.norm(ref)
    obj = lambda W: sum(np.sum((x @ W - x @ wi) ** 2) for x, wi in zip(xs, ws))
    best = obj(got)
    optimal = all(obj(got + 1e-3 * rng.standard_normal(got.shape)) > best for _ in range(100))
    elapsed = time.perf_counter() - t0

    tol = {"matmul": 1e-10, "solve": 1e-8, "softmax": 1e-12, "cosine": 1e-12, "regmean": 1e-8}
    ok = all(worst[k] <= tol[k] for k in tol) and optimal and elapsed < 30
    detail = ", ".join(f"{k} {worst[k]:.1e}" for k in tol)
    record(criterion_log, 1, ok, f"oracle errors [{detail}]; RegMean optimal under 100 perturbations: "
                                 f"{optimal}; {elapsed:.1f}s (< 30s)")


def test_criterion_2_gradient_check(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    p = vit.init(ViTConfig(depth=2), 3)
    p = p.replace({n: a + 0.2 * rng.standard_normal(a.shape) for n, a in p.items()}).astype(np.float64)
    x, y = rng.standard_normal((4, 1, 16, 16)), np.array([0, 1, 2, 3])
    _, grads = loss_and_grads(p, x, y, weight_decay=1e-3)
    coords = [(n, tuple(int(rng.integers(s)) for s in p[n].shape)) for n in sorted(p) for _ in range(5)]
    groups = {vit.group_kind(vit.group_of(n)) for n, _ in coords}
    h, worst, skipped = 1e-5, 0.0, 0
    for name, idx in coords:
        plus, minus = np.array(p[name]), np.array(p[name])
        plus[idx] += h
        minus[idx] -= h
        num = (loss_and_grads(p.replace({name: plus}), x, y, 1e-3)[0]
               - loss_and_grads(p.replace({name: minus}), x, y, 1e-3)[0]) / (2 * h)
        ana = float(grads[name][idx])
        if max(abs(num), abs(ana)) < 1e-8:  # analytically zero (key biases)
            skipped += 1
            continue
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    elapsed = time.perf_counter() - t0
    ok = len(coords) >= 200 and len(groups) == 5 and worst <= 1e-4 and elapsed < 120
    record(criterion_log, 2, ok, f"{len(coords)} coordinates over {len(groups)} groups, worst rel err "
                                 f"{worst:.1e} (<= 1e-4, {skipped} exactly-zero skipped); {elapsed:.1f}s (< 120s)")


def test_criterion_3_exact_recovery(criterion_log):
    t0 = time.perf_counter()
    base = vit.init(ViTConfig(), 0)
    models = [jitter(base, s, 0.01 * s) for s in (1, 2, 3)]
    checks = {}
    checks["avgmean idempotent"] = merge.avg_mean([models[0]] * 3).equal(models[0])
    checks["TA lambda=0 -> base"] = merge.task_arithmetic(base, models, 0.0).equal(base, skip_classifier=True)
    checks["TA N=1 lambda=1 -> model"] = merge.task_arithmetic(base, models[:1], 1.0).equal(models[0])
    eye = merge.GramStats({n: np.eye(base[n].shape[0]) for n in vit.linear_weight_names(base.config)},
                          {n: 1 for n in vit.linear_weight_names(base.config)})
    rm, av = merge.regmean(models, [eye] * 3), merge.avg_mean(models)
    checks["RegMean identity grams -> AvgMean"] = all(np.abs(rm[n] - av[n]).max() <= 1e-6 for n in rm)
    plan = gating.plan_from_m(gating.similarity(models), 2, "avgmean")
    one_hot = True
    for k in range(3):
        z = np.full(3, -1000.0)
        z[k] = 0.0
        mm = gating.build(models, FixedGate(z), plan)
        got = mm.assemble(gating.gate_probs(mm.gate, np.zeros((1, 16, 16))))
        one_hot &= all(got[n].tobytes() == models[k][n].tobytes() for n in mm.gated_names)
        one_hot &= got["head.weight"].tobytes() == models[k]["head.weight"].tobytes()
    checks["one-hot gating recovers model k"] = one_hot
    full = gating.plan_from_m(gating.similarity(models), 4, "avgmean")
    mm = gating.build(models, FixedGate(np.zeros(3)), full)
    got = mm.assemble(gating.gate_probs(mm.gate, np.zeros((1, 16, 16))))
    checks["uniform gating m=depth -> AvgMean"] = all(np.abs(got[n] - av[n]).max() <= 1e-7 for n in av)
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 60
    failed = [k for k, v in checks.items() if not v]
    record(criterion_log, 3, ok, f"{len(checks) - len(failed)}/{len(checks)} recovery identities hold"
                                 f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}; {elapsed:.1f}s (< 60s)")


def test_criterion_4_similarity_suite(criterion_log):
    t0 = time.perf_counter()
    base = vit.init(ViTConfig(), 0)
    models = [jitter(base, s, 0.01 * s) for s in (1, 2, 3)]
    checks = {}
    ident = [gating.similarity([models[0]] * 3, s) for s in gating.STRATEGIES]
    checks["identical -> N(N-1)/2"] = all(abs(v - 3.0) <= 1e-12 for r in ident
                                          for v in list(r.attn.values()) + list(r.mlp.values()))
    ref = gating.similarity(models)
    perm = gating.similarity([models[2], models[0], models[1]])
    checks["permutation invariant"] = all(abs(ref.attn[b] - perm.attn[b]) <= 1e-10
                                          and abs(ref.mlp[b] - perm.mlp[b]) <= 1e-10 for b in ref.attn)
    wide = [m.astype(np.float64) for m in models]
    scaled = gating.similarity([wide[0], wide[1].replace({n: 3.5 * a for n, a in wide[1].items()}), wide[2]])
    unscaled = gating.similarity(wide)
    checks["positive-scale invariant"] = all(abs(unscaled.attn[b] - scaled.attn[b]) <= 1e-10
                                             and abs(unscaled.mlp[b] - scaled.mlp[b]) <= 1e-10 for b in ref.attn)
    plans = [gating.plan_from_m(ref, m) for m in range(5)]
    checks["plans nest in m"] = all(a.gated_groups() < b.gated_groups() for a, b in zip(plans, plans[1:]))
    tied = gating.SimilarityReport({1: 0.5, 2: 0.5, 3: 0.5, 4: 0.5}, {1: 0.5, 2: 0.5, 3: 0.5, 4: 0.5})
    checks["ties -> lowest block index"] = all(gating.plan_from_m(tied, 2).gated_attention == {1, 2}
                                               for _ in range(10))
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 30
    failed = [k for k, v in checks.items() if not v]
    record(criterion_log, 4, ok, f"{len(checks) - len(failed)}/{len(checks)} similarity properties hold"
                                 f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}; {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------- 5-10: pipeline trends

@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    cfg = load_config(CONFIG)
    out = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    rows = {}
    for seed in cfg.seeds:
        for r in Run(cfg, seed, out).run_all():
            rows[(seed, r["name"])] = r
    elapsed = time.perf_counter() - t0
    return cfg, out, rows, elapsed


def _mean(rows, seeds, name):
    return float(np.mean([rows[(s, name)]["avg"] for s in seeds]))


def test_criterion_5_pretraining_matters(pipeline, criterion_log):
    cfg, _, rows, elapsed = pipeline
    parts, ok = [], True
    for s in cfg.seeds:
        chance = rows[(s, "individual")]["chance"]
        scratch = rows[(s, "avgmean_scratch")]["avg"]
        ind = rows[(s, "individual")]["avg"]
        reg = rows[(s, "regmean")]["avg"]
        ok &= scratch <= chance + 0.10 and reg >= ind - 0.10
        parts.append(f"seed {s}: AvgMean(from-scratch) {100 * scratch:.1f} (<= {100 * (chance + 0.1):.0f}), "
                     f"RegMean {100 * reg:.1f} (>= {100 * (ind - 0.1):.1f})")
    ok &= elapsed < 600
    record(criterion_log, 5, ok, "; ".join(parts) + f"; pipeline {elapsed:.0f}s (< 600s)")


def test_criterion_6_method_ordering(pipeline, criterion_log):
    cfg, _, rows, _ = pipeline
    seeds = cfg.seeds
    avg, reg = _mean(rows, seeds, "avgmean"), _mean(rows, seeds, "regmean")
    depth = cfg.model.depth
    ms = sorted({min(m, depth) for m in cfg.merge.m_sweep if m >= 1})
    gated = {m: _mean(rows, seeds, f"gated-regmean_m{m}") for m in ms}
    ok = reg >= avg - 0.01 and all(g >= reg - 0.01 for g in gated.values())
    text = " ".join(f"m={m} {100 * g:.2f}" for m, g in gated.items())
    record(criterion_log, 6, ok, f"Ours+RegMean [{text}] >= RegMean {100 * reg:.2f} >= AvgMean {100 * avg:.2f} "
                                 f"(1-point band)")


def test_criterion_7_monotonic_in_m(pipeline, criterion_log):
    cfg, _, rows, _ = pipeline
    seeds, depth = cfg.seeds, cfg.model.depth
    ms = [0, 1, 2, depth]
    ind = _mean(rows, seeds, "individual")
    parts, ok = [], True
    for method in ("gated-regmean", "gated-avgmean"):
        curve = [_mean(rows, seeds, f"{method}_m{m}") for m in ms]
        ok &= all(b >= a - 0.01 for a, b in zip(curve, curve[1:]))
        ok &= curve[-1] >= ind - 0.02
        parts.append(f"{method} " + "/".join(f"{100 * c:.2f}" for c in curve))
    record(criterion_log, 7, ok, f"m={ms}: " + "; ".join(parts) + f"; individual {100 * ind:.2f} "
                                 f"(m=depth within 2 points)")


def test_criterion_8_gate_quality(pipeline, criterion_log):
    cfg, out, rows, _ = pipeline
    held, routed = [], []
    for s in cfg.seeds:
        run = Run(cfg, s, out)
        held.append(gate_accuracy(run.gate(), run.pools()[1]))
        routed += [float(np.mean(r["classifier_selection"])) for (seed, _), r in rows.items()
                   if seed == s and "classifier_selection" in r]
    ok = min(held) >= 0.95 and min(routed) >= 0.95
    record(criterion_log, 8, ok, f"held-out task-ID accuracy min {100 * min(held):.2f}% with "
                                 f"{100 * cfg.gate.frac:.0f}% data; classifier selection min {100 * min(routed):.2f}% "
                                 f"(>= 95%)")


def test_criterion_9_accounting(pipeline, criterion_log):
    cfg, _, rows, _ = pipeline
    ok, parts = True, []
    for s in cfg.seeds:
        for method in ("gated-avgmean", "gated-regmean"):
            rs = sorted((r for (seed, _), r in rows.items() if seed == s and r["method"] == method),
                        key=lambda r: r["m"])
            params = [r["params"] for r in rs]
            flops = {r["flops"] for r in rs}
            ok &= all(a < b for a, b in zip(params, params[1:])) and len(flops) == 1
            if s == cfg.seeds[0]:
                parts.append(f"{method} params {params}, FLOPs {sorted(flops)}")
    record(criterion_log, 9, ok, "; ".join(parts))


def test_criterion_10_reproducible(pipeline, tmp_path_factory, criterion_log):
    cfg, out, _, _ = pipeline
    seed = cfg.seeds[0]
    again = tmp_path_factory.mktemp("rerun")
    Run(cfg, seed, again).run_all()
    ref_root, new_root = out / f"seed_{seed}", again / f"seed_{seed}"
    files = sorted(p.relative_to(ref_root) for p in ref_root.rglob("*") if p.is_file())
    same_set = files == sorted(p.relative_to(new_root) for p in new_root.rglob("*") if p.is_file())
    diff = [str(f) for f in files if (ref_root / f).read_bytes() != (new_root / f).read_bytes()]

    reports = []
    for root in (out, again):
        rows = [json.loads(p.read_text()) for p in sorted((root / f"seed_{seed}" / "evals").glob("*.json"))]
        doc = write_report(rows, root / "report_check", [t.family for t in cfg.tasks], timestamp=None)
        doc.pop("generated_at")
        reports.append((json.dumps(doc, sort_keys=True), (root / "report_check" / "report.txt").read_bytes()))
    ok = same_set and not diff and reports[0] == reports[1]
    record(criterion_log, 10, ok, f"seed {seed} re-run: {len(files)} artifacts, {len(diff)} differ"
                                  f"{' ' + str(diff[:3]) if diff else ''}; report identical excluding timestamp: "
                                  f"{reports[0] == reports[1]}")
