"""Acceptance suite: the ten primary criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py``; the verdict lines are repeated
in the terminal summary.  Every STAGE/TRIAL simulation pair built here is also
checked for metric equivalence (criterion 5).
"""

import json
import random
import time
from fractions import Fraction

import pytest

from stageplan import hpseq as H
from stageplan.analysis import kwise_merge_rate, merge_rate
from stageplan.cli import main as cli
from stageplan.hpseq import HpSequence, Segment, TrialConfig, split_at
from stageplan.plan import plan_from_configs
from stageplan.sim import CostModel, Mode, StudySetup, run
from stageplan.stagetree import build_stage_tree, critical_path
from stageplan.tuners import ASHATuner, GridTuner, MedianStopTuner, SHATuner, grid, trial_name

from strategies import (
    asha_drive,
    asha_reference,
    brute_unique_steps,
    four_node_plan,
    merged_intervals,
    oracle_walk,
    random_plan,
    trial_tokens,
)

ZERO = dict(save_seconds=0, load_seconds=0, eval_seconds=0)
OVERHEAD = dict(save_seconds=5, load_seconds=5, eval_seconds=2)

VERDICTS: dict[int, str] = {}  # printed in the terminal summary by conftest.py


def verdict(n, title, ok, detail, elapsed, limit=None):
    timed = limit is None or elapsed < limit
    status = "PASS" if ok and timed else "FAIL"
    budget = f" (limit {limit}s)" if limit else ""
    VERDICTS[n] = f"[{status}] criterion {n:>2}: {title}: {detail}; {elapsed:.2f}s{budget}"
    print(VERDICTS[n])
    assert ok, detail
    assert timed, f"took {elapsed:.2f}s, limit {limit}s"


# ------------------------------------------------------------------ helpers

MET = []  # (label, stage result, trial result) pairs checked by criterion 5


def equivalent(a, b):
    """Order-independent tuners: identical histories.  Others: identical shared records."""
    for name, tuner in a.tuners.items():
        ha = {g: r.history for g, r in a.trials.items() if r.study == name}
        hb = {g: r.history for g, r in b.trials.items() if r.study == name}
        if tuner.kind in ("grid", "sha", "milestone"):
            if json.dumps(sorted(ha.items())) != json.dumps(sorted(hb.items())):
                return False
            continue
        for gid in set(ha) & set(hb):
            ra, rb = dict(ha[gid]), dict(hb[gid])
            if any(json.dumps(ra[s], sort_keys=True) != json.dumps(rb[s], sort_keys=True) for s in set(ra) & set(rb)):
                return False
    return True


def both_modes(label, studies, cost, seed=0):
    a = run(studies, Mode.STAGE, cost, seed=seed)
    b = run(studies, Mode.TRIAL, cost, seed=seed)
    MET.append((label, equivalent(a, b), len(a.tuners)))
    assert MET[-1][1], f"{label}: metric histories differ between modes"
    return a, b


def lr_pool(scale):
    """Mixed-family functions whose interesting features span ``scale`` steps."""
    s = max(2, scale)
    return [
        H.constant("0.1"),
        H.constant("0.05"),
        H.constant("0.01"),
        H.step_decay("0.1", "0.1", [s // 3, 2 * s // 3]),
        H.multistep(["0.1", "0.05", "0.01"], [s // 4, s // 2]),
        H.exponential("0.1", "0.99"),
        H.linear("0.1", s),
        H.cyclic("0.001", "0.1", max(1, s // 10)),
        H.cosine_restarts("0.1", max(1, s // 5)),
        H.warmup(max(1, s // 20), "0.1", H.constant("0.1")),
        H.warmup(max(1, s // 20), "0.1", H.exponential("0.1", "0.99")),
    ]


def random_sequence(rng, pool, length, max_segments=3):
    cuts = sorted(rng.sample(range(1, length), min(length - 1, rng.randint(0, max_segments - 1))))
    bounds = [0, *cuts, length]
    segs = [Segment(rng.choice(pool), rng.randint(0, 3), b - a) for a, b in zip(bounds, bounds[1:])]
    return HpSequence("lr", tuple(segs))


def random_space(rng, max_trials=50, max_steps=2000):
    """Trials growing out of each other: a random prefix of an earlier trial plus a fresh tail."""
    steps_cap = rng.randint(2, max_steps)
    pool = lr_pool(steps_cap)
    with_bs = rng.random() < 0.5
    bs_pool = [H.constant(128), H.multistep([128, 256], [max(1, steps_cap // 2)])]
    out = []
    for _ in range(rng.randint(1, max_trials)):
        length = rng.randint(1, steps_cap)
        if out and rng.random() < 0.7:
            parent = rng.choice(out)
            cut = rng.randint(0, min(length, parent.total_steps))
            tail = random_sequence(rng, pool, length - cut) if length > cut else None
            if cut == 0:
                lr = tail
            else:
                head = parent.sequences["lr"]
                head = split_at(head, cut)[0] if cut < head.length else head
                lr = HpSequence("lr", head.segments + (tail.segments if tail else ()))
            bs_fn = parent.sequences["bs"].segments[0].function if with_bs else None
        else:
            lr = random_sequence(rng, pool, length)
            bs_fn = rng.choice(bs_pool) if with_bs else None
        seqs = {"lr": lr}
        if with_bs:
            seqs["bs"] = HpSequence.of("bs", bs_fn, length)
        out.append(TrialConfig(seqs, length))
    return out


def random_tree_space(rng, max_trials=10, max_steps=200):
    """Constant-segment trials forming a random tree; every new tail uses fresh values."""
    fresh = iter(range(1, 10**6))
    trials = []
    for _ in range(rng.randint(1, max_trials)):
        length = rng.randint(1, max_steps)
        if trials and rng.random() < 0.8:
            parent = rng.choice(trials)
            cut = rng.randint(0, min(length, parent.total_steps))
        else:
            parent, cut = None, 0
        segs = ()
        if cut:
            head = parent.sequences["lr"]
            segs = (split_at(head, cut)[0] if cut < head.length else head).segments
        if length > cut:
            segs += (Segment(H.constant(next(fresh)), 0, length - cut),)
        trials.append(TrialConfig({"lr": HpSequence("lr", segs)}, length))
    return trials


def fixed_grid(configs):
    return lambda: GridTuner(list(configs))


# ------------------------------------------------------------------ criteria


def test_01_four_node_plan_stages():
    t0 = time.perf_counter()
    plan, (h1, h2, h3, h4) = four_node_plan()
    tree = build_stage_tree(plan)
    got = {(s.node, s.start, s.end, s.resume and (s.resume.node, s.resume.step)) for s in tree.stages.values()}
    want = {
        (h1.id, 10, 15, (h1.id, 10)),
        (h2.id, 20, 25, (h2.id, 20)),
        (h3.id, 20, 35, (h1.id, 20)),
    }
    roots = {s.key for s in tree.roots}
    ok = got == want and roots == {(n, a, b) for n, a, b, _ in want}
    verdict(1, "four-node plan -> expected stage set", ok, f"{len(got)} stages, H3 [20,35) resumes H1@20", time.perf_counter() - t0, 1)


def test_02_stage_tree_oracle():
    t0 = time.perf_counter()
    bad, requests = [], 0
    for seed in range(1000):
        rng = random.Random(seed)
        plan = random_plan(rng, max_nodes=40, max_requests=8, ckpt_prob=rng.choice([0.0, 0.3, 1.0]))
        tree = build_stage_tree(plan)
        for nid, r in plan.pending_requests():
            requests += 1
            pieces, resume = oracle_walk(plan, nid, r.end_step)
            path = tree.request_paths[r.request_id]
            head = path[0].resume and (path[0].resume.node, path[0].resume.step)
            if merged_intervals(path) != pieces or head != resume:
                bad.append((seed, r.request_id))
    verdict(2, "stage tree vs backward-walk oracle", not bad, f"1000 plans, {requests} requests, {len(bad)} mismatches", time.perf_counter() - t0, 30)


def test_03_merge_rate_oracle():
    t0 = time.perf_counter()
    bad, trials = [], 0
    for seed in range(500):
        rng = random.Random(10_000 + seed)
        space = random_space(rng)
        trials += len(space)
        toks = [trial_tokens(c) for c in space]
        want = Fraction(sum(len(t) for t in toks), brute_unique_steps(toks))
        if merge_rate(space) != want:
            bad.append(seed)
    verdict(3, "merge rate vs brute-force prefix dedup", not bad, f"500 spaces, {trials} trials, {len(bad)} mismatches", time.perf_counter() - t0, 60)


def grid_spaces(count, seed=0):
    rng = random.Random(seed)
    for _ in range(count):
        steps = rng.randint(60, 300)
        lr = rng.sample(
            [
                H.constant("0.1"),
                H.constant("0.05"),
                H.step_decay("0.1", "0.1", [steps // 2]),
                H.step_decay("0.1", "0.1", [steps // 3, 2 * steps // 3]),
                H.multistep(["0.1", "0.05"], [steps // 4]),
                H.exponential("0.1", "0.98"),
                H.warmup(steps // 10, "0.1", H.constant("0.1")),
            ],
            rng.randint(1, 4),
        )
        bs = rng.sample([H.constant(128), H.constant(256), H.multistep([128, 256], [steps // 2])], rng.randint(1, 2))
        yield grid({"lr": lr, "bs": bs}, steps), rng.randint(1, 4)


def test_04_savings_law():
    t0 = time.perf_counter()
    exact, near, worst = [], [], 0.0
    for i, (configs, workers) in enumerate(grid_spaces(20)):
        p = merge_rate(configs)
        studies = [StudySetup("g", fixed_grid(configs))]
        a, b = both_modes(f"grid{i}", studies, CostModel(step_seconds=1, workers=workers, **ZERO))
        exact.append(Fraction(b.busy_us, a.busy_us) == p)
        a, b = both_modes(f"grid{i}+ovh", studies, CostModel(step_seconds=1, workers=workers, **OVERHEAD))
        err = abs(b.busy_us / a.busy_us - float(p)) / float(p)
        worst = max(worst, err)
        near.append(err <= 0.10)
    ok = all(exact) and all(near)
    detail = f"{sum(exact)}/20 exact at zero overhead, {sum(near)}/20 within 10% with overheads (worst {worst:.1%})"
    verdict(4, "GPU-hour ratio tracks merge rate p", ok, detail, time.perf_counter() - t0, 120)


def test_05_metric_equivalence():
    t0 = time.perf_counter()
    rng = random.Random(5)
    for i in range(6):
        space = {"lr": [H.constant(v) for v in ("0.1", "0.05")] + [H.step_decay("0.1", "0.1", [40])], "bs": [H.constant(128), H.constant(64)]}
        configs = grid(space, 80)
        cost = CostModel(step_seconds=Fraction(1, 2), workers=rng.randint(1, 4), **OVERHEAD)
        studies = [
            StudySetup("sha", lambda c=configs: SHATuner(c, 2, 10, 80), eval_interval=20),
            StudySetup("med", lambda c=configs: MedianStopTuner(c, [20, 40]), arrival_s=rng.randint(0, 50)),
            StudySetup("asha", lambda c=configs: ASHATuner(c, 2, 10, 80, 2), arrival_s=rng.randint(0, 50)),
        ]
        both_modes(f"mixed{i}", studies, cost, seed=i)
    studies = sum(n for _, _, n in MET)
    bad = [label for label, ok, _ in MET if not ok]
    verdict(5, "metric histories equal across modes", not bad, f"{len(MET)} simulation pairs so far, {studies} studies, {len(bad)} differences", time.perf_counter() - t0)


def sha448():
    lr = [H.constant(v) for v in ("0.2", "0.1", "0.05")] + [H.step_decay("0.1", "0.1", [m]) for m in (30, 60, 90)] + [
        H.exponential("0.1", "0.97"),
        H.warmup(10, "0.1", H.constant("0.1")),
    ]
    bs = [H.constant(b) for b in (32, 64, 96, 128, 160, 192, 224, 256)]
    wd = [H.constant(w) for w in ("0", "0.0001", "0.0002", "0.0005", "0.001", "0.002", "0.005")]
    return grid({"lr": lr, "bs": bs, "wd": wd}, 120)


def test_06_sha_structure():
    t0 = time.perf_counter()
    configs = sha448()
    studies = [StudySetup("sha", lambda: SHATuner(configs, reduction=4, min_steps=15, max_steps=120))]
    a, b = both_modes("sha448", studies, CostModel(step_seconds=Fraction(1, 10), workers=8, **OVERHEAD))
    sa, sb = a.summary, b.summary
    counts = sa["studies"]["sha"]["survivors"]
    rate = Fraction(sa["merge_rate_executed"])
    ok = (
        len(configs) == 448
        and counts == [448, 112, 28, 7]
        and sb["studies"]["sha"]["survivors"] == counts
        and sa["executed_total_steps"] == sb["executed_total_steps"]
        and sa["merge_rate_executed"] == sb["merge_rate_executed"]
        and rate >= 1
    )
    detail = f"survivors {counts}, executed steps {sa['executed_total_steps']} in both modes, executed merge rate {float(rate):.3f}"
    verdict(6, "SHA 448 rung structure", ok, detail, time.perf_counter() - t0, 60)


def test_07_asha_reference():
    t0 = time.perf_counter()
    bad = promotions = 0
    for seed in range(200):
        rng = random.Random(seed)
        table = {trial_name(i): [round(rng.random(), 2) for _ in range(3)] for i in range(20)}
        par = 1 + seed % 4
        tuner = ASHATuner(grid({"lr": [H.constant(i + 1) for i in range(20)]}, 36), 3, 4, 36, par)
        got = asha_drive(tuner, table, seed)
        want = asha_reference(table, 3, [4, 12, 36], par, seed)
        promotions += len(want[0])
        bad += got != want or not tuner.finished
    verdict(7, "ASHA promotions vs sequential reference", bad == 0, f"200 completion orders, {promotions} promotions, {bad} mismatches", time.perf_counter() - t0)


def test_08_scheduler_bounds():
    t0 = time.perf_counter()
    bad = []
    for seed in range(200):
        rng = random.Random(seed)
        configs = random_tree_space(rng)
        plan = plan_from_configs(configs)
        tree = build_stage_tree(plan)
        unit = lambda s: Fraction(1)  # noqa: E731
        cp = sum(s.end - s.start for s in critical_path(tree, unit))
        longest = max(c.total_steps for c in configs)
        unique = brute_unique_steps([trial_tokens(c) for c in configs])
        studies = [StudySetup("t", fixed_grid(configs))]
        many = run(studies, Mode.STAGE, CostModel(step_seconds=1, workers=max(1, len(tree.leaves())), **ZERO))
        one = run(studies, Mode.STAGE, CostModel(step_seconds=1, workers=1, **ZERO))
        if not (cp == longest and many.end_to_end_us == cp * 10**6 and one.end_to_end_us == unique * 10**6):
            bad.append(seed)
    verdict(8, "makespan = critical path / unique work", not bad, f"200 random trees, {len(bad)} violations", time.perf_counter() - t0)


def test_09_multi_study_sharing():
    t0 = time.perf_counter()
    configs = grid(
        {"lr": [H.constant("0.1"), H.step_decay("0.1", "0.1", [50]), H.step_decay("0.1", "0.1", [100]), H.exponential("0.1", "0.98")], "bs": [H.constant(128), H.constant(256)]},
        150,
    )
    lines, ok = [], True
    for cost_kw in (ZERO, OVERHEAD):
        cost = CostModel(step_seconds=1, workers=4, **cost_kw)
        single, _ = both_modes("k1", [StudySetup("s0", fixed_grid(configs))], cost)
        for k in (2, 4, 8):
            studies = [StudySetup(f"s{i}", fixed_grid(configs), arrival_s=37 * i) for i in range(k)]
            a, b = both_modes(f"k{k}", studies, cost)
            q = kwise_merge_rate([configs] * k)
            toks = [trial_tokens(c) for c in configs] * k
            brute = Fraction(sum(len(t) for t in toks), brute_unique_steps(toks))
            good = a.busy_us == single.busy_us and q == brute
            if cost_kw is ZERO:
                good = good and Fraction(b.busy_us, a.busy_us) == q
            ok = ok and good
            lines.append(f"K={k}{'' if cost_kw is ZERO else '+ovh'} q={float(q):.3f}")
    verdict(9, "K shifted copies share one plan", ok, ", ".join(lines), time.perf_counter() - t0, 120)


def test_10_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    spec = {
        "schema": 1,
        "seed": 11,
        "workers": 3,
        "cost": {"step_seconds": 0.1, "save_seconds": 5, "load_seconds": 5, "eval_seconds": 2},
        "studies": [
            {
                "name": "sha",
                "max_steps": 120,
                "eval_interval": 30,
                "search_space": {"lr": ["Constant(0.1)", "Constant(0.05)", "Exponential(0.1, 0.97)"], "bs": ["Constant(128)", "MultiStep(128, [60], 2)"]},
                "tuner": {"kind": "sha", "reduction": 2, "min": 30},
            },
            {
                "name": "asha",
                "max_steps": 120,
                "arrival_offset": 12.5,
                "search_space": {"lr": ["Constant(0.1)", "Constant(0.02)"], "bs": ["Constant(128)", "Constant(64)"]},
                "tuner": {"kind": "asha", "reduction": 2, "min": 30, "parallelism": 2},
            },
        ],
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    same = True
    for mode in ("stage", "trial"):
        files = []
        for rep in (1, 2):
            trace = tmp_path / f"{mode}{rep}.csv"
            assert cli(["run", str(path), "--mode", mode, "--trace", str(trace)]) == 0
            files.append((trace.read_bytes(), trace.with_name(trace.stem + ".summary.json").read_bytes()))
        same = same and files[0] == files[1]
    verdict(10, "repeated run gives byte-identical files", same, "trace and summary, stage and trial modes", time.perf_counter() - t0)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
