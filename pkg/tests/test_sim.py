import copy
from collections import defaultdict
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageplan import hpseq as H
from stageplan.errors import ConfigError, IntegrityError
from stageplan.plan import Request, SearchPlan, TrialRequest, plan_from_configs
from stageplan.sched import Assignment, stage_work
from stageplan.sim import (
    CostModel,
    Kind,
    MetricReport,
    Mode,
    StudySetup,
    SyntheticOracle,
    aggregate,
    expand_assignment,
    read_trace,
    run,
    trace_csv,
    worker_execute,
    write_trace,
)
from stageplan.sim.cost import prefix_signature, to_us
from stageplan.stagetree import Ckpt, build_stage_tree
from stageplan.tuners import GridTuner, SHATuner, grid

from strategies import four_node_plan

COST = CostModel(step_seconds=1, save_seconds=5, load_seconds=3, eval_seconds=2, workers=2)


def study(name, candidates, steps, tuner=GridTuner, **kw):
    space = {"lr": [H.constant(c) for c in candidates]}
    return StudySetup(name, lambda: tuner(grid(space, steps)), **kw)


class TestExpand:
    def branch_assignment(self):
        plan, (h1, h2, h3, h4) = four_node_plan()
        tree = build_stage_tree(plan)
        path = tree.request_paths["r35"]
        return plan, h1, h3, Assignment(0, 0, plan.compat_key, path[0].resume, stage_work(plan, path))

    def test_resume_from_checkpoint(self):
        plan, h1, h3, a = self.branch_assignment()
        acts = expand_assignment(plan, a, COST)
        assert [(x.kind, x.node, x.start, x.end, x.duration_us) for x in acts] == [
            (Kind.LOAD, h1.id, 20, 20, 3_000_000),
            (Kind.TRAIN, h3.id, 20, 35, 15_000_000),
            (Kind.SAVE, h3.id, 35, 35, 5_000_000),
            (Kind.EVAL, h3.id, 35, 35, 2_000_000),
        ]

    def test_loaded_model_skips_load(self):
        plan, h1, h3, a = self.branch_assignment()
        acts = expand_assignment(plan, a, COST, loaded=(plan.compat_key, Ckpt(h1.id, 20)))
        assert acts[0].kind is Kind.TRAIN

    def test_missing_checkpoint(self):
        plan, h1, h3, a = self.branch_assignment()
        bad = Assignment(0, 0, plan.compat_key, Ckpt(h1.id, 17), a.stages)
        with pytest.raises(IntegrityError):
            expand_assignment(plan, bad, COST)
        with pytest.raises(IntegrityError):
            expand_assignment(plan, Assignment(0, 0, "k", None, a.stages), COST)

    def test_eval_only_stage(self):
        plan, (h1, *_) = four_node_plan()
        h1.requests.append(Request("r10", 10, "s", "t9"))
        plan._requests["r10"] = h1.id
        tree = build_stage_tree(plan)
        path = tree.request_paths["r10"]
        a = Assignment(0, 0, plan.compat_key, path[0].resume, stage_work(plan, path))
        acts = expand_assignment(plan, a, COST)
        assert [x.kind for x in acts] == [Kind.LOAD, Kind.EVAL]
        events, end = worker_execute(plan, a, COST, SyntheticOracle())
        assert end == 5_000_000 and 10 in h1.metrics

    def test_worker_execute_records(self):
        plan, h1, h3, a = self.branch_assignment()
        events, end = worker_execute(plan, a, COST, SyntheticOracle(), start_us=7)
        assert end == 7 + 25_000_000
        assert [e.time_us for e in events] == [7, 3_000_007, 18_000_007, 23_000_007]
        assert 35 in h3.ckpt and 35 in h3.metrics


class TestCost:
    def bs_plan(self):
        bs = H.multistep([128, 256], [70])
        cfg = H.TrialConfig({"lr": H.HpSequence.of("lr", H.constant("0.1"), 100), "bs": H.HpSequence.of("bs", bs, 100)}, 100)
        return plan_from_configs([cfg])

    def test_batch_size_cost(self):
        c = Fraction(3, 7)
        cost = CostModel(step_seconds=c, batch_scale={128: 1, 256: 2})
        plan = self.bs_plan()
        total = sum(cost.train_seconds(plan, n.id, n.start_step, plan.used_extent()[n.id]) for n in plan.nodes.values())
        assert total == 70 * c + 30 * 2 * c

    def test_batch_reference(self):
        cost = CostModel(step_seconds=1, batch_reference=128)
        assert cost.multiplier(Fraction(256)) == 2 and cost.multiplier(None) == 1

    def test_validation(self):
        with pytest.raises(ConfigError):
            CostModel(workers=0)
        with pytest.raises(ConfigError):
            CostModel(save_seconds=-1)

    def test_to_us_rounds_half_even(self):
        assert to_us(Fraction(1, 2_000_000)) == 0
        assert to_us(Fraction(3, 2_000_000)) == 2


class TestOracle:
    def test_shared_prefix_shares_metrics(self):
        a = H.TrialConfig.from_functions({"lr": H.constant("0.1")}, 30)
        b = H.TrialConfig({"lr": H.HpSequence("lr", (H.Segment(H.constant("0.1"), 0, 20), H.Segment(H.constant("0.2"), 0, 10)))}, 30)
        plan = plan_from_configs([a, b])
        oracle = SyntheticOracle(seed=4)
        nodes = sorted(plan.nodes.values(), key=lambda n: n.start_step)
        root, child = nodes[0], nodes[-1]
        assert prefix_signature(plan, root.id, 20) == prefix_signature(plan, child.id, 20)
        assert oracle.at(plan, root.id, 25) != oracle.at(plan, child.id, 25)
        assert oracle.at(plan, root.id, 25) == SyntheticOracle(seed=4).at(copy.deepcopy(plan), root.id, 25)
        assert oracle.at(plan, root.id, 25) != SyntheticOracle(seed=5).at(plan, root.id, 25)


class TestAggregate:
    def plan_with_merged(self, k=3):
        cfg = H.TrialConfig.from_functions({"lr": H.constant("0.1")}, 20)
        plan = SearchPlan("k", {"lr"})
        for i in range(k):
            plan.insert_trial(TrialRequest(f"r{i}", "s", f"t{i}", cfg))
        return plan

    def test_fan_out(self):
        plan = self.plan_with_merged(3)
        (node,) = plan.nodes
        out = aggregate(plan, MetricReport(node, 20, {"acc": 0.7}))
        assert sorted(r.trial_id for r, _ in out) == ["t0", "t1", "t2"]
        assert all(m == {"acc": 0.7} for _, m in out)
        assert aggregate(plan, MetricReport(node, 20, {"acc": 0.7})) == []

    @settings(max_examples=40, deadline=None)
    @given(st.permutations(list(range(6))))
    def test_order_independent_and_idempotent(self, order):
        plan, (h1, h2, h3, h4) = four_node_plan()
        reports = [
            MetricReport(h1.id, 15, {"acc": 0.1}),
            MetricReport(h2.id, 25, {"acc": 0.2}, "c25"),
            MetricReport(h3.id, 30, checkpoint="c30"),
            MetricReport(h3.id, 35, {"acc": 0.3}),
            MetricReport(h1.id, 12, {"acc": 0.05}),
            MetricReport(h3.id, 35, checkpoint="c35"),
        ]
        ref = copy.deepcopy(plan)
        for r in reports:
            aggregate(ref, r)
        done = []
        for i in order:
            done += aggregate(plan, reports[i])
            aggregate(plan, reports[i])
        assert plan.to_json() == ref.to_json()
        assert sorted(r.request_id for r, _ in done) == ["r15", "r25", "r35"]


def _check_trace(result, workers):
    per = defaultdict(list)
    for e in result.events:
        if e.kind in (Kind.LOAD, Kind.TRAIN, Kind.SAVE, Kind.EVAL):
            per[e.worker].append((e.time_us, e.time_us + e.duration_us))
    for spans in per.values():
        spans.sort()
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert a1 <= b0
    assert result.end_to_end_us * workers >= result.busy_us


class TestSimulation:
    @pytest.mark.parametrize("workers", [1, 3])
    def test_single_trial_same_in_both_modes(self, workers):
        cost = CostModel(step_seconds=1, save_seconds=5, load_seconds=3, eval_seconds=2, workers=workers)
        s = [study("a", ["0.1"], 40, eval_interval=10)]
        st_, tr = run(s, Mode.STAGE, cost), run(s, Mode.TRIAL, cost)
        assert st_.busy_us == tr.busy_us and st_.end_to_end_us == tr.end_to_end_us
        assert st_.histories() == tr.histories()

    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_identical_trials_ratio_is_n(self, n):
        s = [study("a", ["0.1"] * n, 30)]
        cost = CostModel.zero_overhead(workers=2)
        st_, tr = run(s, "stage", cost), run(s, "trial", cost)
        assert Fraction(tr.busy_us, st_.busy_us) == n
        assert st_.summary["executed_unique_steps"] == 30 and st_.summary["executed_total_steps"] == 30 * n

    def test_deterministic(self, tmp_path):
        s = [study("a", ["0.1", "0.2", "0.3"], 60, tuner=lambda c: SHATuner(c, 2, 15, 60), eval_interval=15)]
        a, b = run(s, "stage", COST, seed=3), run(s, "stage", COST, seed=3)
        assert trace_csv(a.events) == trace_csv(b.events) and a.summary == b.summary
        write_trace(tmp_path / "t.csv", a.events)
        assert read_trace(tmp_path / "t.csv") == a.events

    @pytest.mark.parametrize("mode", ["stage", "trial"])
    @pytest.mark.parametrize("workers", [1, 2, 4])
    def test_trace_invariants(self, mode, workers):
        cost = CostModel(step_seconds=1, save_seconds=2, load_seconds=1, eval_seconds=1, workers=workers)
        s = [
            study("a", ["0.1", "0.2", "0.3", "0.4"], 40, tuner=lambda c: SHATuner(c, 2, 10, 40), eval_interval=10),
            study("b", ["0.1", "0.5"], 40, arrival_s=7),
        ]
        res = run(s, mode, cost)
        _check_trace(res, workers)
        assert all(t.finished for t in res.tuners.values())

    def test_metric_equivalence(self):
        s = [study("a", ["0.1", "0.2", "0.1", "0.3"], 50, tuner=lambda c: SHATuner(c, 2, 10, 50), eval_interval=10)]
        for workers in (1, 3):
            cost = CostModel(step_seconds=1, save_seconds=1, load_seconds=1, eval_seconds=1, workers=workers)
            a, b = run(s, "stage", cost), run(s, "trial", cost)
            assert a.histories() == b.histories()
            assert a.summary["studies"]["a"]["winners"] == b.summary["studies"]["a"]["winners"]

    def test_duplicate_names(self):
        with pytest.raises(ConfigError):
            run([study("a", ["1"], 5), study("a", ["2"], 5)], "stage", COST)

    def test_schedule_calls_batched(self):
        s = [study("a", [str(i) for i in range(1, 21)], 10)]
        res = run(s, "stage", CostModel.zero_overhead(workers=1))
        # all 20 requests arrive at t=0 and cost one schedule call
        assert res.trigger.kinds["NewRequest"] >= 20
        assert res.summary["schedule_calls"] < res.trigger.events
