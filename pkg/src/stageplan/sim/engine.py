"""Deterministic discrete-event simulation of a study run.

One event loop advances simulated workers in integer microseconds.  Events
sharing a timestamp are drained in ``(worker, sequence)`` order, tuner
results are delivered, and then the scheduler runs once if anything it cares
about happened.

In STAGE mode all studies sharing a compat key share one plan and the
critical-path scheduler assigns work.  In TRIAL mode every trial gets a plan
of its own, so nothing is merged, and requests run first-come first-served.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

from ..analysis import MergeCount, merge_count
from ..errors import ConfigError, IntegrityError, ProtocolError, QueryError
from ..hpseq import TrialConfig
from ..plan import (
    Immediate,
    MetricRecord,
    NewCheckpoint,
    NewRequest,
    PlanEvent,
    Request,
    RequestCompleted,
    SearchPlan,
    TrialRequest,
    compat_key,
)
from ..sched import (
    Assignment,
    ScheduleTrigger,
    StageDone,
    WorkerIdle,
    WorkerState,
    fifo_schedule,
    schedule,
)
from ..stagetree import Ckpt, InFlight, Stage
from ..tuners import Done, Extend, Stop, Submit, Tuner, TunerAction
from .cost import US, CostModel, SyntheticOracle, to_us
from .trace import Kind, TraceEvent, busy_us

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    STAGE = "stage"
    TRIAL = "trial"


@dataclass
class StudySetup:
    """A study as the simulator sees it: identity, tuner factory and timing."""

    name: str
    make_tuner: Callable[[], Tuner]
    model: str = "model"
    dataset: str = "data"
    eval_interval: int | None = None
    arrival_s: Fraction = Fraction(0)
    steps_per_iteration: int = 1

    def __post_init__(self) -> None:
        if "/" in self.name or "#" in self.name or not self.name:
            raise ConfigError(f"study name {self.name!r} must be non-empty without '/' or '#'")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise ConfigError("eval interval must be >= 1 step")
        self.arrival_s = Fraction(self.arrival_s)
        if self.arrival_s < 0:
            raise ConfigError("arrival offset must be non-negative")


@dataclass
class TrialRecord:
    study: str
    trial_id: str
    config: TrialConfig
    history: list[tuple[int, MetricRecord]] = field(default_factory=list)
    requested: int = 0
    reached: int = 0
    stopped: bool = False

    @property
    def gid(self) -> str:
        return f"{self.study}/{self.trial_id}"


@dataclass(frozen=True)
class Action:
    kind: Kind
    node: int
    start: int
    end: int
    duration_us: int
    stage: int


@dataclass(frozen=True)
class MetricReport:
    """What a worker sends the aggregator after an evaluation or a save."""

    node: int
    step: int
    metrics: MetricRecord | None = None
    checkpoint: str | None = None


def ckpt_handle(plan_key: str, node: int, step: int) -> str:
    return f"{plan_key}:H{node}@{step}"


def aggregate(plan: SearchPlan, report: MetricReport) -> list[tuple[Request, MetricRecord]]:
    """Apply a worker report; returns every request it completed with its metrics.

    Repeating a report is a no-op, and reports commute: the resulting plan
    does not depend on the order in which they arrive.
    """
    if report.checkpoint is not None:
        plan.record_checkpoint(report.node, report.step, report.checkpoint)
    if report.metrics is None:
        return []
    done = plan.record_metrics(report.node, report.step, report.metrics)
    rec = plan.nodes[report.node].metrics[report.step]
    return [(r, rec) for r in done]


def expand_assignment(
    plan: SearchPlan, a: Assignment, cost: CostModel, loaded: tuple[str, Ckpt] | None = None
) -> list[Action]:
    """Timed actions for an assignment: optional LOAD, then TRAIN/SAVE/EVAL per stage."""
    out: list[Action] = []
    if a.resume is not None:
        node = plan.node(a.resume.node)
        if a.resume.step not in node.ckpt:
            raise IntegrityError(f"assignment {a.id} resumes from missing checkpoint H{a.resume.node}@{a.resume.step}")
        if loaded != (a.plan_key, a.resume):
            out.append(Action(Kind.LOAD, a.resume.node, a.resume.step, a.resume.step, to_us(cost.load_seconds), 0))
    elif a.stages and a.stages[0].start != 0:
        raise IntegrityError(f"assignment {a.id} starts at step {a.stages[0].start} without a checkpoint")
    for i, sw in enumerate(a.stages):
        saves, evals = set(sw.save_at), set(sw.eval_at)
        cur = sw.start
        for p in sorted(saves | evals | {sw.end}):
            if p > cur:
                dur = to_us(cost.train_seconds(plan, sw.node, cur, p))
                out.append(Action(Kind.TRAIN, sw.node, cur, p, dur, i))
                cur = p
            if p in saves:
                out.append(Action(Kind.SAVE, sw.node, p, p, to_us(cost.save_seconds), i))
            if p in evals:
                out.append(Action(Kind.EVAL, sw.node, p, p, to_us(cost.eval_seconds), i))
    return out


def apply_action(plan: SearchPlan, key: str, action: Action, oracle: SyntheticOracle) -> list[tuple[Request, MetricRecord]]:
    """Effects of a finished action on the plan."""
    if action.kind is Kind.TRAIN:
        node = plan.nodes[action.node]
        if node.runtime is None and action.end > action.start:
            node.runtime = Fraction(action.duration_us, US * (action.end - action.start))
        return []
    if action.kind is Kind.SAVE:
        return aggregate(plan, MetricReport(action.node, action.end, checkpoint=ckpt_handle(key, action.node, action.end)))
    if action.kind is Kind.EVAL:
        return aggregate(plan, MetricReport(action.node, action.end, oracle.at(plan, action.node, action.end)))
    return []


def _event(time_us: int, worker: int, action: Action, note: str = "") -> TraceEvent:
    return TraceEvent(time_us, worker, action.kind, action.node, action.start, action.end, action.duration_us, note)


def worker_execute(
    plan: SearchPlan,
    assignment: Assignment,
    cost: CostModel,
    oracle: SyntheticOracle,
    start_us: int = 0,
    loaded: tuple[str, Ckpt] | None = None,
) -> tuple[list[TraceEvent], int]:
    """Run one assignment to completion on its own; returns trace events and end time."""
    t = start_us
    events = []
    for act in expand_assignment(plan, assignment, cost, loaded):
        events.append(_event(t, assignment.worker, act))
        t += act.duration_us
        apply_action(plan, assignment.plan_key, act, oracle)
    return events, t


@dataclass
class _Running:
    assignment: Assignment
    actions: deque[Action]
    flights: dict[int, InFlight]


@dataclass
class SimulationResult:
    mode: Mode
    events: list[TraceEvent]
    summary: dict[str, Any]
    trials: dict[str, TrialRecord]
    plans: dict[str, SearchPlan]
    tuners: dict[str, Tuner]
    trigger: ScheduleTrigger

    @property
    def busy_us(self) -> int:
        return self.summary["busy_us"]

    @property
    def end_to_end_us(self) -> int:
        return self.summary["end_to_end_us"]

    def histories(self) -> dict[str, list[tuple[int, MetricRecord]]]:
        return {gid: list(r.history) for gid, r in sorted(self.trials.items())}


class Simulation:
    def __init__(
        self,
        studies: Sequence[StudySetup],
        mode: Mode | str,
        cost: CostModel,
        oracle: SyntheticOracle | None = None,
        seed: int = 0,
        split_every: int | None = None,
    ):
        names = [s.name for s in studies]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate study names in {names}")
        self.studies = {s.name: s for s in studies}
        self.mode = Mode(mode)
        self.cost = cost
        self.seed = seed
        self.oracle = oracle if oracle is not None else SyntheticOracle(seed=seed)
        self.split_every = split_every

        self.tuners: dict[str, Tuner] = {}
        self.keys: dict[str, str] = {}
        self.plans: dict[str, SearchPlan] = {}
        self.trials: dict[str, TrialRecord] = {}
        self.workers = [WorkerState(i) for i in range(cost.workers)]
        self.running: dict[int, _Running] = {}
        self.queue: list[tuple[str, str]] = []
        self.events: list[TraceEvent] = []
        self.deliveries: deque[tuple[Request, MetricRecord]] = deque()
        self.heap: list[tuple[int, int, int, str, Any]] = []
        self.seq = 0
        self.now = 0
        self.next_assignment = 0
        self.trigger = ScheduleTrigger(self._schedule)

    # ------------------------------------------------------------ plumbing

    def _push(self, time_us: int, worker: int, kind: str, payload: Any) -> None:
        heapq.heappush(self.heap, (time_us, worker, self.seq, kind, payload))
        self.seq += 1

    def _plan_key(self, rec: TrialRecord) -> str:
        base = self.keys[rec.study]
        return base if self.mode is Mode.STAGE else f"{base}#{rec.gid}"

    def _plan(self, key: str, rec: TrialRecord) -> SearchPlan:
        plan = self.plans.get(key)
        if plan is None:
            plan = self.plans[key] = SearchPlan(key, rec.config.hp_set)
            plan.listeners.append(self._on_plan_event)
        elif plan.hp_set != rec.config.hp_set:
            raise ConfigError(f"hp set mismatch for plan {key!r}")
        interval = self.studies[rec.study].eval_interval
        if interval:
            plan.eval_intervals.add(interval)
        return plan

    def _on_plan_event(self, event: PlanEvent) -> None:
        if isinstance(event, RequestCompleted):
            self.deliveries.append((event.request, event.metrics))
        elif isinstance(event, (NewRequest, NewCheckpoint)):
            self.trigger.on_event(event)

    def _estimate(self, plan: SearchPlan, stage: Stage) -> Fraction:
        node = plan.nodes[stage.node]
        if node.runtime is not None:
            return node.runtime
        return self.cost.node_seconds_per_step(plan, stage.node, stage.start)

    # ------------------------------------------------------------ tuners

    def _request(self, rec: TrialRecord, end: int) -> None:
        if end <= rec.requested:
            raise ProtocolError(f"{rec.gid}: request to {end} does not extend {rec.requested}")
        rec.requested = end
        key = self._plan_key(rec)
        plan = self._plan(key, rec)
        rid = f"{rec.gid}@{end}"
        out = plan.insert_trial(TrialRequest(rid, rec.study, rec.gid, rec.config.truncate(end)))
        if isinstance(out, Immediate):
            self.deliveries.append((Request(rid, end, rec.study, rec.gid), out.metrics))
        elif self.mode is Mode.TRIAL:
            self.queue.append((key, rid))

    def _apply(self, study: str, actions: Iterable[TunerAction]) -> None:
        for act in actions:
            if isinstance(act, Submit):
                gid = f"{study}/{act.trial_id}"
                if gid in self.trials:
                    raise ProtocolError(f"trial {gid} submitted twice")
                rec = self.trials[gid] = TrialRecord(study, act.trial_id, act.config)
                self._request(rec, act.end_step)
            elif isinstance(act, Extend):
                rec = self._trial(study, act.trial_id)
                self._request(rec, act.end_step)
            elif isinstance(act, Stop):
                rec = self._trial(study, act.trial_id)
                rec.stopped = True
                self.plans[self._plan_key(rec)].cancel_trial(rec.gid)
            elif isinstance(act, Done):
                logger.info("study %s done at t=%.3fs, winners %s", study, self.now / US, list(act.winners))

    def _trial(self, study: str, tid: str) -> TrialRecord:
        try:
            return self.trials[f"{study}/{tid}"]
        except KeyError:
            raise ProtocolError(f"unknown trial {study}/{tid}") from None

    def _deliver(self) -> None:
        while self.deliveries:
            req, metrics = self.deliveries.popleft()
            rec = self.trials.get(req.trial_id)
            if rec is None or rec.stopped or any(s == req.end_step for s, _ in rec.history):
                continue
            rec.history.append((req.end_step, dict(metrics)))
            rec.reached = max(rec.reached, req.end_step)
            self._apply(rec.study, self.tuners[rec.study].on_result(rec.trial_id, req.end_step, metrics))

    # ------------------------------------------------------------ workers

    def _flights(self) -> dict[str, list[InFlight]]:
        out: dict[str, list[InFlight]] = {}
        for run in self.running.values():
            out.setdefault(run.assignment.plan_key, []).extend(run.flights.values())
        return out

    def _schedule(self) -> list[Assignment]:
        idle = [w.id for w in self.workers if w.assignment is None]
        if not idle:
            return []
        flights = self._flights()
        if self.mode is Mode.STAGE:
            plans = [p for p in self.plans.values() if p.pending_requests()]
            return schedule(plans, flights, idle, self._estimate, first_id=self.next_assignment, split_every=self.split_every)
        self.queue = [(k, r) for k, r in self.queue if self._is_pending(k, r)]
        return fifo_schedule(self.plans, self.queue, flights, idle, first_id=self.next_assignment)

    def _is_pending(self, key: str, rid: str) -> bool:
        plan = self.plans[key]
        try:
            node = plan.nodes[plan.request_node(rid)]
        except QueryError:
            return False
        return any(r.request_id == rid and r.end_step not in node.metrics for r in node.requests)

    def _start(self, a: Assignment) -> None:
        w = self.workers[a.worker]
        if w.assignment is not None:
            raise IntegrityError(f"worker {w.id} already holds assignment {w.assignment}")
        self.next_assignment = max(self.next_assignment, a.id + 1)
        plan = self.plans[a.plan_key]
        actions = deque(expand_assignment(plan, a, self.cost, w.loaded))
        w.assignment = a.id
        note = f"stages={a.text()}" + (f";plan={a.plan_key}" if self.mode is Mode.TRIAL else "")
        self.events.append(TraceEvent(self.now, w.id, Kind.ASSIGN, note=note))
        logger.debug(a.log_line(self.now))
        self.running[w.id] = _Running(a, actions, {i: s.in_flight() for i, s in enumerate(a.stages)})
        self._next_action(w.id)

    def _next_action(self, wid: int) -> None:
        run = self.running[wid]
        if not run.actions:
            a = run.assignment
            del self.running[wid]
            w = self.workers[wid]
            w.assignment = None
            last = a.stages[-1]
            w.loaded = (a.plan_key, Ckpt(last.node, last.end))
            self.events.append(TraceEvent(self.now, wid, Kind.IDLE))
            self.trigger.on_event(WorkerIdle(wid))
            return
        act = run.actions[0]
        self.events.append(_event(self.now, wid, act))
        self._push(self.now + act.duration_us, wid, "done", act)

    def _finish_action(self, wid: int, act: Action) -> None:
        run = self.running[wid]
        run.actions.popleft()
        apply_action(self.plans[run.assignment.plan_key], run.assignment.plan_key, act, self.oracle)
        nxt = run.actions[0].stage if run.actions else len(run.assignment.stages)
        for i in [i for i in run.flights if i < nxt]:
            sw = run.assignment.stages[i]
            del run.flights[i]
            self.trigger.on_event(StageDone(run.assignment.plan_key, sw.node, sw.end))
        self._next_action(wid)

    # ------------------------------------------------------------ main loop

    def run(self) -> SimulationResult:
        for s in sorted(self.studies.values(), key=lambda s: (s.arrival_s, s.name)):
            tuner = s.make_tuner()
            self.tuners[s.name] = tuner
            hp_sets = {c.hp_set for c in tuner.configs.values()}
            if len(hp_sets) > 1:
                raise ConfigError(f"study {s.name} mixes hp sets")
            hp = next(iter(hp_sets), frozenset())
            self.keys[s.name] = compat_key(s.model, s.dataset, hp)
            self._push(to_us(s.arrival_s), -1, "arrive", s.name)

        while self.heap:
            self.now = self.heap[0][0]
            while self.heap and self.heap[0][0] == self.now:
                _, wid, _, kind, payload = heapq.heappop(self.heap)
                if kind == "arrive":
                    self._apply(payload, self.tuners[payload].start())
                else:
                    self._finish_action(wid, payload)
                self._deliver()
            for a in self.trigger.flush():
                self._start(a)
            self._deliver()

        stuck = [(k, r.request_id) for k, p in self.plans.items() for _, r in p.pending_requests()]
        if stuck:
            raise IntegrityError(f"simulation stalled with {len(stuck)} pending request(s), e.g. {stuck[0]}")
        return SimulationResult(
            self.mode, self.events, self._summary(), self.trials, self.plans, self.tuners, self.trigger
        )

    # ------------------------------------------------------------ output

    def fingerprint(self) -> str:
        desc = {
            "cost": self.cost.to_json(),
            "workers": self.cost.workers,
            "seed": self.seed,
            "oracle": [self.oracle.tau, self.oracle.noise, self.oracle.metric, self.oracle.seed],
            "studies": [
                {
                    "name": s.name,
                    "key": self.keys[s.name],
                    "eval_interval": s.eval_interval,
                    "arrival_s": str(s.arrival_s),
                    "tuner": self.tuners[s.name].describe(),
                    "configs": hashlib.sha256(
                        "\n".join(c.text() for c in self.tuners[s.name].configs.values()).encode()
                    ).hexdigest(),
                }
                for s in sorted(self.studies.values(), key=lambda s: s.name)
            ],
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def _summary(self) -> dict[str, Any]:
        busy = busy_us(self.events)
        end = max((e.time_us + e.duration_us for e in self.events if e.kind not in (Kind.ASSIGN, Kind.IDLE)), default=0)
        executed = MergeCount(0, 0)
        by_key: dict[str, list[TrialConfig]] = {}
        for rec in self.trials.values():
            if rec.reached:
                by_key.setdefault(self.keys[rec.study], []).append(rec.config.truncate(rec.reached))
        for key in sorted(by_key):
            executed = executed + merge_count(by_key[key])
        trained = sum(e.end - e.start for e in self.events if e.kind is Kind.TRAIN)
        trials = {}
        for gid, rec in sorted(self.trials.items()):
            tuner = self.tuners[rec.study]
            scores = [m[tuner.metric] for _, m in rec.history if tuner.metric in m]
            best = (max(scores) if tuner.mode == "max" else min(scores)) if scores else None
            trials[gid] = {
                "best_metric": best,
                "reached": rec.reached,
                "stopped": rec.stopped,
                "history": [[s, m] for s, m in rec.history],
            }
        studies = {}
        for name, tuner in sorted(self.tuners.items()):
            entry: dict[str, Any] = {
                "tuner": tuner.describe(),
                "finished": tuner.finished,
                "winners": list(tuner.winners),
                "compat_key": self.keys[name],
            }
            if hasattr(tuner, "survivor_counts"):
                entry["survivors"] = tuner.survivor_counts
            studies[name] = entry
        rate = executed.rate
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "fingerprint": self.fingerprint(),
            "workers": self.cost.workers,
            "busy_us": busy,
            "gpu_hours": round(busy / (3600 * US), 9),
            "end_to_end_us": end,
            "end_to_end_s": end / US,
            "merge_rate_executed": f"{rate.numerator}/{rate.denominator}",
            "merge_rate_executed_float": float(rate),
            "executed_total_steps": executed.total,
            "executed_unique_steps": executed.unique,
            "trained_steps": trained,
            "schedule_calls": self.trigger.calls,
            "assignments": self.next_assignment,
            "studies": studies,
            "trials": trials,
        }


def run(
    studies: Sequence[StudySetup],
    mode: Mode | str,
    cost: CostModel,
    oracle: SyntheticOracle | None = None,
    seed: int = 0,
    split_every: int | None = None,
) -> SimulationResult:
    return Simulation(studies, mode, cost, oracle, seed, split_every).run()
