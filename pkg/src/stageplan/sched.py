"""Stateless critical-path scheduling of stage trees onto idle workers.

Every call rebuilds the stage trees from the current plans and the set of
in-flight work, so the scheduler keeps nothing between calls.  Paths only
start at tree roots: a stage whose resume checkpoint will be produced by work
assigned earlier waits for that checkpoint to land and a later trigger.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .plan import NewCheckpoint, NewRequest, PlanEvent, SearchPlan
from .stagetree import (
    Ckpt,
    InFlight,
    Stage,
    StageTree,
    build_stage_tree,
    critical_path,
    stage_seconds,
)

logger = logging.getLogger(__name__)

PlanEstimator = Callable[[SearchPlan, Stage], Fraction]
"""Seconds per step for ``stage`` of ``plan``."""


class WorkerStatus(str, Enum):
    IDLE = "IDLE"
    BUSY = "BUSY"


@dataclass
class WorkerState:
    id: int
    assignment: int | None = None
    loaded: tuple[str, Ckpt] | None = None

    @property
    def status(self) -> WorkerStatus:
        return WorkerStatus.IDLE if self.assignment is None else WorkerStatus.BUSY


@dataclass(frozen=True)
class StageWork:
    """One stage of an assignment and what to do at points inside it."""

    node: int
    start: int
    end: int
    save_at: tuple[int, ...] = ()
    eval_at: tuple[int, ...] = ()

    @property
    def steps(self) -> int:
        return self.end - self.start

    def in_flight(self) -> InFlight:
        # an eval-only stage still holds its evaluation point
        lo = self.start if self.start < self.end else self.end - 1
        return InFlight(self.node, lo, self.end)


@dataclass(frozen=True)
class Assignment:
    id: int
    worker: int
    plan_key: str
    resume: Ckpt | None
    stages: tuple[StageWork, ...]

    def text(self) -> str:
        return ",".join(f"{s.node}:{s.start}-{s.end}" for s in self.stages)

    def log_line(self, time_us: int) -> str:
        return f"t={time_us / 1_000_000:.6f} worker={self.worker} stages={self.text()}"

    def in_flight(self) -> list[InFlight]:
        return [s.in_flight() for s in self.stages]


def eval_points(plan: SearchPlan, lo: int, hi: int) -> list[int]:
    """Multiples of any plan eval interval in ``(lo, hi]``."""
    pts: set[int] = set()
    for k in plan.eval_intervals:
        pts.update(range((lo // k + 1) * k, hi + 1, k))
    return sorted(pts)


def stage_work(plan: SearchPlan, path: Sequence[Stage], save_boundaries: bool = True) -> tuple[StageWork, ...]:
    """Attach save/eval points to a path of stages.

    Checkpoints go at eval-interval points, at request end steps and, with
    ``save_boundaries``, at every stage end.  Evaluations go at eval-interval
    points and request end steps.  Points already stored on the node are skipped.
    """
    out = []
    for s in path:
        node = plan.nodes[s.node]
        inner = eval_points(plan, s.start, s.end)
        has_req = any(r.end_step == s.end for r in node.pending())
        saves = set(inner)
        evals = set(inner)
        if s.end > s.start and (save_boundaries or has_req):
            saves.add(s.end)
        if has_req:
            evals.add(s.end)
        out.append(
            StageWork(
                s.node,
                s.start,
                s.end,
                tuple(sorted(p for p in saves if p not in node.ckpt)),
                tuple(sorted(p for p in evals if p not in node.metrics)),
            )
        )
    return tuple(out)


def _normalize(plans: SearchPlan | Sequence[SearchPlan], in_flight) -> tuple[list[SearchPlan], dict[str, list[InFlight]]]:
    plan_list = [plans] if isinstance(plans, SearchPlan) else list(plans)
    if isinstance(in_flight, Mapping):
        flights = {k: list(v) for k, v in in_flight.items()}
    else:
        flights = {plan_list[0].compat_key: list(in_flight)} if plan_list else {}
    return plan_list, flights


def schedule(
    plans: SearchPlan | Sequence[SearchPlan],
    in_flight: Mapping[str, Iterable[InFlight]] | Iterable[InFlight],
    idle_workers: Iterable[int],
    estimator: PlanEstimator,
    *,
    first_id: int = 0,
    save_boundaries: bool = True,
    split_every: int | None = None,
) -> list[Assignment]:
    """Assign critical paths to idle workers, lowest worker id first.

    ``in_flight`` is keyed by plan compat key (a bare iterable is taken to
    belong to the single plan given).  Among several plans the longest path
    wins, ties going to the smaller compat key.
    """
    plan_list, flights = _normalize(plans, in_flight)
    idle = sorted(idle_workers)
    if not idle:
        return []
    trees: dict[str, tuple[SearchPlan, StageTree]] = {}
    for plan in sorted(plan_list, key=lambda p: p.compat_key):
        tree = build_stage_tree(plan, flights.get(plan.compat_key, ()), split_every=split_every)
        if len(tree):
            trees[plan.compat_key] = (plan, tree)
    cache: dict[str, tuple[Fraction, list[Stage]]] = {}

    def best_of(key: str) -> tuple[Fraction, list[Stage]]:
        if key not in cache:
            plan, tree = trees[key]
            est = lambda s, _p=plan: estimator(_p, s)  # noqa: E731
            path = critical_path(tree, est, startable_only=True)
            cache[key] = (sum((stage_seconds(s, est) for s in path), Fraction(0)), path)
        return cache[key]

    out: list[Assignment] = []
    while idle:
        pick = None
        for key in trees:
            dur, path = best_of(key)
            if path and (pick is None or dur > pick[1]):
                pick = (key, dur, path)
        if pick is None:
            break
        key, _, path = pick
        plan, tree = trees[key]
        tree.mark_scheduled(path)
        cache.pop(key)
        a = Assignment(first_id + len(out), idle.pop(0), key, path[0].resume, stage_work(plan, path, save_boundaries))
        out.append(a)
    return out


def fifo_schedule(
    plans: Mapping[str, SearchPlan],
    queue: Sequence[tuple[str, str]],
    in_flight: Mapping[str, Iterable[InFlight]],
    idle_workers: Iterable[int],
    *,
    first_id: int = 0,
) -> list[Assignment]:
    """Trial-based baseline: run queued requests in arrival order, one per plan at a time.

    Each plan is expected to hold a single trial, so no computation is shared.
    Plans with in-flight work are skipped until that work finishes.
    """
    idle = sorted(idle_workers)
    out: list[Assignment] = []
    taken = {k for k, v in in_flight.items() if list(v)}
    for key, rid in queue:
        if not idle:
            break
        if key in taken:
            continue
        plan = plans[key]
        tree = build_stage_tree(plan)
        path = tree.request_paths.get(rid)
        if not path:
            continue
        taken.add(key)
        out.append(
            Assignment(first_id + len(out), idle.pop(0), key, path[0].resume, stage_work(plan, path, save_boundaries=False))
        )
    return out


@dataclass(frozen=True)
class WorkerIdle:
    worker: int


@dataclass(frozen=True)
class StageDone:
    plan_key: str
    node: int
    end: int


SchedulerEvent = PlanEvent | WorkerIdle | StageDone


@dataclass
class ScheduleTrigger:
    """Collects scheduler events and runs one schedule per quiescent point.

    ``on_event`` only marks the trigger; the event loop calls :meth:`flush`
    once it has drained every event sharing the current timestamp, so a burst
    of requests costs a single schedule call.
    """

    run: Callable[[], list[Assignment]]
    dirty: bool = False
    events: int = 0
    calls: int = 0
    kinds: dict[str, int] = field(default_factory=dict)

    def on_event(self, event: SchedulerEvent) -> None:
        if isinstance(event, (NewRequest, NewCheckpoint, WorkerIdle, StageDone)):
            self.dirty = True
            self.events += 1
            name = type(event).__name__
            self.kinds[name] = self.kinds.get(name, 0) + 1

    def flush(self) -> list[Assignment]:
        if not self.dirty:
            return []
        self.dirty = False
        self.calls += 1
        out = self.run()
        for a in out:
            logger.debug("assign %s -> worker %d: %s", a.id, a.worker, a.text())
        return out
