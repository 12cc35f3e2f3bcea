"""Stage trees: the transient, schedulable view of a plan.

A tree is regenerated from the plan whenever a scheduling decision is made.
Each pending request is walked backwards to its nearest usable checkpoint;
the resulting per-node step ranges are cut at every point where another
request starts or stops, so shared prefixes appear as a single stage.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

from .errors import IntegrityError
from .plan import Request, SearchPlan


@dataclass(frozen=True)
class Ckpt:
    node: int
    step: int


class _FromScratch:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "FROM_SCRATCH"


FROM_SCRATCH = _FromScratch()

Resume = Union[Ckpt, _FromScratch]


@dataclass(frozen=True)
class InFlight:
    """Work a worker currently holds: steps ``(start, end]`` of ``node``.

    ``end`` includes the evaluation at ``end``, so a request ending there is
    treated as running even after training has passed it.
    """

    node: int
    start: int
    end: int


@dataclass(frozen=True)
class _Ref:
    key: tuple[int, int]


def _group(in_flight: Iterable[InFlight]) -> dict[int, list[tuple[int, int]]]:
    out: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for f in in_flight:
        out[f.node].append((f.start, f.end))
    return out


def _busy(spans: list[tuple[int, int]], lo: int, hi: int) -> bool:
    return any(max(a, lo) < min(b, hi) for a, b in spans)


def find_latest_checkpoint(
    plan: SearchPlan,
    request: tuple[int, int],
    memo: dict | None = None,
    running: Mapping[int, list[tuple[int, int]]] | None = None,
) -> Resume | None:
    """Nearest checkpoint at or before ``request`` on its root path.

    Returns :data:`FROM_SCRATCH` when the walk reaches a root with no
    checkpoint, and ``None`` when the range that would need training is
    currently held by a worker.  Every visited ``(node, step)`` is stored in
    ``memo``: a checkpoint, ``FROM_SCRATCH``, ``None``, or a pointer to the
    parent request it defers to.
    """
    if memo is None:
        memo = {}
    if request in memo:
        return _resolve(memo, request)
    node_id, step = request
    n = plan.node(node_id)
    c = n.latest_ckpt(step, floor=n.start_step + 1)
    lo = c if c is not None else n.start_step
    if running and _busy(running.get(node_id, []), lo, step):
        memo[request] = None
        return None
    if c is not None:
        memo[request] = Ckpt(node_id, c)
    elif n.parent is None:
        memo[request] = FROM_SCRATCH
    else:
        parent_req = (n.parent, n.start_step)
        find_latest_checkpoint(plan, parent_req, memo, running)
        memo[request] = _Ref(parent_req)
    return _resolve(memo, request)


def _resolve(memo: dict, key: tuple[int, int]):
    v = memo[key]
    while isinstance(v, _Ref):
        v = memo[v.key]
    return v


def _pieces(plan: SearchPlan, memo: dict, key: tuple[int, int]):
    """Non-empty ``(node, start, end)`` ranges from the resume point to ``key``, root first."""
    out = []
    while True:
        v = memo[key]
        node_id, step = key
        n = plan.nodes[node_id]
        if isinstance(v, Ckpt):
            if v.step < step:
                out.append((node_id, v.step, step))
            resume: Resume = v
            break
        if v is FROM_SCRATCH:
            out.append((node_id, 0, step))
            resume = FROM_SCRATCH
            break
        assert isinstance(v, _Ref)
        out.append((node_id, n.start_step, step))
        key = v.key
    return out[::-1], resume


@dataclass(eq=False)
class Stage:
    node: int
    start: int
    end: int
    resume: Ckpt | None = None
    parent: "Stage | None" = field(default=None, repr=False)
    children: list["Stage"] = field(default_factory=list, repr=False)
    requests: list[Request] = field(default_factory=list, repr=False)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.node, self.start, self.end)

    @property
    def steps(self) -> int:
        return self.end - self.start

    def text(self) -> str:
        return f"{self.node}:{self.start}-{self.end}"


@dataclass
class StageTree:
    roots: list[Stage]
    generation: int
    stages: dict[tuple[int, int, int], Stage]
    request_paths: dict[str, list[Stage]]
    blocked: list[str] = field(default_factory=list)
    scheduled: set[tuple[int, int, int]] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.stages)

    def leaves(self) -> list[Stage]:
        return [s for s in self.stages.values() if not s.children]

    def mark_scheduled(self, stages: Iterable[Stage]) -> None:
        self.scheduled.update(s.key for s in stages)

    def signature(self) -> tuple:
        """Hashable structure used for equality checks across rebuilds."""
        return tuple(
            sorted(
                (s.key, s.resume and (s.resume.node, s.resume.step), s.parent and s.parent.key)
                for s in self.stages.values()
            )
        )

    def to_dot(self, plan: SearchPlan | None = None) -> str:
        lines = ["digraph stages {", "  node [shape=box];"]
        for s in sorted(self.stages.values(), key=lambda s: s.key):
            label = f"H{s.node}\\n{s.start}-{s.end}"
            style = ""
            if s.resume is not None:
                label += f"\\nresume H{s.resume.node}@{s.resume.step}"
                style = ", style=filled, fillcolor=lightgrey"
            lines.append(f'  "{s.text()}" [label="{label}"{style}];')
        for s in sorted(self.stages.values(), key=lambda s: s.key):
            for c in s.children:
                lines.append(f'  "{s.text()}" -> "{c.text()}";')
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_stage_tree(
    plan: SearchPlan,
    in_flight: Iterable[InFlight] = (),
    memo: bool = True,
    split_every: int | None = None,
) -> StageTree:
    """Generate the stage tree covering every pending, non-running request.

    ``split_every`` adds extra cut points at multiples of that many steps.
    """
    running = _group(in_flight)
    table: dict = {}
    keys: dict[tuple[int, int], list[Request]] = {}
    for node_id, r in plan.pending_requests():
        keys.setdefault((node_id, r.end_step), []).append(r)

    chains: dict[tuple[int, int], tuple[list, Resume]] = {}
    blocked: list[str] = []
    for key in sorted(keys):
        local = table if memo else {}
        res = find_latest_checkpoint(plan, key, local, running)
        if res is None or (
            isinstance(res, Ckpt) and res.step == key[1] and _busy(running.get(key[0], []), key[1] - 1, key[1])
        ):
            blocked.extend(r.request_id for r in keys[key])
            continue
        chains[key] = _pieces(plan, local, key)

    cuts: dict[int, set[int]] = defaultdict(set)
    for pieces, _ in chains.values():
        for node_id, a, b in pieces:
            cuts[node_id].update((a, b))
            if split_every:
                k = split_every
                cuts[node_id].update(range((a // k + 1) * k, b, k))

    stages: dict[tuple[int, int, int], Stage] = {}
    paths: dict[str, list[Stage]] = {}
    for key, (pieces, resume) in chains.items():
        path: list[Stage] = []
        for node_id, a, b in pieces:
            pts = sorted(p for p in cuts[node_id] if a <= p <= b)
            for x, y in zip(pts, pts[1:]):
                path.append(_stage(stages, node_id, x, y))
        if not path:
            # checkpoint sits exactly at the request step: evaluate only
            path.append(_stage(stages, key[0], key[1], key[1]))
        head = path[0]
        want = resume if isinstance(resume, Ckpt) else None
        if head.parent is not None or (head.resume != want and head.resume is not None):
            raise IntegrityError(f"stage {head.text()} reached with inconsistent resume points")
        head.resume = want
        for prev, cur in zip(path, path[1:]):
            if cur.parent is None:
                cur.parent = prev
                prev.children.append(cur)
            elif cur.parent is not prev:
                raise IntegrityError(f"stage {cur.text()} has two parents")
        path[-1].requests.extend(keys[key])
        for r in keys[key]:
            paths[r.request_id] = path

    for s in stages.values():
        if s.parent is not None and s.resume is not None:
            raise IntegrityError(f"stage {s.text()} both resumes and follows a parent")
        s.children.sort(key=lambda c: c.key)
    roots = sorted((s for s in stages.values() if s.parent is None), key=lambda s: s.key)
    return StageTree(roots, plan.version, stages, paths, blocked)


def _stage(stages: dict, node: int, a: int, b: int) -> Stage:
    key = (node, a, b)
    s = stages.get(key)
    if s is None:
        s = stages[key] = Stage(node, a, b)
    return s


Estimator = Callable[[Stage], Fraction]
"""Seconds per step for the configuration a stage trains under."""


def stage_seconds(stage: Stage, estimator: Estimator) -> Fraction:
    return stage.steps * Fraction(estimator(stage))


def critical_path(tree: StageTree, estimator: Estimator, startable_only: bool = False) -> list[Stage]:
    """Longest-duration root-to-leaf path over unscheduled stages.

    A path may start at any unscheduled stage whose parent is absent or
    already scheduled; with ``startable_only`` it must start at a tree root.
    Ties go to the lexicographically smallest ``(node, start)`` sequence.
    """
    free = [s for s in tree.stages.values() if s.key not in tree.scheduled]
    if not free:
        return []
    order: list[Stage] = []
    starts = [
        s
        for s in free
        if s.parent is None or (not startable_only and s.parent.key in tree.scheduled)
    ]
    stack = list(starts)
    while stack:
        s = stack.pop()
        order.append(s)
        stack.extend(c for c in s.children if c.key not in tree.scheduled)
    best: dict[tuple, tuple[Fraction, list[tuple[int, int]], list[Stage]]] = {}
    for s in reversed(order):
        own = stage_seconds(s, estimator)
        pick: tuple[Fraction, list[tuple[int, int]], list[Stage]] | None = None
        for c in s.children:
            if c.key in tree.scheduled:
                continue
            cand = best[c.key]
            if pick is None or cand[0] > pick[0] or (cand[0] == pick[0] and cand[1] < pick[1]):
                pick = cand
        if pick is None:
            best[s.key] = (own, [(s.node, s.start)], [s])
        else:
            best[s.key] = (own + pick[0], [(s.node, s.start)] + pick[1], [s] + pick[2])
    top = None
    for s in starts:
        cand = best[s.key]
        if top is None or cand[0] > top[0] or (cand[0] == top[0] and cand[1] < top[1]):
            top = cand
    return [] if top is None else top[2]
