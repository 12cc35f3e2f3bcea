"""Search plans: the persistent, append-only merged record of a study.

A node holds one joint hp configuration starting at ``start_step`` after its
parent's training.  Trials are inserted by walking their canonical joint
segments from the roots; nodes are only ever added, never removed or
re-parented, so checkpoints and metrics stored on a node stay valid forever.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import os
import re
import tempfile
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Union

from .errors import ConfigError, IntegrityError, QueryError
from .hpseq import JointConfig, TrialConfig, config_text, parse_segment_text

logger = logging.getLogger(__name__)

MetricRecord = dict[str, float]


def compat_key(model: str, dataset: str, hp_set: Iterable[str]) -> str:
    """Plans are shared only between studies with an identical key."""
    return f"{model}|{dataset}|{','.join(sorted(hp_set))}"


@dataclass(frozen=True)
class Request:
    request_id: str
    end_step: int
    study_id: str
    trial_id: str


@dataclass(frozen=True)
class TrialRequest:
    request_id: str
    study_id: str
    trial_id: str
    config: TrialConfig

    @property
    def end_step(self) -> int:
        return self.config.total_steps


@dataclass(frozen=True)
class Immediate:
    metrics: MetricRecord
    node_id: int


@dataclass(frozen=True)
class Pending:
    request_id: str
    node_id: int


InsertOutcome = Union[Immediate, Pending]


# Events emitted to the plan's listener.
@dataclass(frozen=True)
class NewRequest:
    node_id: int
    request: Request


@dataclass(frozen=True)
class NewCheckpoint:
    node_id: int
    step: int


@dataclass(frozen=True)
class RequestCompleted:
    node_id: int
    request: Request
    metrics: MetricRecord


PlanEvent = Union[NewRequest, NewCheckpoint, RequestCompleted]


@dataclass
class PlanNode:
    id: int
    hp_config: JointConfig
    start_step: int
    parent: int | None
    ckpt: dict[int, str] = field(default_factory=dict)
    metrics: dict[int, MetricRecord] = field(default_factory=dict)
    requests: list[Request] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    runtime: Fraction | None = None
    _ckpt_steps: list[int] = field(default_factory=list, repr=False)

    @property
    def boundary(self) -> int:
        return self.start_step

    @property
    def label(self) -> str:
        return f"H{self.id}"

    def pending(self) -> list[Request]:
        return [r for r in self.requests if r.end_step not in self.metrics]

    @property
    def ref_count(self) -> int:
        return len(self.pending()) + len(self.children)

    def config_map(self) -> dict[str, tuple[Any, int]]:
        return {hp: (fn, pos) for hp, fn, pos in self.hp_config}

    def latest_ckpt(self, step: int, floor: int | None = None) -> int | None:
        """Largest checkpoint step ``<= step`` (and ``>= floor`` if given)."""
        i = bisect.bisect_right(self._ckpt_steps, step)
        if i == 0:
            return None
        s = self._ckpt_steps[i - 1]
        if floor is not None and s < floor:
            return None
        return s


class SearchPlan:
    """Merged record of every configuration submitted under one compat key."""

    def __init__(self, key: str, hp_set: Iterable[str]):
        self.compat_key = key
        self.hp_set = frozenset(hp_set)
        self.nodes: dict[int, PlanNode] = {}
        self.roots: list[int] = []
        self.studies: set[str] = set()
        self.eval_intervals: set[int] = set()
        self.version = 0
        self.listeners: list[Callable[[PlanEvent], None]] = []
        self._index: dict[tuple[int | None, int, JointConfig], int] = {}
        self._requests: dict[str, int] = {}
        self._next_id = 1

    def __repr__(self) -> str:
        return f"SearchPlan({self.compat_key!r}, nodes={len(self.nodes)})"

    # -------------------------------------------------------------- structure

    def node(self, node_id: int) -> PlanNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise IntegrityError(f"unknown plan node {node_id}") from None

    def add_node(self, hp_config: JointConfig, start_step: int, parent: int | None) -> PlanNode:
        """Return the node for ``(parent, start_step, hp_config)``, creating it if absent."""
        key = (parent, start_step, hp_config)
        found = self._index.get(key)
        if found is not None:
            return self.nodes[found]
        if parent is None:
            if start_step != 0:
                raise IntegrityError("root nodes must start at step 0")
        else:
            p = self.node(parent)
            if start_step <= p.start_step:
                raise IntegrityError(
                    f"child boundary {start_step} must exceed parent start {p.start_step}"
                )
        node = PlanNode(self._next_id, hp_config, start_step, parent)
        self._next_id += 1
        self.nodes[node.id] = node
        self._index[key] = node.id
        if parent is None:
            self.roots.append(node.id)
        else:
            self.nodes[parent].children.append(node.id)
        self.version += 1
        return node

    def path(self, node_id: int) -> list[PlanNode]:
        """Nodes from the root down to ``node_id``."""
        out = []
        cur: int | None = node_id
        while cur is not None:
            n = self.node(cur)
            out.append(n)
            cur = n.parent
        return out[::-1]

    def path_segments(self, node_id: int, end_step: int) -> list[tuple[int, int, JointConfig]]:
        """Joint ``(start, end, config)`` intervals of the path up to ``end_step``."""
        nodes = self.path(node_id)
        out = []
        for n, nxt in zip(nodes, nodes[1:] + [None]):
            stop = nxt.start_step if nxt is not None else end_step
            out.append((n.start_step, stop, n.hp_config))
        return out

    def find_path(self, config: TrialConfig) -> int | None:
        """Terminal node of ``config``'s path, or None if not fully present."""
        parent: int | None = None
        for a, _, cfg in config.joint_segments():
            nid = self._index.get((parent, a, cfg))
            if nid is None:
                return None
            parent = nid
        return parent

    def request_node(self, request_id: str) -> int:
        try:
            return self._requests[request_id]
        except KeyError:
            raise QueryError(f"unknown request {request_id!r}") from None

    def iter_requests(self) -> Iterator[tuple[PlanNode, Request]]:
        for n in self.nodes.values():
            for r in n.requests:
                yield n, r

    def pending_requests(self) -> list[tuple[int, Request]]:
        return [(n.id, r) for n, r in self.iter_requests() if r.end_step not in n.metrics]

    # -------------------------------------------------------------- mutation

    def _emit(self, event: PlanEvent) -> None:
        for fn in self.listeners:
            fn(event)

    def insert_trial(self, req: TrialRequest) -> InsertOutcome:
        cfg = req.config
        if cfg.hp_set != self.hp_set:
            raise ConfigError(
                f"trial hp set {sorted(cfg.hp_set)} does not match plan {sorted(self.hp_set)}"
            )
        self.studies.add(req.study_id)
        if req.request_id in self._requests:
            nid = self._requests[req.request_id]
            node = self.nodes[nid]
            r = next(r for r in node.requests if r.request_id == req.request_id)
            if r.end_step in node.metrics:
                return Immediate(node.metrics[r.end_step], nid)
            return Pending(req.request_id, nid)
        parent: int | None = None
        for a, _, joint in cfg.joint_segments():
            parent = self.add_node(joint, a, parent).id
        assert parent is not None
        node = self.nodes[parent]
        if cfg.total_steps in node.metrics:
            return Immediate(node.metrics[cfg.total_steps], node.id)
        r = Request(req.request_id, cfg.total_steps, req.study_id, req.trial_id)
        node.requests.append(r)
        self._requests[r.request_id] = node.id
        self.version += 1
        self._emit(NewRequest(node.id, r))
        return Pending(r.request_id, node.id)

    def record_checkpoint(self, node_id: int, step: int, handle: str) -> bool:
        """Store a checkpoint; returns False if it was already present."""
        node = self.node(node_id)
        if step <= node.start_step:
            raise IntegrityError(f"checkpoint step {step} not after {node.label} start {node.start_step}")
        old = node.ckpt.get(step)
        if old is not None:
            if old != handle:
                raise IntegrityError(f"{node.label}@{step} already has checkpoint {old!r}")
            return False
        node.ckpt[step] = handle
        bisect.insort(node._ckpt_steps, step)
        self.version += 1
        self._emit(NewCheckpoint(node_id, step))
        return True

    def record_metrics(self, node_id: int, step: int, record: MetricRecord) -> list[Request]:
        """Store metrics; returns the requests this completes."""
        node = self.node(node_id)
        if step <= node.start_step:
            raise IntegrityError(f"metric step {step} not after {node.label} start {node.start_step}")
        old = node.metrics.get(step)
        if old is not None:
            if old != record:
                raise IntegrityError(f"{node.label}@{step} already has different metrics")
            return []
        node.metrics[step] = dict(record)
        self.version += 1
        done = [r for r in node.requests if r.end_step == step]
        for r in done:
            self._emit(RequestCompleted(node_id, r, node.metrics[step]))
        return done

    def cancel_trial(self, trial_id: str) -> int:
        """Drop a trial's pending requests; nodes and completed history stay."""
        removed = 0
        for n in self.nodes.values():
            keep = [r for r in n.requests if r.trial_id != trial_id or r.end_step in n.metrics]
            removed += len(n.requests) - len(keep)
            if len(keep) != len(n.requests):
                for r in n.requests:
                    if r not in keep:
                        self._requests.pop(r.request_id, None)
                n.requests = keep
        if removed:
            self.version += 1
        return removed

    # ------------------------------------------------------------ accounting

    def used_extent(self) -> dict[int, int]:
        """For each node on some request path, the furthest step trained under it."""
        mark: dict[int, int] = {}
        for n, r in self.iter_requests():
            cur: PlanNode | None = n
            end = r.end_step
            while cur is not None and mark.get(cur.id, -1) < end:
                mark[cur.id] = end
                end = cur.start_step
                cur = self.nodes[cur.parent] if cur.parent is not None else None
        return mark

    def unique_steps(self) -> int:
        return sum(end - self.nodes[nid].start_step for nid, end in self.used_extent().items())

    def total_steps(self) -> int:
        return sum(r.end_step for _, r in self.iter_requests())

    # ------------------------------------------------------------------ dumps

    def to_json(self) -> dict[str, Any]:
        return {
            "compat_key": self.compat_key,
            "hp_set": sorted(self.hp_set),
            "studies": sorted(self.studies),
            "eval_intervals": sorted(self.eval_intervals),
            "roots": list(self.roots),
            "nodes": [
                {
                    "id": n.id,
                    "label": n.label,
                    "start_step": n.start_step,
                    "parent": n.parent,
                    "hp_config": {hp: f"{fn.text()}@{pos}" for hp, fn, pos in n.hp_config},
                    "ckpt": {str(k): v for k, v in sorted(n.ckpt.items())},
                    "metrics": {str(k): v for k, v in sorted(n.metrics.items())},
                    "requests": [
                        {"id": r.request_id, "end": r.end_step, "study": r.study_id, "trial": r.trial_id}
                        for r in n.requests
                    ],
                    "ref_count": n.ref_count,
                    "runtime": None if n.runtime is None else str(n.runtime),
                }
                for n in self.nodes.values()
            ],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "SearchPlan":
        plan = cls(data["compat_key"], data["hp_set"])
        plan.studies.update(data.get("studies", []))
        plan.eval_intervals.update(data.get("eval_intervals", []))
        for raw in data["nodes"]:
            cfg = tuple(
                (hp, *parse_segment_text(text)) for hp, text in sorted(raw["hp_config"].items())
            )
            node = plan.add_node(cfg, raw["start_step"], raw["parent"])
            if node.id != raw["id"]:
                raise IntegrityError(f"node ids out of order in plan file ({raw['id']})")
            for k, v in raw["ckpt"].items():
                node.ckpt[int(k)] = v
            node._ckpt_steps = sorted(node.ckpt)
            node.metrics = {int(k): v for k, v in raw["metrics"].items()}
            node.requests = [Request(r["id"], r["end"], r["study"], r["trial"]) for r in raw["requests"]]
            for r in node.requests:
                plan._requests[r.request_id] = node.id
            if raw.get("runtime") is not None:
                node.runtime = Fraction(raw["runtime"])
        return plan

    def to_dot(self) -> str:
        lines = ["digraph plan {", "  node [shape=record];"]
        for n in self.nodes.values():
            cfg = "\\l".join(f"{hp}={fn.text()}@{pos}" for hp, fn, pos in n.hp_config)
            ck = ",".join(str(s) for s in sorted(n.ckpt))
            rq = ",".join(str(r.end_step) for r in n.requests)
            label = f"{{{n.label} from {n.start_step}|{_dot_escape(cfg)}\\l|ckpt: [{ck}]|requests: [{rq}]}}"
            lines.append(f'  n{n.id} [label="{label}"];')
        for n in self.nodes.values():
            if n.parent is not None:
                lines.append(f'  n{n.parent} -> n{n.id} [label="{n.start_step}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _dot_escape(s: str) -> str:
    return re.sub(r'([{}|<>"])', r"\\\1", s)


def insert_trial(plan: SearchPlan, req: TrialRequest) -> InsertOutcome:
    return plan.insert_trial(req)


def kwise_view(plan: SearchPlan, study_ids: Iterable[str]) -> SearchPlan:
    """Same node graph, keeping only requests from ``study_ids``."""
    wanted = set(study_ids)
    unknown = wanted - plan.studies
    if unknown:
        raise QueryError(f"unknown study id(s) {sorted(unknown)} for {plan.compat_key!r}")
    view = SearchPlan(plan.compat_key, plan.hp_set)
    view.studies = set(wanted)
    view.eval_intervals = set(plan.eval_intervals)
    for n in plan.nodes.values():
        copy = view.add_node(n.hp_config, n.start_step, n.parent)
        copy.ckpt = dict(n.ckpt)
        copy._ckpt_steps = list(n._ckpt_steps)
        copy.metrics = dict(n.metrics)
        copy.runtime = n.runtime
        copy.requests = [r for r in n.requests if r.study_id in wanted]
        for r in copy.requests:
            view._requests[r.request_id] = copy.id
    return view


def plan_from_configs(configs: Iterable[TrialConfig], key: str = "adhoc", study_id: str = "s0") -> SearchPlan:
    """Fresh plan holding one request per config (used for merge-rate accounting)."""
    plan: SearchPlan | None = None
    for i, cfg in enumerate(configs):
        if plan is None:
            plan = SearchPlan(key, cfg.hp_set)
        plan.insert_trial(TrialRequest(f"{study_id}/r{i}", study_id, f"{study_id}/t{i}", cfg))
    if plan is None:
        raise ConfigError("no trial configurations given")
    return plan


class PlanDatabase:
    """All plans in a run, one per compat key, optionally persisted to a directory.

    Persistence rewrites each plan file whole through a temp file and
    ``os.replace`` so a crash never leaves a half-written plan.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        self.plans: dict[str, SearchPlan] = {}
        if self.directory is not None and self.directory.exists():
            for path in sorted(self.directory.glob("*.plan.json")):
                plan = SearchPlan.from_json(json.loads(path.read_text()))
                self.plans[plan.compat_key] = plan

    def get(self, key: str, hp_set: Iterable[str]) -> SearchPlan:
        plan = self.plans.get(key)
        if plan is None:
            plan = self.plans[key] = SearchPlan(key, hp_set)
        elif plan.hp_set != frozenset(hp_set):
            raise ConfigError(f"hp set mismatch for existing plan {key!r}")
        return plan

    @staticmethod
    def filename(key: str) -> str:
        slug = re.sub(r"[^A-Za-z0-9]+", "_", key).strip("_")[:60]
        digest = hashlib.sha1(key.encode()).hexdigest()[:10]
        return f"{slug}-{digest}.plan.json"

    def save(self) -> None:
        if self.directory is None:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        for key, plan in sorted(self.plans.items()):
            target = self.directory / self.filename(key)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump(plan.to_json(), fh, indent=1, sort_keys=True)
            os.replace(tmp, target)
            logger.debug("saved plan %s -> %s", key, target)
