"""Search algorithms that drive a study through trial requests.

A tuner never touches a plan.  It emits :class:`Submit`, :class:`Extend`,
:class:`Stop` and :class:`Done` actions and is fed one result at a time via
:meth:`Tuner.on_result`.  Synchronous algorithms (grid, SHA) buffer results
until a whole rung has reported; asynchronous ones (ASHA, median stopping)
act on every result.  Decisions are a pure function of the results fed in.

Adding another algorithm (PBT, Hyperband) means implementing ``start`` and
``on_result`` over the same four actions.
"""

from __future__ import annotations

import itertools
import logging
import math
import statistics
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Union

from .errors import ConfigError, ProtocolError
from .hpseq import HpFunction, HpSequence, TrialConfig, split_at

logger = logging.getLogger(__name__)

Metrics = Mapping[str, float]


@dataclass(frozen=True)
class Submit:
    trial_id: str
    config: TrialConfig
    end_step: int


@dataclass(frozen=True)
class Extend:
    trial_id: str
    end_step: int


@dataclass(frozen=True)
class Stop:
    trial_id: str


@dataclass(frozen=True)
class Done:
    winners: tuple[str, ...]


TunerAction = Union[Submit, Extend, Stop, Done]


def trial_name(i: int) -> str:
    return f"t{i:04d}"


# ------------------------------------------------------------------ grid


Candidate = Union[HpFunction, HpSequence]


def grid(
    space: Mapping[str, Sequence[Candidate]],
    steps: int,
    predicate: Callable[[dict[str, Candidate]], bool] | None = None,
) -> list[TrialConfig]:
    """Cartesian product of per-hp candidates, hp names in sorted order.

    Within an hp, candidates keep their declaration order.  ``predicate``
    receives ``{hp: candidate}`` and drops trials for which it is false.
    """
    names = sorted(space)
    for hp in names:
        if not space[hp]:
            raise ConfigError(f"search space dimension {hp!r} is empty")
    out = []
    for combo in itertools.product(*(space[hp] for hp in names)):
        choice = dict(zip(names, combo))
        if predicate is not None and not predicate(choice):
            continue
        seqs = {}
        for hp, c in choice.items():
            if isinstance(c, HpSequence):
                if c.length < steps:
                    raise ConfigError(f"{hp} candidate covers {c.length} of {steps} steps")
                seqs[hp] = HpSequence(hp, c.segments) if c.hp_name != hp else c
                if c.length > steps:
                    seqs[hp] = split_at(seqs[hp], steps)[0]
            else:
                seqs[hp] = HpSequence.of(hp, c, steps)
        out.append(TrialConfig(seqs, steps))
    return out


# ----------------------------------------------------------------- tuners


def _score(metrics: Metrics, metric: str, mode: str) -> float:
    try:
        v = float(metrics[metric])
    except KeyError:
        raise ProtocolError(f"result is missing metric {metric!r}") from None
    return v if mode == "max" else -v


def rank(results: Mapping[str, float]) -> list[str]:
    """Trial ids best first; equal scores go to the smaller trial id."""
    return sorted(results, key=lambda t: (-results[t], t))


class Tuner:
    """Base class: subclasses implement ``start`` and ``on_result``."""

    kind = "tuner"

    def __init__(self, configs: Sequence[TrialConfig], metric: str = "acc", mode: str = "max"):
        if mode not in ("max", "min"):
            raise ConfigError(f"mode must be 'max' or 'min', got {mode!r}")
        self.configs = {trial_name(i): c for i, c in enumerate(configs)}
        self.metric = metric
        self.mode = mode
        self.finished = False
        self.winners: tuple[str, ...] = ()

    def start(self) -> list[TunerAction]:
        raise NotImplementedError

    def on_result(self, trial_id: str, step: int, metrics: Metrics) -> list[TunerAction]:
        raise NotImplementedError

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "metric": self.metric, "mode": self.mode, "trials": len(self.configs)}

    def _done(self, winners: Sequence[str]) -> list[TunerAction]:
        self.finished = True
        self.winners = tuple(winners)
        return [Done(self.winners)]

    def _submit(self, tid: str, end: int) -> Submit:
        cfg = self.configs[tid]
        return Submit(tid, cfg, min(end, cfg.total_steps))


class GridTuner(Tuner):
    """Trains every trial to its full length; the best final metric wins."""

    kind = "grid"

    def __init__(self, configs, metric="acc", mode="max"):
        super().__init__(configs, metric, mode)
        self.results: dict[str, float] = {}

    def start(self):
        if not self.configs:
            return self._done(())
        return [self._submit(t, c.total_steps) for t, c in self.configs.items()]

    def on_result(self, trial_id, step, metrics):
        if self.finished or trial_id in self.results:
            return []
        self.results[trial_id] = _score(metrics, self.metric, self.mode)
        if len(self.results) == len(self.configs):
            return self._done(rank(self.results)[:1])
        return []


@dataclass(frozen=True)
class MilestoneSchedule:
    """``(step, survivors)`` pairs: ``survivors`` trials are trained to ``step``."""

    milestones: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        steps = [s for s, _ in self.milestones]
        counts = [n for _, n in self.milestones]
        if not self.milestones:
            raise ConfigError("milestone schedule is empty")
        if any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] < 1:
            raise ConfigError("milestone steps must be positive and strictly increasing")
        if any(b >= a for a, b in zip(counts, counts[1:])) or counts[-1] < 1:
            raise ConfigError("survivor counts must be positive and strictly decreasing")

    @classmethod
    def from_milestones(cls, *pairs: tuple[int, int]) -> "MilestoneSchedule":
        return cls(tuple((int(s), int(n)) for s, n in pairs))


def sha_rungs(min_steps: int, max_steps: int, reduction: int) -> list[int]:
    """``min * reduction**i`` capped at ``max``."""
    if reduction < 2:
        raise ConfigError("reduction must be >= 2")
    if not 1 <= min_steps <= max_steps:
        raise ConfigError(f"need 1 <= min ({min_steps}) <= max ({max_steps})")
    rungs = []
    r = min_steps
    while r < max_steps:
        rungs.append(r)
        r *= reduction
    rungs.append(max_steps)
    return rungs


@dataclass
class RungState:
    """Synchronous rung bookkeeping shared by SHA and milestone early stopping."""

    rungs: list[int]
    counts: list[int]
    keep_final: int
    rung: int = 0
    active: list[str] = field(default_factory=list)
    results: dict[str, float] = field(default_factory=dict)
    survivors: list[int] = field(default_factory=list)


def sha_step(state: RungState, results: Mapping[str, float]) -> list[TunerAction]:
    """Close the current rung: promote the top trials, stop the others.

    ``results`` must hold a score (higher is better) for every active trial.
    """
    missing = [t for t in state.active if t not in results]
    if missing:
        raise ProtocolError(f"rung {state.rungs[state.rung]} lacks results for {missing[:5]}")
    order = rank({t: results[t] for t in state.active})
    last = state.rung == len(state.rungs) - 1
    keep = state.keep_final if last else state.counts[state.rung + 1]
    keep = min(keep, len(order))
    winners, losers = order[:keep], order[keep:]
    actions: list[TunerAction] = [Stop(t) for t in sorted(losers)]
    state.survivors.append(len(winners))
    if last:
        actions.append(Done(tuple(winners)))
    else:
        state.rung += 1
        state.active = sorted(winners)
        actions.extend(Extend(t, state.rungs[state.rung]) for t in state.active)
    state.results = {}
    return actions


class SuccessiveHalving(Tuner):
    """Synchronous rungs: all trials at a rung report before any is promoted."""

    kind = "milestone"

    def __init__(self, configs, rungs, counts, keep_final, metric="acc", mode="max"):
        super().__init__(configs, metric, mode)
        if len(rungs) != len(counts):
            raise ConfigError("need one survivor count per rung")
        self.state = RungState(list(rungs), list(counts), keep_final)

    @classmethod
    def from_schedule(cls, configs, schedule: MilestoneSchedule, keep_final: int | None = None, **kw):
        steps = [s for s, _ in schedule.milestones]
        counts = [n for _, n in schedule.milestones]
        return cls(configs, steps, counts, counts[-1] if keep_final is None else keep_final, **kw)

    @property
    def survivor_counts(self) -> list[int]:
        return list(self.state.survivors)

    def start(self):
        st = self.state
        ids = list(self.configs)[: st.counts[0]]
        if not ids:
            return self._done(())
        st.active = ids
        st.survivors = [len(ids)]
        return [self._submit(t, st.rungs[0]) for t in ids]

    def on_result(self, trial_id, step, metrics):
        st = self.state
        if self.finished or trial_id not in st.active or step != st.rungs[st.rung]:
            return []
        st.results[trial_id] = _score(metrics, self.metric, self.mode)
        if len(st.results) < len(st.active):
            return []
        actions = sha_step(st, st.results)
        for a in actions:
            if isinstance(a, Done):
                self.finished = True
                self.winners = a.winners
        return actions

    def describe(self):
        d = super().describe()
        d.update(kind=self.kind, rungs=self.state.rungs, counts=self.state.counts, keep_final=self.state.keep_final)
        return d


class SHATuner(SuccessiveHalving):
    """Successive halving with rungs ``min * reduction**i`` capped at ``max``."""

    kind = "sha"

    def __init__(self, configs, reduction=4, min_steps=1, max_steps=None, metric="acc", mode="max"):
        configs = list(configs)
        if max_steps is None:
            max_steps = max((c.total_steps for c in configs), default=1)
        rungs = sha_rungs(min_steps, max_steps, reduction)
        counts = [len(configs)]
        for _ in rungs[1:]:
            counts.append(math.ceil(counts[-1] / reduction))
        super().__init__(configs, rungs, counts, math.ceil(counts[-1] / reduction), metric, mode)
        self.reduction = reduction

    def describe(self):
        d = super().describe()
        d["reduction"] = self.reduction
        return d


class ASHATuner(Tuner):
    """Asynchronous successive halving.

    Whenever a worker slot frees up, the tuner asks for a job: scanning rungs
    from the top down, it promotes the best trial that is among the top
    ``ceil(n_k / reduction)`` of the ``n_k`` results at rung ``k`` and has not
    been promoted from it yet.  With no promotable trial it starts the next
    unstarted one.  Trials that are not promoted wait at their rung and may be
    promoted later as the rung fills up.
    """

    kind = "asha"

    def __init__(self, configs, reduction=4, min_steps=1, max_steps=None, parallelism=1, metric="acc", mode="max"):
        super().__init__(configs, metric, mode)
        if max_steps is None:
            max_steps = max((c.total_steps for c in self.configs.values()), default=1)
        self.rungs = sha_rungs(min_steps, max_steps, reduction)
        self.reduction = reduction
        self.parallelism = max(1, parallelism)
        self.results: list[dict[str, float]] = [{} for _ in self.rungs]
        self.promoted: list[list[str]] = [[] for _ in self.rungs]
        self.rung_of: dict[str, int] = {}
        self.unstarted = list(self.configs)
        self.running: set[str] = set()
        self.promotions: list[tuple[str, int]] = []

    def _job(self) -> list[TunerAction]:
        for k in reversed(range(len(self.rungs) - 1)):
            rung = self.results[k]
            slots = math.ceil(len(rung) / self.reduction)
            for t in rank(rung)[:slots]:
                if t not in self.promoted[k]:
                    self.promoted[k].append(t)
                    self.promotions.append((t, k))
                    self.rung_of[t] = k + 1
                    self.running.add(t)
                    return [Extend(t, self.rungs[k + 1])]
        if not self.unstarted:
            return []
        t = self.unstarted.pop(0)
        self.rung_of[t] = 0
        self.running.add(t)
        return [self._submit(t, self.rungs[0])]

    def _fill(self) -> list[TunerAction]:
        out: list[TunerAction] = []
        while len(self.running) < self.parallelism:
            job = self._job()
            if not job:
                break
            out += job
        return out

    def start(self):
        if not self.configs:
            return self._done(())
        return self._fill()

    def on_result(self, trial_id, step, metrics):
        k = self.rung_of.get(trial_id)
        if self.finished or k is None or trial_id not in self.running or step != self.rungs[k]:
            return []
        self.results[k][trial_id] = _score(metrics, self.metric, self.mode)
        self.running.discard(trial_id)
        out = self._fill()
        if not self.running:
            top = len(self.rungs) - 1
            out += [Stop(t) for t in sorted(self.rung_of) if self.rung_of[t] < top]
            out += self._done(self._best())
        return out

    def _best(self) -> list[str]:
        for rung in reversed(self.results):
            if rung:
                return rank(rung)[:1]
        return []

    def describe(self):
        d = super().describe()
        d.update(rungs=self.rungs, reduction=self.reduction, parallelism=self.parallelism)
        return d


def median_stop(history: Mapping[str, Mapping[int, float]], trial_id: str, step: int) -> bool:
    """True iff ``trial_id`` should stop at ``step``.

    ``history`` maps trial -> {step: score} (higher is better).  The trial
    stops iff its best score up to ``step`` is strictly below the median of
    the running averages up to ``step`` of every other trial that has
    reported at ``step``.
    """
    mine = [v for s, v in history[trial_id].items() if s <= step]
    others = []
    for t, h in history.items():
        if t == trial_id or step not in h:
            continue
        vals = [v for s, v in h.items() if s <= step]
        others.append(sum(vals) / len(vals))
    if not others or not mine:
        return False
    return max(mine) < statistics.median(others)


class MedianStopTuner(Tuner):
    """Runs every trial through ``milestones``, stopping those below the running median."""

    kind = "median"

    def __init__(self, configs, milestones: Sequence[int], metric="acc", mode="max"):
        super().__init__(configs, metric, mode)
        ms = sorted(set(int(m) for m in milestones))
        if not ms or ms[0] < 1:
            raise ConfigError("median stopping needs positive milestones")
        self.milestones = ms
        self.history: dict[str, dict[int, float]] = {t: {} for t in self.configs}
        self.open: set[str] = set()
        self.final: dict[str, float] = {}

    def _points(self, tid: str) -> list[int]:
        n = self.configs[tid].total_steps
        return [m for m in self.milestones if m < n] + [n]

    def start(self):
        if not self.configs:
            return self._done(())
        self.open = set(self.configs)
        return [self._submit(t, self._points(t)[0]) for t in self.configs]

    def on_result(self, trial_id, step, metrics):
        if self.finished or trial_id not in self.open:
            return []
        pts = self._points(trial_id)
        if step not in pts or step in self.history[trial_id]:
            return []
        score = _score(metrics, self.metric, self.mode)
        self.history[trial_id][step] = score
        out: list[TunerAction] = []
        if step == pts[-1]:
            self.open.discard(trial_id)
            self.final[trial_id] = score
        elif median_stop(self.history, trial_id, step):
            self.open.discard(trial_id)
            out.append(Stop(trial_id))
        else:
            out.append(Extend(trial_id, pts[pts.index(step) + 1]))
        if not self.open:
            pool = self.final or {t: max(h.values()) for t, h in self.history.items() if h}
            out += self._done(rank(pool)[:1])
        return out

    def describe(self):
        d = super().describe()
        d["milestones"] = self.milestones
        return d
