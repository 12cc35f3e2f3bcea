"""Study spec files (JSON, ``"schema": 1``).

A run spec lists studies, a cost model, a worker count and a seed.  Any
step count may instead be written ``{"epochs": n}`` and is converted with
the study's ``steps_per_iteration``.  Grid filters use a small expression
language over hp names, e.g. ``lr.family == 'constant' or bs.value != 128``.

Example::

    {
      "schema": 1, "seed": 7, "workers": 4,
      "cost": {"step_seconds": 0.1, "save_seconds": 5},
      "studies": [{
        "name": "grid4", "model": "resnet56", "dataset": "cifar10",
        "max_steps": 200, "eval_interval": 20,
        "search_space": {
          "lr": ["Constant(0.1)", "Exponential(0.1, 0.95)"],
          "bs": ["Constant(128)", "MultiStep(128, [40], 2)"]
        },
        "tuner": {"kind": "grid"}
      }]
    }
"""

from __future__ import annotations

import ast
import json
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Union

import jsonschema

from .errors import ConfigError
from .hpseq import Family, HpFunction, HpSequence, Segment, TrialConfig, function_from_json, to_value
from .plan import compat_key
from .sim.cost import CostModel, _num
from .sim.engine import Mode, StudySetup
from .tuners import (
    ASHATuner,
    GridTuner,
    MedianStopTuner,
    MilestoneSchedule,
    SHATuner,
    SuccessiveHalving,
    Tuner,
    grid,
    sha_rungs,
)

SCHEMA_VERSION = 1
TUNER_KINDS = ("grid", "sha", "asha", "median", "milestone")

_steps = {"oneOf": [{"type": "integer", "minimum": 0}, {"type": "object", "required": ["epochs"], "properties": {"epochs": {"type": "number", "minimum": 0}}, "additionalProperties": False}]}
_seconds = {"type": "number", "minimum": 0}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "seed", "workers", "studies"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "workers": {"type": "integer", "minimum": 1},
        "mode": {"enum": [m.value for m in Mode]},
        "cost": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "step_seconds": _seconds,
                "save_seconds": _seconds,
                "load_seconds": _seconds,
                "eval_seconds": _seconds,
                "batch_hp": {"type": "string"},
                "batch_scale": {"type": "object", "additionalProperties": _seconds},
                "batch_reference": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "studies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "max_steps", "search_space", "tuner"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "pattern": "^[^/#]+$"},
                    "model": {"type": "string"},
                    "dataset": {"type": "string"},
                    "steps_per_iteration": {"type": "integer", "minimum": 1},
                    "max_steps": _steps,
                    "eval_interval": {"oneOf": [_steps, {"type": "null"}]},
                    "arrival_offset": _seconds,
                    "filter": {"type": "string"},
                    "search_space": {
                        "type": "object",
                        "minProperties": 1,
                        "additionalProperties": {"type": "array", "minItems": 1, "items": {"type": ["string", "object"]}},
                    },
                    "tuner": {
                        "type": "object",
                        "required": ["kind"],
                        "properties": {"kind": {"enum": list(TUNER_KINDS)}},
                    },
                },
            },
        },
    },
}

Candidate = Union[HpFunction, HpSequence]


@dataclass(frozen=True)
class TunerSpec:
    kind: str = "grid"
    metric: str = "acc"
    mode: str = "max"
    reduction: int | None = None
    min_steps: int | None = None
    max_steps: int | None = None
    milestones: tuple = ()
    parallelism: int | None = None

    def rungs(self, study_max: int) -> list[int]:
        return sha_rungs(self.min_steps or 1, self.max_steps or study_max, self.reduction or 4)

    def largest_milestone(self, study_max: int) -> int:
        if self.kind in ("sha", "asha"):
            return self.max_steps or study_max
        if self.kind == "median":
            return max(self.milestones, default=0)
        if self.kind == "milestone":
            return max((s for s, _ in self.milestones), default=0)
        return 0

    def build(self, configs: list[TrialConfig], study_max: int, workers: int) -> Tuner:
        kw = {"metric": self.metric, "mode": self.mode}
        if self.kind == "grid":
            return GridTuner(configs, **kw)
        if self.kind == "sha":
            return SHATuner(configs, self.reduction or 4, self.min_steps or 1, self.max_steps or study_max, **kw)
        if self.kind == "asha":
            par = self.parallelism or workers
            return ASHATuner(configs, self.reduction or 4, self.min_steps or 1, self.max_steps or study_max, par, **kw)
        if self.kind == "median":
            return MedianStopTuner(configs, self.milestones, **kw)
        if self.kind == "milestone":
            return SuccessiveHalving.from_schedule(configs, MilestoneSchedule(self.milestones), **kw)
        raise ConfigError(f"unknown tuner kind {self.kind!r}; supported: {', '.join(TUNER_KINDS)}")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "metric": self.metric, "mode": self.mode}
        for name, key in (("reduction", "reduction"), ("min_steps", "min"), ("max_steps", "max"), ("parallelism", "parallelism")):
            v = getattr(self, name)
            if v is not None:
                out[key] = v
        if self.milestones:
            out["milestones"] = [list(m) if isinstance(m, tuple) else m for m in self.milestones]
        return out


@dataclass(frozen=True)
class StudySpec:
    name: str
    model: str
    dataset: str
    steps_per_iteration: int
    max_steps: int
    eval_interval: int | None
    arrival_s: Fraction
    search_space: tuple[tuple[str, tuple[Candidate, ...]], ...]
    tuner: TunerSpec
    filter: str | None = None

    @property
    def hp_set(self) -> frozenset[str]:
        return frozenset(hp for hp, _ in self.search_space)

    @property
    def compat_key(self) -> str:
        return compat_key(self.model, self.dataset, self.hp_set)

    def configs(self) -> list[TrialConfig]:
        pred = compile_filter(self.filter, self.hp_set) if self.filter else None
        return grid(dict(self.search_space), self.max_steps, pred)

    def setup(self, workers: int) -> StudySetup:
        configs = self.configs()
        return StudySetup(
            self.name,
            lambda: self.tuner.build(configs, self.max_steps, workers),
            model=self.model,
            dataset=self.dataset,
            eval_interval=self.eval_interval,
            arrival_s=self.arrival_s,
            steps_per_iteration=self.steps_per_iteration,
        )

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "model": self.model,
            "dataset": self.dataset,
            "steps_per_iteration": self.steps_per_iteration,
            "max_steps": self.max_steps,
            "eval_interval": self.eval_interval,
            "arrival_offset": _num(self.arrival_s),
            "search_space": {hp: [_candidate_json(c) for c in cands] for hp, cands in self.search_space},
            "tuner": self.tuner.to_json(),
        }
        if self.filter:
            out["filter"] = self.filter
        return out


@dataclass(frozen=True)
class RunSpec:
    studies: tuple[StudySpec, ...]
    cost: CostModel
    seed: int
    mode: Mode = Mode.STAGE

    @property
    def workers(self) -> int:
        return self.cost.workers

    def setups(self) -> list[StudySetup]:
        return [s.setup(self.workers) for s in self.studies]

    def to_json(self) -> dict[str, Any]:
        cost = self.cost.to_json()
        return {
            "schema": SCHEMA_VERSION,
            "seed": self.seed,
            "workers": self.cost.workers,
            "mode": self.mode.value,
            "cost": cost,
            "studies": [s.to_json() for s in self.studies],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ parsing


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "(root)"


def _epochs(obj: Any, spi: int, where: list) -> Any:
    """Replace every ``{"epochs": n}`` with ``n * spi`` steps."""
    if isinstance(obj, Mapping):
        if set(obj) == {"epochs"}:
            steps = Fraction(str(obj["epochs"])) * spi
            if steps.denominator != 1:
                raise ConfigError(f"{_path(where)}: {obj['epochs']} epochs is not a whole number of steps")
            return int(steps)
        return {k: _epochs(v, spi, where + [k]) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_epochs(v, spi, where + [i]) for i, v in enumerate(obj)]
    return obj


def _candidate(obj: Any, hp: str, steps: int, where: str) -> Candidate:
    try:
        if isinstance(obj, Mapping) and "segments" in obj:
            segs = obj["segments"]
            if not isinstance(segs, list) or not segs:
                raise ConfigError("'segments' must be a non-empty list")
            out, used = [], 0
            for i, seg in enumerate(segs):
                fn = function_from_json(seg["function"])
                n = seg.get("steps")
                if n is None:
                    if i != len(segs) - 1:
                        raise ConfigError("only the last segment may omit 'steps'")
                    n = steps - used
                if not isinstance(n, int) or n < 1:
                    raise ConfigError(f"segment {i} needs a positive step count")
                out.append(Segment(fn, int(seg.get("local_start", 0)), n))
                used += n
            return HpSequence(hp, tuple(out))
        return function_from_json(obj)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{where}: malformed function descriptor ({e})") from None


def _candidate_json(c: Candidate) -> Any:
    if isinstance(c, HpFunction):
        return c.to_json()
    return {"segments": [{"function": s.function.to_json(), "steps": s.duration, **({"local_start": s.local_start} if s.local_start else {})} for s in c.segments]}


def _tuner(obj: Mapping[str, Any], where: str) -> TunerSpec:
    kind = obj["kind"]
    allowed = {"kind", "metric", "mode", "reduction", "min", "max", "milestones", "parallelism"}
    extra = set(obj) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown tuner field(s) {sorted(extra)}")
    ms = obj.get("milestones", [])
    if kind == "milestone":
        if not ms or not all(isinstance(m, list) and len(m) == 2 for m in ms):
            raise ConfigError(f"{where}.milestones: expected [[step, survivors], ...]")
        milestones: tuple = tuple((int(s), int(n)) for s, n in ms)
        MilestoneSchedule(milestones)
    elif kind == "median":
        if not ms or not all(isinstance(m, int) for m in ms):
            raise ConfigError(f"{where}.milestones: expected a list of step counts")
        milestones = tuple(sorted(set(ms)))
    else:
        milestones = ()
    for k in ("reduction", "min", "max", "parallelism"):
        if k in obj and (not isinstance(obj[k], int) or obj[k] < 1):
            raise ConfigError(f"{where}.{k}: expected a positive integer")
    if obj.get("mode", "max") not in ("max", "min"):
        raise ConfigError(f"{where}.mode: expected 'max' or 'min'")
    return TunerSpec(
        kind,
        obj.get("metric", "acc"),
        obj.get("mode", "max"),
        obj.get("reduction"),
        obj.get("min"),
        obj.get("max"),
        milestones,
        obj.get("parallelism"),
    )


def _study(raw: Mapping[str, Any], idx: int) -> StudySpec:
    where = f"studies[{idx}]"
    spi = raw.get("steps_per_iteration", 1)
    obj = _epochs(raw, spi, ["studies", idx])
    max_steps = obj["max_steps"]
    if max_steps < 1:
        raise ConfigError(f"{where}.max_steps: must be at least 1 step")
    ev = obj.get("eval_interval")
    if ev is not None and ev < 1:
        raise ConfigError(f"{where}.eval_interval: must be at least 1 step")
    space = []
    for hp, cands in obj["search_space"].items():
        space.append((hp, tuple(_candidate(c, hp, max_steps, f"{where}.search_space.{hp}[{i}]") for i, c in enumerate(cands))))
    space.sort(key=lambda kv: kv[0])
    tuner = _tuner(obj["tuner"], f"{where}.tuner")
    if tuner.kind in ("sha", "asha") and tuner.min_steps and tuner.max_steps and tuner.min_steps > tuner.max_steps:
        raise ConfigError(f"{where}.tuner: min exceeds max")
    biggest = tuner.largest_milestone(max_steps)
    if biggest > max_steps:
        raise ConfigError(f"{where}.max_steps: {max_steps} is below the largest tuner milestone {biggest}")
    filt = obj.get("filter")
    if filt:
        try:
            compile_filter(filt, {hp for hp, _ in space})
        except ConfigError as e:
            raise ConfigError(f"{where}.filter: {e}") from None
    return StudySpec(
        obj["name"],
        obj.get("model", "model"),
        obj.get("dataset", "data"),
        spi,
        max_steps,
        ev,
        Fraction(str(obj.get("arrival_offset", 0))),
        tuple(space),
        tuner,
        filt,
    )


def parse_spec(source: str | Path | Mapping[str, Any]) -> RunSpec:
    """Validate a spec document (path, JSON text, or parsed mapping) into a :class:`RunSpec`."""
    if isinstance(source, Mapping):
        doc = source
    else:
        text = Path(source).read_text() if isinstance(source, Path) or not str(source).lstrip().startswith("{") else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"spec is not valid JSON: {e}") from None
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e.absolute_path)}: {e.message}")
    studies = tuple(_study(s, i) for i, s in enumerate(doc["studies"]))
    names = [s.name for s in studies]
    if len(set(names)) != len(names):
        raise ConfigError("studies: study names must be unique")
    cost_raw = dict(doc.get("cost", {}))
    try:
        cost = CostModel(
            step_seconds=to_value(cost_raw.get("step_seconds", 0.1)),
            save_seconds=to_value(cost_raw.get("save_seconds", 0)),
            load_seconds=to_value(cost_raw.get("load_seconds", 0)),
            eval_seconds=to_value(cost_raw.get("eval_seconds", 0)),
            workers=doc["workers"],
            batch_hp=cost_raw.get("batch_hp", "bs"),
            batch_scale={to_value(k): to_value(v) for k, v in cost_raw.get("batch_scale", {}).items()},
            batch_reference=cost_raw.get("batch_reference"),
        )
    except ConfigError as e:
        raise ConfigError(f"cost: {e}") from None
    return RunSpec(studies, cost, doc["seed"], Mode(doc.get("mode", "stage")))


def load_spec(path: str | Path) -> RunSpec:
    return parse_spec(Path(path))


# ------------------------------------------------------------------ filters

_CMP = {
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
}


class _View:
    """What a filter expression sees for one hp candidate."""

    def __init__(self, cand: Candidate):
        self.fn = cand if isinstance(cand, HpFunction) else cand.segments[0].function
        self.text = cand.text()

    def attr(self, name: str) -> Any:
        if name == "family":
            return self.fn.family.value.lower()
        if name == "text":
            return self.text
        v = self.fn.get(name)
        if v is None:
            return _MISSING
        return v

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, str):
            try:
                return self.fn == function_from_json(other)
            except ConfigError:
                return False
        return NotImplemented

    def __ne__(self, other: Any) -> bool:
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    __hash__ = None  # type: ignore[assignment]


class _Missing:
    def __eq__(self, other: Any) -> bool:
        return False

    def __ne__(self, other: Any) -> bool:
        return True

    def __lt__(self, other: Any) -> bool:
        return False

    __le__ = __gt__ = __ge__ = __lt__
    __hash__ = None  # type: ignore[assignment]


_MISSING = _Missing()


def _literal(node: ast.expr) -> Any:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, str)) and not isinstance(node.value, bool):
        v = node.value
        return v.lower() if isinstance(v, str) and v.upper() in Family.__members__ else to_value(v) if not isinstance(v, str) else v
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_literal(node.operand)
    if isinstance(node, (ast.List, ast.Tuple)):
        return tuple(_literal(e) for e in node.elts)
    raise ConfigError(f"unsupported literal {ast.dump(node)}")


def compile_filter(expr: str, hp_names) -> Callable[[dict[str, Candidate]], bool]:
    """Compile a filter expression into a predicate over ``{hp: candidate}``.

    Grammar: ``and``/``or``/``not`` over comparisons ``hp OP literal`` or
    ``hp.field OP literal`` where ``field`` is ``family``, ``text`` or a
    function parameter.  ``hp == 'Constant(0.1)'`` compares whole functions.
    """
    names = set(hp_names)
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as e:
        raise ConfigError(f"cannot parse filter {expr!r}: {e.msg}") from None

    def build(node: ast.expr) -> Callable[[dict[str, _View]], Any]:
        if isinstance(node, ast.BoolOp):
            parts = [build(v) for v in node.values]
            if isinstance(node.op, ast.And):
                return lambda env: all(p(env) for p in parts)
            return lambda env: any(p(env) for p in parts)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            inner = build(node.operand)
            return lambda env: not inner(env)
        if isinstance(node, ast.Compare):
            left = operand(node.left)
            ops = []
            for op, right in zip(node.ops, node.comparators):
                if type(op) not in _CMP:
                    raise ConfigError(f"unsupported comparison {type(op).__name__}")
                ops.append((_CMP[type(op)], operand(right)))

            def cmp(env, left=left, ops=ops):
                a = left(env)
                for fn, right in ops:
                    b = right(env)
                    try:
                        if not fn(a, b):
                            return False
                    except TypeError:
                        return False
                    a = b
                return True

            return cmp
        raise ConfigError(f"unsupported expression {type(node).__name__}")

    def operand(node: ast.expr) -> Callable[[dict[str, _View]], Any]:
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise ConfigError(f"unknown hp {node.id!r} in filter; known: {sorted(names)}")
            return lambda env, n=node.id: env[n]
        if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
            if node.value.id not in names:
                raise ConfigError(f"unknown hp {node.value.id!r} in filter; known: {sorted(names)}")
            return lambda env, n=node.value.id, a=node.attr: env[n].attr(a)
        v = _literal(node)
        return lambda env: v

    fn = build(tree.body)
    return lambda choice: bool(fn({hp: _View(c) for hp, c in choice.items()}))
