"""Hyper-parameter sequences: functions of the training step.

A trial's hyper-parameters are modelled as piecewise functions of the step.
Two trials share computation exactly as long as every hyper-parameter agrees
pointwise, so this module provides evaluation, a canonical form that makes
agreement a structural check, splitting, and prefix comparison.

Values are :class:`fractions.Fraction` so equality never depends on a float
tolerance.  Piecewise-constant families (CONSTANT, STEP) canonicalize into
maximal constant runs; the other families stay atomic and are compared by
``(family, params, local position)``.
"""

from __future__ import annotations

import bisect
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

from .errors import BoundsError, ConfigError

Value = Union[Fraction, str]


class Family(str, Enum):
    CONSTANT = "CONSTANT"
    STEP = "STEP"
    EXPONENTIAL = "EXPONENTIAL"
    LINEAR = "LINEAR"
    COSINE_RESTARTS = "COSINE_RESTARTS"
    CYCLIC = "CYCLIC"
    WARMUP_PREFIX = "WARMUP_PREFIX"


PIECEWISE_CONSTANT = frozenset({Family.CONSTANT, Family.STEP})

# name -> (required params, optional params with defaults)
_SCHEMA: dict[Family, tuple[tuple[str, ...], dict[str, Any]]] = {
    Family.CONSTANT: (("value",), {}),
    Family.STEP: (("values", "milestones"), {}),
    Family.EXPONENTIAL: (("initial", "gamma"), {}),
    Family.LINEAR: (("start", "total"), {"end": Fraction(0)}),
    Family.COSINE_RESTARTS: (("initial", "t0"), {"eta_min": Fraction(0), "t_mult": 1}),
    Family.CYCLIC: (("base", "max", "step_up"), {"step_down": None}),
    Family.WARMUP_PREFIX: (("duration", "target", "inner"), {"start": Fraction(0)}),
}

# Params measured in steps; these must be non-negative integers.
_STEP_PARAMS = frozenset({"milestones", "total", "t0", "t_mult", "step_up", "step_down", "duration"})


def to_value(x: Any) -> Value:
    """Coerce a user-supplied number into an exact rational.

    Floats go through ``repr`` so ``0.1`` becomes ``1/10`` rather than the
    binary approximation.  Non-numeric strings are kept as categorical values.
    """
    if isinstance(x, bool):
        raise ConfigError(f"boolean is not a valid hyper-parameter value: {x!r}")
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ConfigError(f"non-finite value {x!r}")
        return Fraction(repr(x))
    if isinstance(x, str):
        try:
            return Fraction(x.strip())
        except (ValueError, ZeroDivisionError):
            return x
    raise ConfigError(f"unsupported value {x!r}")


def to_rational(x: Any, name: str = "value") -> Fraction:
    v = to_value(x)
    if not isinstance(v, Fraction):
        raise ConfigError(f"{name} must be numeric, got {x!r}")
    return v


def to_steps(x: Any, name: str) -> int:
    v = to_rational(x, name)
    if v.denominator != 1 or v < 0:
        raise ConfigError(f"{name} must be a non-negative integer step count, got {x!r}")
    return int(v)


def format_value(v: Any) -> str:
    """Exact text for a value: decimal when it terminates, ``p/q`` otherwise."""
    if isinstance(v, HpFunction):
        return v.text()
    if isinstance(v, tuple):
        return "[" + ",".join(format_value(x) for x in v) + "]"
    if isinstance(v, str):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    q = Fraction(v)
    if q.denominator == 1:
        return str(q.numerator)
    d = q.denominator
    twos = fives = 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{q.numerator}/{q.denominator}"
    places = max(twos, fives)
    scaled = q * 10**places
    sign = "-" if scaled < 0 else ""
    digits = str(abs(scaled.numerator)).rjust(places + 1, "0")
    return f"{sign}{digits[:-places]}.{digits[-places:]}"


@dataclass(frozen=True)
class HpFunction:
    """A named function family with exact parameters.

    ``params`` is a sorted tuple of ``(name, value)`` pairs so instances hash
    and compare structurally.  Use the module-level constructors
    (:func:`constant`, :func:`exponential`, ...) or :meth:`create`.
    """

    family: Family
    params: tuple[tuple[str, Any], ...]

    @classmethod
    def create(cls, family: Family | str, **params: Any) -> "HpFunction":
        fam = _family(family)
        required, optional = _SCHEMA[fam]
        unknown = set(params) - set(required) - set(optional)
        if unknown:
            raise ConfigError(f"{fam.value}: unknown parameter(s) {sorted(unknown)}")
        missing = [p for p in required if params.get(p) is None]
        if missing:
            raise ConfigError(f"{fam.value}: missing parameter(s) {missing}")
        norm: dict[str, Any] = {}
        for name in (*required, *optional):
            raw = params.get(name, optional.get(name))
            if raw is None:
                continue
            norm[name] = _normalize_param(fam, name, raw)
        fn = cls(fam, tuple(sorted(norm.items())))
        fn._validate()
        return fn

    def __getitem__(self, name: str) -> Any:
        for k, v in self.params:
            if k == name:
                return v
        raise KeyError(name)

    def get(self, name: str, default: Any = None) -> Any:
        try:
            return self[name]
        except KeyError:
            return default

    @property
    def is_piecewise_constant(self) -> bool:
        return self.family in PIECEWISE_CONSTANT

    def _validate(self) -> None:
        fam = self.family
        if fam is Family.STEP:
            ms, vs = self["milestones"], self["values"]
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ConfigError("STEP milestones must be strictly increasing")
            if len(vs) != len(ms) + 1:
                raise ConfigError("STEP needs exactly one more value than milestones")
        elif fam is Family.EXPONENTIAL:
            if self["gamma"] <= 0:
                raise ConfigError("gamma must be > 0")
        elif fam is Family.LINEAR:
            if self["total"] < 1:
                raise ConfigError("LINEAR total must be >= 1 step")
        elif fam is Family.COSINE_RESTARTS:
            if self["t0"] < 1 or self["t_mult"] < 1:
                raise ConfigError("COSINE_RESTARTS t0 and t_mult must be >= 1")
        elif fam is Family.CYCLIC:
            if self["step_up"] < 1 or (self.get("step_down") is not None and self["step_down"] < 1):
                raise ConfigError("CYCLIC step sizes must be >= 1")
        elif fam is Family.WARMUP_PREFIX:
            if self["duration"] < 1:
                raise ConfigError("warmup duration must be >= 1 step")
            if not isinstance(self["inner"], HpFunction):
                raise ConfigError("WARMUP_PREFIX inner must be a function")

    def text(self) -> str:
        body = ",".join(f"{k}={format_value(v)}" for k, v in self.params)
        return f"{self.family.value}({body})"

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family.value}
        for k, v in self.params:
            out[k] = _param_to_json(v)
        return out

    def __str__(self) -> str:
        return self.text()


def _param_to_json(v: Any) -> Any:
    if isinstance(v, HpFunction):
        return v.to_json()
    if isinstance(v, tuple):
        return [_param_to_json(x) for x in v]
    if isinstance(v, Fraction):
        return format_value(v)
    return v


def _family(family: Family | str) -> Family:
    if isinstance(family, Family):
        return family
    key = str(family).strip().upper()
    key = _ALIASES.get(key, key)
    try:
        return Family(key)
    except ValueError:
        supported = ", ".join(f.value for f in Family)
        raise ConfigError(f"unknown function family {family!r}; supported: {supported}") from None


def _normalize_param(fam: Family, name: str, raw: Any) -> Any:
    if name == "inner":
        if isinstance(raw, HpFunction):
            return raw
        if isinstance(raw, Mapping):
            return function_from_json(raw)
        if isinstance(raw, str):
            return parse_function(raw)
        raise ConfigError(f"{fam.value}.inner must be a function descriptor")
    if name in ("values", "milestones"):
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{fam.value}.{name} must be a list")
        if name == "milestones":
            return tuple(to_steps(x, f"{fam.value}.milestones") for x in raw)
        return tuple(to_value(x) for x in raw)
    if name in _STEP_PARAMS:
        return to_steps(raw, f"{fam.value}.{name}")
    if fam is Family.CONSTANT:
        return to_value(raw)
    return to_rational(raw, f"{fam.value}.{name}")


# ---------------------------------------------------------------- constructors


def constant(value: Any) -> HpFunction:
    return HpFunction.create(Family.CONSTANT, value=value)


def multistep(values: Sequence[Any], milestones: Sequence[int]) -> HpFunction:
    return HpFunction.create(Family.STEP, values=list(values), milestones=list(milestones))


def step_decay(initial: Any, gamma: Any, milestones: Sequence[int]) -> HpFunction:
    """StepLR-style decay: ``initial * gamma**k`` after the k-th milestone."""
    init, g = to_rational(initial), to_rational(gamma)
    values = [init * g**k for k in range(len(milestones) + 1)]
    return multistep(values, milestones)


def exponential(initial: Any, gamma: Any) -> HpFunction:
    return HpFunction.create(Family.EXPONENTIAL, initial=initial, gamma=gamma)


def linear(start: Any, total: int, end: Any = 0) -> HpFunction:
    return HpFunction.create(Family.LINEAR, start=start, end=end, total=total)


def cosine_restarts(initial: Any, t0: int, eta_min: Any = 0, t_mult: int = 1) -> HpFunction:
    return HpFunction.create(Family.COSINE_RESTARTS, initial=initial, t0=t0, eta_min=eta_min, t_mult=t_mult)


def cyclic(base: Any, max: Any, step_up: int, step_down: int | None = None) -> HpFunction:
    return HpFunction.create(Family.CYCLIC, base=base, max=max, step_up=step_up, step_down=step_down)


def warmup(duration: int, target: Any, inner: HpFunction, start: Any = 0) -> HpFunction:
    """Linear ramp from ``start`` to ``target`` over ``duration`` steps, then ``inner``.

    ``inner`` is evaluated on its own clock, which starts when the ramp ends.
    """
    return HpFunction.create(Family.WARMUP_PREFIX, duration=duration, target=target, inner=inner, start=start)


# ------------------------------------------------------------------ evaluation


def value_at(f: HpFunction, local_step: int) -> Value:
    """Value of ``f`` at ``local_step`` steps into its own domain.

    STEP is right-continuous: the value changes at the milestone itself.
    COSINE_RESTARTS is the one family without rational values; its result is
    the exact rational of the IEEE double.
    """
    if local_step < 0:
        raise BoundsError(f"local step must be >= 0, got {local_step}")
    fam = f.family
    t = local_step
    if fam is Family.CONSTANT:
        return f["value"]
    if fam is Family.STEP:
        return f["values"][bisect.bisect_right(f["milestones"], t)]
    if fam is Family.EXPONENTIAL:
        return f["initial"] * f["gamma"] ** t
    if fam is Family.LINEAR:
        start, end, total = f["start"], f["end"], f["total"]
        return start + (end - start) * Fraction(min(t, total), total)
    if fam is Family.COSINE_RESTARTS:
        t_i, t_cur = f["t0"], t
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= f["t_mult"]
        lo, hi = f["eta_min"], f["initial"]
        if t_cur == 0:
            return hi
        return to_rational(float(lo) + (float(hi) - float(lo)) * (1 + math.cos(math.pi * t_cur / t_i)) / 2)
    if fam is Family.CYCLIC:
        up = f["step_up"]
        down = f.get("step_down") or up
        x = t % (up + down)
        base, top = f["base"], f["max"]
        if x < up:
            return base + (top - base) * Fraction(x, up)
        return top - (top - base) * Fraction(x - up, down)
    if fam is Family.WARMUP_PREFIX:
        d = f["duration"]
        if t < d:
            return f["start"] + (f["target"] - f["start"]) * Fraction(t, d)
        return value_at(f["inner"], t - d)
    raise ConfigError(f"unknown family {fam!r}")


# -------------------------------------------------------------------- segments


@dataclass(frozen=True)
class Segment:
    function: HpFunction
    local_start: int
    duration: int

    def __post_init__(self) -> None:
        if self.duration < 1:
            raise ConfigError("segment duration must be >= 1")
        if self.local_start < 0:
            raise ConfigError("segment local_start must be >= 0")

    def value(self, offset: int) -> Value:
        return value_at(self.function, self.local_start + offset)

    def text(self) -> str:
        return f"{self.function.text()}@{self.local_start}x{self.duration}"


@dataclass(frozen=True)
class HpSequence:
    hp_name: str
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigError(f"sequence {self.hp_name!r} has no segments")

    @classmethod
    def of(cls, hp_name: str, function: HpFunction, steps: int) -> "HpSequence":
        return cls(hp_name, (Segment(function, 0, steps),))

    @property
    def length(self) -> int:
        return sum(s.duration for s in self.segments)

    def spans(self) -> Iterator[tuple[int, Segment]]:
        """Yield ``(absolute start, segment)`` pairs."""
        pos = 0
        for seg in self.segments:
            yield pos, seg
            pos += seg.duration

    def value(self, step: int) -> Value:
        if not 0 <= step < self.length:
            raise BoundsError(f"step {step} outside [0, {self.length})")
        for start, seg in self.spans():
            if step < start + seg.duration:
                return seg.value(step - start)
        raise AssertionError("unreachable")

    def values(self) -> list[Value]:
        return [seg.value(k) for _, seg in self.spans() for k in range(seg.duration)]

    def then(self, other: "HpSequence") -> "HpSequence":
        return HpSequence(self.hp_name, self.segments + other.segments)

    def text(self) -> str:
        return " | ".join(s.text() for s in self.segments)


def _expand(f: HpFunction, local_start: int, duration: int) -> list[Segment]:
    """Break one segment into canonical pieces (before run coalescing)."""
    fam = f.family
    if fam is Family.CONSTANT:
        return [Segment(f, 0, duration)]
    if fam is Family.STEP:
        out: list[Segment] = []
        ms = f["milestones"]
        pos, stop = local_start, local_start + duration
        while pos < stop:
            k = bisect.bisect_right(ms, pos)
            nxt = ms[k] if k < len(ms) else stop
            end = min(nxt, stop)
            out.append(Segment(constant(f["values"][k]), 0, end - pos))
            pos = end
        return out
    if fam is Family.WARMUP_PREFIX:
        d = f["duration"]
        out = []
        stop = local_start + duration
        if local_start < d:
            ramp = linear(f["start"], d, f["target"])
            out.append(Segment(ramp, local_start, min(stop, d) - local_start))
        if stop > d:
            inner_start = max(local_start, d) - d
            out.extend(_expand(f["inner"], inner_start, stop - max(local_start, d)))
        return out
    return [Segment(f, local_start, duration)]


def _coalesce(pieces: Iterable[Segment]) -> tuple[Segment, ...]:
    out: list[Segment] = []
    for seg in pieces:
        if out:
            prev = out[-1]
            if prev.function == seg.function and (
                prev.function.family is Family.CONSTANT
                or prev.local_start + prev.duration == seg.local_start
            ):
                out[-1] = Segment(prev.function, prev.local_start, prev.duration + seg.duration)
                continue
        out.append(seg)
    return tuple(out)


def canonicalize(seq: HpSequence) -> HpSequence:
    """Normal form in which pointwise-equal prefixes are structurally equal.

    CONSTANT and STEP become maximal CONSTANT runs (local start 0); warmup
    ramps become LINEAR pieces; contiguous pieces of the same continuous
    function are joined.
    """
    pieces: list[Segment] = []
    for seg in seq.segments:
        pieces.extend(_expand(seg.function, seg.local_start, seg.duration))
    return HpSequence(seq.hp_name, _coalesce(pieces))


def split_at(seq: HpSequence, step: int) -> tuple[HpSequence, HpSequence]:
    if not 0 < step < seq.length:
        raise BoundsError(f"split step {step} outside (0, {seq.length})")
    head: list[Segment] = []
    tail: list[Segment] = []
    for start, seg in seq.spans():
        end = start + seg.duration
        if end <= step:
            head.append(seg)
        elif start >= step:
            tail.append(seg)
        else:
            k = step - start
            head.append(Segment(seg.function, seg.local_start, k))
            tail.append(Segment(seg.function, seg.local_start + k, seg.duration - k))
    return HpSequence(seq.hp_name, tuple(head)), HpSequence(seq.hp_name, tuple(tail))


def _position(seg: Segment, offset: int) -> int:
    # constants have no clock; their local position is irrelevant
    return 0 if seg.function.family is Family.CONSTANT else seg.local_start + offset


def _sequence_prefix(a: HpSequence, b: HpSequence) -> int:
    sa, sb = list(canonicalize(a).spans()), list(canonicalize(b).spans())
    i = j = pos = 0
    while i < len(sa) and j < len(sb):
        (a0, x), (b0, y) = sa[i], sb[j]
        if x.function != y.function or _position(x, pos - a0) != _position(y, pos - b0):
            return pos
        ea, eb = a0 + x.duration, b0 + y.duration
        pos = min(ea, eb)
        if ea == pos:
            i += 1
        if eb == pos:
            j += 1
    return pos


# ---------------------------------------------------------------------- trials

HpState = tuple[str, HpFunction, int]
"""``(hp name, canonical function, local position)`` at some step."""

JointConfig = tuple[HpState, ...]
"""Per-hp states sorted by hp name: the configuration in force at a step."""


@dataclass(frozen=True)
class TrialConfig:
    sequences: Mapping[str, HpSequence]
    total_steps: int
    _canon: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("trial must train at least one step")
        for name, seq in self.sequences.items():
            if seq.hp_name != name:
                raise ConfigError(f"sequence keyed {name!r} is named {seq.hp_name!r}")
            if seq.length != self.total_steps:
                raise ConfigError(
                    f"sequence {name!r} covers {seq.length} steps, trial has {self.total_steps}"
                )
        object.__setattr__(self, "sequences", dict(sorted(self.sequences.items())))

    @classmethod
    def from_functions(cls, functions: Mapping[str, HpFunction], steps: int) -> "TrialConfig":
        return cls({hp: HpSequence.of(hp, f, steps) for hp, f in functions.items()}, steps)

    @property
    def hp_set(self) -> frozenset[str]:
        return frozenset(self.sequences)

    def canonical(self) -> dict[str, HpSequence]:
        if not self._canon:
            self._canon.update({hp: canonicalize(s) for hp, s in self.sequences.items()})
        return self._canon

    def truncate(self, steps: int) -> "TrialConfig":
        if steps == self.total_steps:
            return self
        if not 0 < steps < self.total_steps:
            raise BoundsError(f"cannot truncate {self.total_steps}-step trial to {steps}")
        return TrialConfig({hp: split_at(s, steps)[0] for hp, s in self.sequences.items()}, steps)

    def joint_segments(self) -> list[tuple[int, int, JointConfig]]:
        """Maximal intervals ``[start, end)`` over which no hp changes function."""
        canon = self.canonical()
        spans = {hp: list(s.spans()) for hp, s in canon.items()}
        cuts = sorted({start for sp in spans.values() for start, _ in sp} | {self.total_steps})
        out = []
        idx = {hp: 0 for hp in spans}
        for a, b in zip(cuts, cuts[1:]):
            states = []
            for hp, sp in spans.items():
                k = idx[hp]
                while sp[k][0] + sp[k][1].duration <= a:
                    k += 1
                idx[hp] = k
                s0, seg = sp[k]
                states.append((hp, seg.function, _position(seg, a - s0)))
            out.append((a, b, tuple(states)))
        return out

    def text(self) -> str:
        return "; ".join(f"{hp}: {seq.text()}" for hp, seq in self.sequences.items())


def common_prefix_steps(a: TrialConfig, b: TrialConfig) -> int:
    """Number of leading steps over which ``a`` and ``b`` agree for every hp."""
    if a.hp_set != b.hp_set:
        raise ConfigError(f"hp sets differ: {sorted(a.hp_set)} vs {sorted(b.hp_set)}")
    ca, cb = a.canonical(), b.canonical()
    return min(_sequence_prefix(ca[hp], cb[hp]) for hp in ca)


def config_text(config: JointConfig) -> str:
    """``hp=FAMILY(k=v,...)@pos`` joined by ``;`` (canonical dump form)."""
    return ";".join(f"{hp}={fn.text()}@{pos}" for hp, fn, pos in config)


# ---------------------------------------------------------------- text & json

_ALIASES = {
    "MULTISTEP": "STEP",
    "MULTISTEPLR": "STEP",
    "STEPLR": "STEP",
    "EXPONENTIALLR": "EXPONENTIAL",
    "COSINE": "COSINE_RESTARTS",
    "COSINEANNEALINGWARMRESTARTS": "COSINE_RESTARTS",
    "CYCLICLR": "CYCLIC",
    "WARMUP": "WARMUP_PREFIX",
}

# Positional argument order accepted by the text parser.
_POSITIONAL = {
    Family.CONSTANT: ("value",),
    Family.STEP: ("values", "milestones"),
    Family.EXPONENTIAL: ("initial", "gamma"),
    Family.LINEAR: ("start", "total", "end"),
    Family.COSINE_RESTARTS: ("initial", "t0", "eta_min", "t_mult"),
    Family.CYCLIC: ("base", "max", "step_up", "step_down"),
    Family.WARMUP_PREFIX: ("duration", "target", "inner", "start"),
}

_TOKEN = re.compile(r"\s*(?:(?P<str>'[^']*'|\"[^\"]*\")|(?P<sym>[A-Za-z_][A-Za-z0-9_]*)|(?P<num>[-+]?[0-9.]+(?:[eE][-+]?[0-9]+)?(?:/[0-9]+)?)|(?P<punct>[()\[\],=@]))")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks: list[tuple[str, str]] = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m:
                raise ConfigError(f"cannot parse function text {self.text!r} at offset {pos}")
            kind = m.lastgroup
            assert kind is not None
            self.toks.append((kind, m.group(kind)))
            pos = m.end()
        self.i = 0

    def peek(self) -> tuple[str, str] | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expect: str | None = None) -> tuple[str, str]:
        tok = self.peek()
        if tok is None or (expect is not None and tok[1] != expect):
            raise ConfigError(f"malformed function text {self.text!r}: expected {expect or 'token'}")
        self.i += 1
        return tok

    def function(self) -> HpFunction:
        kind, name = self.take()
        if kind != "sym":
            raise ConfigError(f"malformed function text {self.text!r}")
        fam = _family(name)
        self.take("(")
        pos_args: list[Any] = []
        kw: dict[str, Any] = {}
        if self.peek() and self.peek()[1] != ")":
            while True:
                tok = self.peek()
                nxt = self.toks[self.i + 1] if self.i + 1 < len(self.toks) else None
                if tok and tok[0] == "sym" and nxt and nxt[1] == "=":
                    self.i += 2
                    kw[tok[1]] = self.arg()
                else:
                    pos_args.append(self.arg())
                if self.peek() and self.peek()[1] == ",":
                    self.i += 1
                    continue
                break
        self.take(")")
        order = _POSITIONAL[fam]
        if fam is Family.STEP and pos_args and not isinstance(pos_args[0], list):
            # MultiStep(initial, milestones, factor)
            names = ("initial", "milestones", "gamma")
            args = dict(zip(names, pos_args)) | kw
            return step_decay(args["initial"], args.get("gamma", Fraction(1, 10)), args["milestones"])
        if fam is Family.STEP and "initial" in kw:
            return step_decay(kw["initial"], kw.get("gamma", Fraction(1, 10)), kw["milestones"])
        if len(pos_args) > len(order):
            raise ConfigError(f"{fam.value}: too many positional arguments")
        kw.update(zip(order, pos_args))
        return HpFunction.create(fam, **kw)

    def arg(self) -> Any:
        tok = self.peek()
        if tok is None:
            raise ConfigError(f"malformed function text {self.text!r}")
        kind, val = tok
        if val == "[":
            self.i += 1
            items = []
            while self.peek() and self.peek()[1] != "]":
                items.append(self.arg())
                if self.peek() and self.peek()[1] == ",":
                    self.i += 1
            self.take("]")
            return items
        if kind == "sym":
            return self.function()
        self.i += 1
        if kind == "str":
            return val[1:-1]
        if kind == "num":
            return to_rational(val)
        raise ConfigError(f"malformed function text {self.text!r}")


def parse_function(text: str) -> HpFunction:
    """Parse ``FAMILY(k=v,...)`` or positional forms like ``MultiStep(128, [40], 2)``."""
    p = _Parser(text)
    fn = p.function()
    if p.peek() is not None:
        raise ConfigError(f"trailing input in function text {text!r}")
    return fn


def parse_segment_text(text: str) -> tuple[HpFunction, int]:
    """Parse the dump form ``FAMILY(...)@local_start``."""
    body, sep, tail = text.rpartition("@")
    if not sep:
        return parse_function(text), 0
    return parse_function(body), to_steps(tail, "local_start")


def function_from_json(obj: Mapping[str, Any] | str) -> HpFunction:
    if isinstance(obj, str):
        return parse_function(obj)
    if "family" not in obj:
        raise ConfigError("function descriptor needs a 'family' field")
    params = {k: v for k, v in obj.items() if k != "family"}
    fam = _family(obj["family"])
    if fam is Family.STEP and "initial" in params:
        return step_decay(params["initial"], params.get("gamma", Fraction(1, 10)), params["milestones"])
    return HpFunction.create(fam, **params)
