"""Cost model and synthetic training oracle for the simulator."""

from __future__ import annotations

import hashlib
import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from ..errors import ConfigError
from ..hpseq import Family, config_text, to_rational, value_at
from ..plan import SearchPlan

US = 1_000_000


@dataclass(frozen=True)
class CostModel:
    """Simulated timing, all in seconds.

    The per-step cost is ``step_seconds`` times a batch-size multiplier: an
    explicit ``batch_scale`` entry if present, else ``bs / batch_reference``
    when a reference batch size is set, else 1.
    """

    step_seconds: Fraction = Fraction(1, 10)
    save_seconds: Fraction = Fraction(0)
    load_seconds: Fraction = Fraction(0)
    eval_seconds: Fraction = Fraction(0)
    workers: int = 1
    batch_hp: str = "bs"
    batch_scale: tuple[tuple[Fraction, Fraction], ...] = ()
    batch_reference: Fraction | None = None

    def __post_init__(self) -> None:
        for name in ("step_seconds", "save_seconds", "load_seconds", "eval_seconds"):
            v = to_rational(getattr(self, name), name)
            if v < 0:
                raise ConfigError(f"cost.{name} must be non-negative")
            object.__setattr__(self, name, v)
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be an integer >= 1")
        scale = self.batch_scale.items() if isinstance(self.batch_scale, Mapping) else self.batch_scale
        norm = tuple(sorted((to_rational(k, "batch size"), to_rational(v, "batch scale")) for k, v in scale))
        if any(v < 0 for _, v in norm):
            raise ConfigError("batch scale factors must be non-negative")
        object.__setattr__(self, "batch_scale", norm)
        if self.batch_reference is not None:
            ref = to_rational(self.batch_reference, "batch_reference")
            if ref <= 0:
                raise ConfigError("batch_reference must be positive")
            object.__setattr__(self, "batch_reference", ref)

    @classmethod
    def zero_overhead(cls, step_seconds: Any = 1, workers: int = 1, **kw: Any) -> "CostModel":
        return cls(step_seconds=to_rational(step_seconds), workers=workers, **kw)

    def multiplier(self, batch_size: Any) -> Fraction:
        if batch_size is None:
            return Fraction(1)
        for k, v in self.batch_scale:
            if k == batch_size:
                return v
        if self.batch_reference is not None and isinstance(batch_size, Fraction):
            return batch_size / self.batch_reference
        return Fraction(1)

    def seconds_per_step(self, batch_size: Any = None) -> Fraction:
        return self.step_seconds * self.multiplier(batch_size)

    def node_seconds_per_step(self, plan: SearchPlan, node_id: int, step: int) -> Fraction:
        return self.seconds_per_step(_batch_value(plan, node_id, step, self.batch_hp))

    def train_seconds(self, plan: SearchPlan, node_id: int, start: int, end: int) -> Fraction:
        """Exact cost of training ``node_id`` over ``[start, end)``."""
        node = plan.nodes[node_id]
        entry = next((e for e in node.hp_config if e[0] == self.batch_hp), None)
        if entry is None or entry[1].family is Family.CONSTANT:
            bs = entry[1]["value"] if entry is not None else None
            return (end - start) * self.seconds_per_step(bs)
        _, fn, pos = entry
        total = Fraction(0)
        for t in range(start, end):
            total += self.seconds_per_step(value_at(fn, pos + t - node.start_step))
        return total

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "step_seconds": _num(self.step_seconds),
            "save_seconds": _num(self.save_seconds),
            "load_seconds": _num(self.load_seconds),
            "eval_seconds": _num(self.eval_seconds),
            "batch_hp": self.batch_hp,
        }
        if self.batch_scale:
            out["batch_scale"] = {_key(k): _num(v) for k, v in self.batch_scale}
        if self.batch_reference is not None:
            out["batch_reference"] = _num(self.batch_reference)
        return out


def _num(v: Fraction) -> int | float | str:
    if v.denominator == 1:
        return int(v)
    f = float(v)
    return f if to_rational(f) == v else f"{v.numerator}/{v.denominator}"


def _key(v: Fraction) -> str:
    return str(int(v)) if v.denominator == 1 else str(float(v))


def _batch_value(plan: SearchPlan, node_id: int, step: int, hp: str) -> Any:
    node = plan.nodes[node_id]
    for name, fn, pos in node.hp_config:
        if name == hp:
            return value_at(fn, pos + max(0, step - node.start_step))
    return None


def to_us(seconds: Fraction) -> int:
    """Seconds to integer microseconds, rounding half to even."""
    return round(Fraction(seconds) * US)


# ------------------------------------------------------------------ oracle

Signature = tuple[tuple[int, int, str], ...]


def prefix_signature(plan: SearchPlan, node_id: int, step: int) -> Signature:
    """Canonical description of the hp values over ``[0, step)`` on a node's path."""
    return tuple((a, b, config_text(cfg)) for a, b, cfg in plan.path_segments(node_id, step) if b > a)


def _unit(*parts: Any) -> float:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return struct.unpack(">Q", h)[0] / 2**64


@dataclass(frozen=True)
class SyntheticOracle:
    """Deterministic stand-in for training: accuracy as a function of the value prefix.

    ``acc(s) = A * (1 - exp(-s / tau)) + noise`` where ``A`` is a length-weighted
    average of per-segment hashes and the noise is a small hash of
    ``(prefix, s, seed)``.  Nothing depends on how the prefix was split into
    stages.
    """

    seed: int = 0
    tau: float = 40.0
    noise: float = 0.01
    metric: str = "acc"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __call__(self, signature: Signature, step: int) -> dict[str, float]:
        key = (signature, step)
        hit = self._cache.get(key)
        if hit is not None:
            return dict(hit)
        weight = sum(b - a for a, b, _ in signature) or 1
        asym = sum((b - a) * _unit("seg", a, text, self.seed) for a, b, text in signature) / weight
        a_inf = 0.5 + 0.45 * asym
        value = a_inf * (1.0 - math.exp(-step / self.tau)) + self.noise * (_unit("n", signature, step, self.seed) - 0.5)
        record = {self.metric: round(value, 12)}
        self._cache[key] = record
        return dict(record)

    def at(self, plan: SearchPlan, node_id: int, step: int) -> dict[str, float]:
        return self(prefix_signature(plan, node_id, step), step)
