"""Pilot sub-sequence windows for chosen and rejected responses."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import InputError, SequenceTrace, span_logprob


class ConfigError(ValueError):
    pass


class SpanMode(str, enum.Enum):
    SAME_INDEX = "same"  # Pilot_s
    DIFFERENT_INDEX = "different"  # Pilot_d

    @classmethod
    def parse(cls, value: "str | SpanMode") -> "SpanMode":
        if isinstance(value, cls):
            return value
        aliases = {"same": cls.SAME_INDEX, "s": cls.SAME_INDEX, "different": cls.DIFFERENT_INDEX, "d": cls.DIFFERENT_INDEX}
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise ConfigError(f"unknown span mode {value!r}; expected 'same' or 'different'") from None


@dataclass(frozen=True)
class SpanSpec:
    start_w: int
    len_w: int
    start_l: int
    len_l: int
    mode: SpanMode
    r1: float
    r2: float

    @property
    def chosen(self) -> tuple[int, int]:
        return self.start_w, self.len_w

    @property
    def rejected(self) -> tuple[int, int]:
        return self.start_l, self.len_l


def span_length(ratio: float, common_len: int) -> int:
    # the 1e-9 guard keeps e.g. 0.7 * 10 from flooring to 6
    return max(1, math.floor(ratio * common_len + 1e-9))


def _check_ratio(name: str, r: float) -> None:
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"{name} must lie in (0, 1], got {r}")


def span_seed(global_seed: int, example_index: int, epoch: int) -> int:
    """Per-example, per-epoch seed so spans are redrawn every epoch."""
    return int(np.random.SeedSequence([global_seed, example_index, epoch]).generate_state(1)[0])


def build_spans(
    chosen_len: int,
    rejected_len: int,
    r1: float,
    r2: float,
    mode: SpanMode | str = SpanMode.DIFFERENT_INDEX,
    rng_seed: int = 0,
) -> SpanSpec:
    """Draw contiguous windows of lengths floor(r * min(len_w, len_l)).

    In same-index mode one start is shared, drawn from the range valid for
    both responses; otherwise each start is drawn independently.
    """
    _check_ratio("r1", r1)
    _check_ratio("r2", r2)
    if chosen_len < 1 or rejected_len < 1:
        raise InputError("response lengths must be at least 1")
    mode = SpanMode.parse(mode)
    common = min(chosen_len, rejected_len)
    len_w, len_l = span_length(r1, common), span_length(r2, common)
    rng = np.random.default_rng(rng_seed)
    if mode is SpanMode.SAME_INDEX:
        start = int(rng.integers(0, min(chosen_len - len_w, rejected_len - len_l) + 1))
        start_w = start_l = start
    else:
        start_w = int(rng.integers(0, chosen_len - len_w + 1))
        start_l = int(rng.integers(0, rejected_len - len_l + 1))
    return SpanSpec(start_w, len_w, start_l, len_l, mode, float(r1), float(r2))


def pilot_trace(policy_trace: SequenceTrace, ref_trace: SequenceTrace, span: tuple[int, int]) -> float:
    """log(pi_pilot(span) / pi_ref(span)) as a plain float (no gradient)."""
    if len(policy_trace) != len(ref_trace):
        raise InputError(f"trace lengths differ: {len(policy_trace)} vs {len(ref_trace)}")
    start, length = span
    return span_logprob(policy_trace, start, length) - span_logprob(ref_trace, start, length)
