from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, SchemaViolation


@dataclass(frozen=True)
class SpanAnnotation:
    """Answer and reasoning token spans as half-open (start, stop) pairs.

    `cot` is None when the output carried no reasoning field. Field-label
    tokens are never inside either span.
    """

    ans: tuple[int, int]
    cot: tuple[int, int] | None = None

    def __post_init__(self):
        for name, span in (("ans", self.ans), ("cot", self.cot)):
            if span is not None and (span[0] < 0 or span[1] < span[0]):
                raise SchemaViolation(f"malformed {name} span {span}")
        if self.cot is not None and self.has_cot:
            a0, a1 = self.ans
            c0, c1 = self.cot
            if a0 < c1 and c0 < a1:
                raise SchemaViolation(f"answer span {self.ans} overlaps reasoning span {self.cot}")

    @property
    def has_cot(self) -> bool:
        return self.cot is not None and self.cot[1] > self.cot[0]

    def positions(self, which: str) -> list[int]:
        if which == "ans":
            return list(range(*self.ans))
        if which == "cot":
            return list(range(*self.cot)) if self.has_cot else []
        if which == "both":
            return sorted(set(self.positions("ans")) | set(self.positions("cot")))
        raise ValueError(f"unknown span selector {which!r}")

    def check_within(self, length: int) -> None:
        for span in (self.ans, self.cot):
            if span is not None and span[1] > length:
                raise SchemaViolation(f"span {span} exceeds sequence length {length}")


@dataclass(frozen=True)
class ActivationTrace:
    """Hidden states for every layer and token of one forward pass (n_layers x T x d)."""

    states: np.ndarray
    tokens: tuple[int, ...]
    spans: SpanAnnotation | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.states.ndim != 3:
            raise DimMismatch(f"states must be n_layers x T x d, got {self.states.shape}")
        if self.states.shape[1] != len(self.tokens):
            raise DimMismatch("token count does not match the state sequence length")
        if self.spans is not None:
            self.spans.check_within(len(self.tokens))

    @property
    def n_layers(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def at(self, layer: int, t: int = -1) -> np.ndarray:
        return self.states[layer, t]
