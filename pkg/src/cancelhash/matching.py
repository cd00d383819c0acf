"""Positional agreement score between two protected templates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, IncompatibleTemplateError
from .hashing import HashCode


@dataclass(frozen=True)
class MatchScore:
    matches: int
    n: int

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.matches <= self.n:
            raise DomainError(f"invalid match count {self.matches}/{self.n}")

    @property
    def score(self) -> float:
        return self.matches / self.n


def similarity(enrolled: HashCode, queried: HashCode) -> MatchScore:
    if len(enrolled.code) != len(queried.code):
        raise IncompatibleTemplateError(
            f"template lengths differ: {len(enrolled.code)} vs {len(queried.code)}"
        )
    if enrolled.params_digest != queried.params_digest:
        raise IncompatibleTemplateError("templates were built with different parameters")
    matches = sum(a == b for a, b in zip(enrolled.code, queried.code))
    return MatchScore(matches, len(enrolled.code))


def decide(score: MatchScore, threshold: float) -> bool:
    """Accept iff ``score >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold {threshold!r} outside [0, 1]")
    return score.score >= threshold


def agreement(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise fraction of equal entries for two ``(N, n)`` code arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise IncompatibleTemplateError(f"code arrays differ in shape: {a.shape} vs {b.shape}")
    return (a == b).sum(axis=-1) / a.shape[-1]
