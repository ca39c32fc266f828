"""Oracles driven by fixed scripts, for tests and adversarial harness cases."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

from ..core import Rect, TargetSet
from .base import ExpertProposal, OracleSuite


def region_key(region: Rect, ndigits: int = 6) -> tuple[float, float, float, float]:
    return tuple(round(v, ndigits) for v in region.as_list())


def by_region(table: Mapping, default: float = 0.0) -> Callable[[Rect, str], float]:
    """Script keyed by region; keys may be Rects or 4-tuples."""
    keyed = {region_key(k if isinstance(k, Rect) else Rect.from_seq(k)): v for k, v in table.items()}

    def lookup(region: Rect, _text: str) -> float:
        return keyed.get(region_key(region), default)

    return lookup


def constant(value: float) -> Callable[[Rect, str], float]:
    return lambda _region, _text: value


class ScriptedOracles(OracleSuite):
    def __init__(
        self,
        sufficiency: Callable[[Rect, str], float] | float = 0.0,
        existence: Callable[[Rect, str], float] | float = 0.0,
        expert: Callable[[Rect, Sequence[str]], ExpertProposal] | None = None,
        parse: Callable[[str], TargetSet | None] | None = None,
        answer: Callable[[Rect, str], str] | str = "answer",
    ):
        self._suff = sufficiency if callable(sufficiency) else constant(sufficiency)
        self._exist = existence if callable(existence) else constant(existence)
        self._expert = expert or (lambda _region, _concepts: ExpertProposal())
        self._parse = parse or (lambda _query: None)
        self._answer = answer if callable(answer) else (lambda _region, _query: answer)

    def sufficiency(self, region, query):
        return self._suff(region, query)

    def existence(self, region, phrase):
        return self._exist(region, phrase)

    def expert(self, region, concepts):
        return self._expert(region, concepts)

    def parse(self, query):
        return self._parse(query)

    def answer(self, region, query):
        return self._answer(region, query)
