"""Oracle contracts: the boundary to the MLLM and the visual expert."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from ..core import (
    AnswerCall,
    ExistenceCall,
    ExpertCall,
    FeatureGrid,
    Rect,
    SearchTrace,
    SufficiencyCall,
    TargetSet,
)
from ..errors import InvalidArgument, RangeError

SUFFICIENCY_TEMPLATE = (
    "Question: {query}. Could you answer the question based on the available "
    "visual information? Answer Yes or No."
)
EXISTENCE_TEMPLATE = "Is there a {phrase} in the image? Answer Yes or No."
PARSE_TEMPLATE = (
    "List the key objects mentioned in the following question as a comma separated "
    "list of short noun phrases, nothing else. Question: {query}"
)


def sufficiency_prompt(query: str) -> str:
    return SUFFICIENCY_TEMPLATE.format(query=query.rstrip(" ?.")) if query else ""


def existence_prompt(phrase: str) -> str:
    return EXISTENCE_TEMPLATE.format(phrase=phrase)


def check_confidence(value) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise RangeError(f"confidence {value!r} is not a number") from exc
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise RangeError(f"confidence {value} outside [0, 1]")
    return value


@dataclass(frozen=True)
class ProposalBox:
    rect: Rect  # in the frame of the queried region
    label: str
    score: float = 1.0


@dataclass(frozen=True, eq=False)
class ExpertProposal:
    boxes: tuple[ProposalBox, ...] = ()
    features: FeatureGrid | None = None

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.boxes]


class OracleSuite:
    """Sufficiency, existence, expert, parser and answerer for one image.

    Regions are rects in the original image frame.  Implementations must be
    safe to call from several threads.
    """

    def sufficiency(self, region: Rect, query: str) -> float:
        raise NotImplementedError

    def existence(self, region: Rect, phrase: str) -> float:
        raise NotImplementedError

    def expert(self, region: Rect, concepts: Sequence[str]) -> ExpertProposal:
        raise NotImplementedError

    def parse(self, query: str) -> TargetSet | None:
        """Extract target phrases; ``None`` defers to the offline heuristic."""
        return None

    def answer(self, region: Rect, query: str) -> str:
        raise NotImplementedError


class TracedOracles(OracleSuite):
    """Wraps a suite, validating confidences and logging every call to a trace."""

    def __init__(self, inner: OracleSuite, trace: SearchTrace | None = None):
        self.inner = inner
        self.trace = trace if trace is not None else SearchTrace()

    def sufficiency(self, region, query):
        if not query:
            raise InvalidArgument("empty query")
        value = check_confidence(self.inner.sufficiency(region, query))
        self.trace.add(SufficiencyCall(region, query, value))
        return value

    def existence(self, region, phrase):
        value = check_confidence(self.inner.existence(region, phrase))
        self.trace.add(ExistenceCall(region, phrase, value))
        return value

    def expert(self, region, concepts):
        proposal = self.inner.expert(region, list(concepts))
        self.trace.add(
            ExpertCall(
                region,
                tuple(concepts),
                tuple(b.label for b in proposal.boxes),
                proposal.features is not None,
            )
        )
        return proposal

    def parse(self, query):
        return self.inner.parse(query)

    def answer(self, region, query):
        text = str(self.inner.answer(region, query))
        self.trace.add(AnswerCall(region, query, text))
        return text


def instrument(oracles: OracleSuite, trace: SearchTrace | None = None) -> TracedOracles:
    if isinstance(oracles, TracedOracles):
        if trace is not None and trace is not oracles.trace:
            raise InvalidArgument("oracles are already bound to a different trace")
        return oracles
    return TracedOracles(oracles, trace)
