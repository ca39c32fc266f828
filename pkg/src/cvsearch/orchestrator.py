"""Assess-then-search control loop.

One call to :func:`run` answers one query: a global sufficiency check, then a
visual-expert proposal, then scene-aware scanning with iterative zoom-in on
the best candidate when the scan is inconclusive.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

from .core import (
    IterationStart,
    ModeDecision,
    Pruned,
    Rect,
    SearchConfig,
    SearchTrace,
    TargetSet,
    Termination,
    compose_rect,
    normalize_phrase,
    union_rect,
)
from .errors import EmptyTree, InvalidArgument
from .oracles.base import ExpertProposal, OracleSuite, instrument
from .patching import build_tree
from .search import bottom_up_search

DIRECT = "DirectAnswer"
EXPERT = "ExpertSearch"
SCAN = "ScanSearch"
FALLBACK = "Fallback"
MODES = (DIRECT, EXPERT, SCAN, FALLBACK)

EXPERT_CROP_MARGIN = 0.10


@dataclass
class Outcome:
    mode: str
    answer: str
    final_regions: list[Rect]
    iterations: int
    targets: list[str] = field(default_factory=list)
    trace: SearchTrace = field(default_factory=SearchTrace)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "answer": self.answer,
            "final_regions": [r.as_list() for r in self.final_regions],
            "iterations": self.iterations,
            "targets": list(self.targets),
            "counters": self.trace.counters(),
            "node_visits": self.trace.node_visits,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    def to_jsonl(self) -> str:
        """Trace events one per line, then the outcome summary."""
        return self.trace.to_jsonl() + json.dumps({"outcome": self.to_dict()}) + "\n"


# ----------------------------------------------------------------------------
# Target parsing fallback
# ----------------------------------------------------------------------------

_STOP = frozenset(
    """
    what which where who whom whose why how when is are was were be been being am do does did
    can could would should will shall may might must there here this that these those it its
    they them their theirs he she his her him we our you your i me my the a an any some
    image picture photo photograph scene visible shown seen see appear appears
    located placed positioned wearing holding carrying sitting standing lying hanging parked
    flying pointing facing riding driving walking running playing looking using
    made has have had one ones other another
    """.split()
)
_ATTRIBUTES = frozenset(
    """
    color colour colors colours shape size material kind type number many much position
    side direction pattern brand text written appearance style count
    """.split()
)
_SPLITTERS = frozenset(
    """
    of on in at to from with without by for and or but than left right above below under over
    behind near next between beside besides inside outside front into onto relative about
    as closer closest farther farthest nearer nearest bigger smaller larger taller shorter
    """.split()
)
_TOKEN = re.compile(r"[a-z0-9][a-z0-9'\-]*")


def parse_targets_fallback(query: str) -> TargetSet:
    """Offline noun-phrase guess: maximal runs of content words between function words."""
    if not query or not query.strip():
        raise InvalidArgument("empty query")
    runs: list[list[str]] = [[]]
    for tok in _TOKEN.findall(query.lower()):
        if tok in _STOP or tok in _ATTRIBUTES or tok in _SPLITTERS:
            if runs[-1]:
                runs.append([])
            continue
        runs[-1].append(tok)
    phrases = [" ".join(r) for r in runs if r]
    if not phrases:
        phrases = [" ".join(query.split()).strip(" ?.!") or query.strip()]
    return TargetSet.of(phrases)


def parse_targets(oracles: OracleSuite, query: str) -> TargetSet:
    parsed = oracles.parse(query)
    if parsed is not None and len(parsed) > 0:
        return parsed
    return parse_targets_fallback(query)


# ----------------------------------------------------------------------------
# Phases
# ----------------------------------------------------------------------------


def assess_sufficiency(oracles: OracleSuite, region: Rect, query: str) -> float:
    if not query:
        raise InvalidArgument("empty query")
    return instrument(oracles).sufficiency(region, query)


def verify_coverage(proposal: ExpertProposal, targets: TargetSet) -> bool:
    """True iff every target category appears among the proposal labels."""
    wanted = {normalize_phrase(o) for o in targets}
    found = {normalize_phrase(b.label) for b in proposal.boxes} & wanted
    return len(found) == len(wanted)


def run(oracles: OracleSuite, query: str, config: SearchConfig | None = None, *, trace=None, use_numba=None) -> Outcome:
    if not query or not query.strip():
        raise InvalidArgument("empty query")
    config = config or SearchConfig()
    suite = instrument(oracles, trace)
    trace = suite.trace
    region = Rect.unit()
    iteration = 0
    targets: TargetSet | None = None

    def finish(mode, answer, regions, node=None):
        trace.add(Termination(mode, node))
        return Outcome(mode, answer, regions, iteration, list(targets or ()), trace)

    while iteration < config.max_iter:
        trace.add(IterationStart(iteration, region))
        c_q = suite.sufficiency(region, query)
        if c_q > config.tau_q:
            # a passing gate on a zoomed crop is credited to the scan that produced it
            mode = DIRECT if iteration == 0 else SCAN
            trace.add(ModeDecision(mode, c_q))
            return finish(mode, suite.answer(region, query), [region])

        if targets is None:
            targets = parse_targets(suite, query)
        proposal = suite.expert(region, targets.objects)
        if verify_coverage(proposal, targets):
            trace.add(ModeDecision(EXPERT, c_q))
            box = union_rect(b.rect for b in proposal.boxes)
            answer = suite.answer(compose_rect(region, box.expanded(EXPERT_CROP_MARGIN)), query)
            return finish(EXPERT, answer, [compose_rect(region, box)])

        trace.add(ModeDecision(SCAN, c_q))
        if proposal.features is None:
            break
        frame = region

        def reextract(r, frame=frame):
            return suite.expert(compose_rect(frame, r), targets.objects).features

        tree = build_tree(
            proposal.features, config, config.tree_depth(len(targets)), reextract, use_numba=use_numba
        )
        for p in tree.pruned:
            trace.add(Pruned(p.label, p.c_v, compose_rect(frame, p.region)))
        try:
            result = bottom_up_search(tree, suite, targets, query, config, frame=frame)
        except EmptyTree:
            break
        if result.found:
            answer = suite.answer(result.region, query)
            return finish(SCAN, answer, list(result.resolved.values()), result.node)

        nxt = compose_rect(frame, tree.nodes[result.node].region)
        if nxt == region or not region.contains(nxt):
            break
        region = nxt
        iteration += 1
        if region.width < config.min_region_frac or region.height < config.min_region_frac:
            break

    return finish(FALLBACK, suite.answer(region, query), [region])
