"""Dynamic bottom-up search over an adaptive tree."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import NodeVisit, Rect, SearchConfig, SearchTrace, TargetSet, compose_rect, union_rect
from .errors import EmptyTree, InvalidArgument
from .oracles.base import OracleSuite, instrument
from .patching import AdaptiveTree

FOUND = "FOUND"
NOT_FOUND = "NOT_FOUND"

DECOUPLED_TEMPLATE = "What is the appearance of the {phrase}"


@dataclass(frozen=True)
class NodeScore:
    node: int
    c_v: float
    c_o: float
    c_x_child: float
    c_x: float


@dataclass
class SearchResult:
    status: str
    node: int
    steps: int
    visits: list[int] = field(default_factory=list)
    scores: dict[int, NodeScore] = field(default_factory=dict)
    # per target phrase, the region (original frame) where it was resolved
    resolved: dict[str, Rect] = field(default_factory=dict)
    trace: SearchTrace = field(default_factory=SearchTrace)

    @property
    def found(self) -> bool:
        return self.status == FOUND

    @property
    def region(self) -> Rect | None:
        if not self.resolved:
            return None
        return union_rect(self.resolved.values())


def node_priority(c_v: float, c_o: float, c_x_child: float, config: SearchConfig) -> float:
    return config.alpha * c_v + config.beta * c_o + config.gamma * c_x_child


def dynamic_threshold(tau_q: float, k_step: int, delta_tau: float, tau_q_min: float) -> float:
    if k_step < 0:
        raise InvalidArgument("k_step must be nonnegative")
    return max(tau_q - k_step * delta_tau, tau_q_min)


def decoupled_query(object_phrase: str) -> str:
    phrase = " ".join(object_phrase.split())
    if not phrase:
        raise InvalidArgument("empty object phrase")
    return DECOUPLED_TEMPLATE.format(phrase=phrase)


def _aggregate(values: list[float], how: str) -> float:
    if how == "max":
        return max(values)
    return sum(values) / len(values)


def bottom_up_search(
    tree: AdaptiveTree,
    oracles: OracleSuite,
    targets: TargetSet,
    query: str,
    config: SearchConfig,
    frame: Rect | None = None,
    trace: SearchTrace | None = None,
) -> SearchResult:
    """Search from the deepest layer up to depth 1.

    Each layer is scored (existence per target, best child priority) and then
    visited in descending priority order against a sufficiency threshold that
    relaxes by ``delta_tau`` after every failed visit.  Node regions are
    relative to ``frame``, the tree root's rect in the original image.
    """
    root = tree.nodes[tree.root]
    if not root.children:
        raise EmptyTree("root has no surviving children")
    frame = frame or Rect.unit()
    suite = instrument(oracles, trace)
    trace = suite.trace
    start = len(trace.events)
    multi = len(targets) > 1
    unresolved = list(targets)
    resolved: dict[str, Rect] = {}
    scores: dict[int, NodeScore] = {}
    visits: list[int] = []
    k_step = 0
    top_layer: list[int] = []

    for d in range(tree.max_depth, 0, -1):
        layer = tree.layer(d)
        if not layer:
            continue
        for node in layer:
            view = compose_rect(frame, node.region)
            c_o = _aggregate([suite.existence(view, o) for o in targets], config.existence_aggregation)
            child_best = max((scores[c].c_x for c in node.children), default=0.0)
            c_x = node_priority(node.c_v, c_o, child_best, config)
            scores[node.id] = NodeScore(node.id, node.c_v, c_o, child_best, c_x)
        order = sorted(layer, key=lambda n: (-scores[n.id].c_x, n.id))
        if d == 1:
            top_layer = [n.id for n in order]

        for node in order:
            view = compose_rect(frame, node.region)
            tau_curr = dynamic_threshold(config.tau_q, k_step, config.delta_tau, config.tau_q_min)
            visits.append(node.id)
            s = scores[node.id]
            if multi:
                hits = []
                best_q = 0.0
                for o in list(unresolved):
                    c_q = suite.sufficiency(view, decoupled_query(o))
                    best_q = max(best_q, c_q)
                    if c_q > tau_curr:
                        hits.append(o)
                for o in hits:
                    unresolved.remove(o)
                    resolved[o] = view
            else:
                best_q = suite.sufficiency(view, query)
                hits = list(targets) if best_q > tau_curr else []
                for o in hits:
                    resolved[o] = view
            trace.add(NodeVisit(node.id, node.depth, s.c_v, s.c_o, s.c_x, best_q, tau_curr, tuple(hits)))
            if not unresolved or (not multi and hits):
                return SearchResult(FOUND, node.id, k_step, visits, scores, resolved, _fragment(trace, start))
            if not hits:
                k_step += 1

    return SearchResult(NOT_FOUND, top_layer[0], k_step, visits, scores, resolved, _fragment(trace, start))


def _fragment(trace: SearchTrace, start: int) -> SearchTrace:
    return SearchTrace(list(trace.events[start:]))
