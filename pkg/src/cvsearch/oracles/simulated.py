"""Deterministic stand-ins for the MLLM and the visual expert.

A scene is a feature grid plus ground-truth target rectangles.  Confidence
is a pure function of how much of a target the viewed region covers and how
large the target appears inside it: a target must fill at least ``rho`` of the
view (scaled by its visibility) to be resolvable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..core import FeatureGrid, Rect, TargetSet, crop_grid, normalize_phrase, relative_rect
from ..errors import FormatError, InvalidArgument, RegionTooSmall, UnknownTarget
from .base import ExpertProposal, OracleSuite, ProposalBox

DEFAULT_RHO = 0.002
DEFAULT_RECALL_FLOOR = 0.0005
UNKNOWN_ANSWER = "unknown"


@dataclass(frozen=True)
class SceneTarget:
    phrase: str
    rect: Rect
    visibility: float = 1.0
    answer: str = ""

    def __post_init__(self):
        if not normalize_phrase(self.phrase):
            raise InvalidArgument("target phrase is empty")
        if not 0 < self.visibility <= 1:
            raise InvalidArgument(f"visibility {self.visibility} outside (0, 1]")


@dataclass(frozen=True)
class Distractor:
    """Look-alike object: raises existence confidence but never answers."""

    phrase: str
    rect: Rect
    strength: float = 0.9


@dataclass(frozen=True, eq=False)
class SimulatedScene:
    grid: FeatureGrid
    targets: tuple[SceneTarget, ...]
    distractors: tuple[Distractor, ...] = ()
    seed: int = 0
    tier: str = ""

    def __post_init__(self):
        names = [normalize_phrase(t.phrase) for t in self.targets]
        if len(set(names)) != len(names):
            raise InvalidArgument("scene target phrases must be distinct")

    def target(self, phrase: str) -> SceneTarget:
        key = normalize_phrase(phrase)
        for t in self.targets:
            if normalize_phrase(t.phrase) == key:
                return t
        raise UnknownTarget(phrase)

    def mentioned(self, text: str) -> list[SceneTarget]:
        """Targets whose phrase occurs in ``text``, in order of first occurrence."""
        low = " ".join(text.lower().split())
        hits = []
        for t in self.targets:
            m = re.search(r"\b" + re.escape(normalize_phrase(t.phrase)) + r"\b", low)
            if m:
                hits.append((m.start(), t))
        return [t for _, t in sorted(hits, key=lambda p: p[0])]

    def expected_answer(self, phrases: Sequence[str]) -> str:
        return "; ".join(self.target(p).answer for p in phrases)

    # -- serialization -------------------------------------------------------

    def to_dict(self, grid_path: str) -> dict:
        return {
            "grid": grid_path,
            "targets": [
                {"phrase": t.phrase, "rect": t.rect.as_list(), "visibility": t.visibility, "answer": t.answer}
                for t in self.targets
            ],
            "distractors": [
                {"phrase": d.phrase, "rect": d.rect.as_list(), "strength": d.strength} for d in self.distractors
            ],
            "seed": self.seed,
            "tier": self.tier,
        }

    def save(self, path) -> None:
        path = Path(path)
        grid_path = path.with_suffix(".fgrd")
        self.grid.save(grid_path)
        path.write_text(json.dumps(self.to_dict(grid_path.name), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SimulatedScene":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read scene {path}: {exc}") from exc
        try:
            grid_path = Path(doc["grid"])
            if not grid_path.is_absolute():
                grid_path = path.parent / grid_path
            grid = FeatureGrid.load(grid_path)
            targets = tuple(
                SceneTarget(t["phrase"], Rect.from_seq(t["rect"]), float(t.get("visibility", 1.0)), t.get("answer", ""))
                for t in doc["targets"]
            )
            distractors = tuple(
                Distractor(d["phrase"], Rect.from_seq(d["rect"]), float(d.get("strength", 0.9)))
                for d in doc.get("distractors", [])
            )
            return cls(grid, targets, distractors, int(doc.get("seed", 0)), doc.get("tier", ""))
        except (KeyError, TypeError, InvalidArgument) as exc:
            raise FormatError(f"malformed scene {path}: {exc}") from exc


def _visible_score(rect: Rect, visibility: float, region: Rect, rho: float) -> float:
    coverage = rect.intersection_area(region) / rect.area
    if coverage == 0.0:
        return 0.0
    prominence = rect.area / region.area * visibility
    return coverage * min(1.0, prominence / rho)


def simulated_sufficiency(scene: SimulatedScene, region: Rect, query_targets: Sequence[str], rho: float = DEFAULT_RHO) -> float:
    """Weakest per-target resolvability of the referenced targets in ``region``."""
    if not query_targets:
        raise InvalidArgument("no targets referenced")
    scores = []
    for phrase in query_targets:
        t = scene.target(phrase)
        scores.append(_visible_score(t.rect, t.visibility, region, rho))
    return min(scores)


def simulated_existence(scene: SimulatedScene, region: Rect, phrase: str, rho: float = DEFAULT_RHO) -> float:
    key = normalize_phrase(phrase)
    best = 0.0
    for t in scene.targets:
        if normalize_phrase(t.phrase) == key:
            best = max(best, _visible_score(t.rect, t.visibility, region, rho))
    for d in scene.distractors:
        if normalize_phrase(d.phrase) == key:
            best = max(best, d.strength * _visible_score(d.rect, 1.0, region, rho))
    return best


def simulated_expert(
    scene: SimulatedScene, region: Rect, concepts: Sequence[str], recall_floor: float = DEFAULT_RECALL_FLOOR
) -> ExpertProposal:
    """Boxes for prompted targets that fill more than ``recall_floor`` of the view."""
    wanted = {normalize_phrase(c) for c in concepts}
    boxes = []
    for t in scene.targets:
        if normalize_phrase(t.phrase) not in wanted:
            continue
        local = relative_rect(region, t.rect)
        if local is None:
            continue
        prominence = t.rect.intersection_area(region) / region.area * t.visibility
        if prominence > recall_floor:
            boxes.append(ProposalBox(local, t.phrase, round(min(1.0, prominence / recall_floor / 10), 6)))
    try:
        features = crop_grid(scene.grid, region)
    except RegionTooSmall:
        features = None
    return ExpertProposal(tuple(boxes), features)


@dataclass
class SimulatedOracles(OracleSuite):
    scene: SimulatedScene
    rho: float = DEFAULT_RHO
    recall_floor: float = DEFAULT_RECALL_FLOOR
    answer_threshold: float = 0.5

    def _referenced(self, text: str) -> list[str]:
        hits = [t.phrase for t in self.scene.mentioned(text)]
        if not hits:
            raise UnknownTarget(f"no scene target mentioned in {text!r}")
        return hits

    def sufficiency(self, region, query):
        return simulated_sufficiency(self.scene, region, self._referenced(query), self.rho)

    def existence(self, region, phrase):
        return simulated_existence(self.scene, region, phrase, self.rho)

    def expert(self, region, concepts):
        return simulated_expert(self.scene, region, concepts, self.recall_floor)

    def parse(self, query):
        hits = [t.phrase for t in self.scene.mentioned(query)]
        return TargetSet(tuple(hits)) if hits else None

    def answer(self, region, query):
        phrases = [t.phrase for t in self.scene.mentioned(query)]
        if not phrases:
            return UNKNOWN_ANSWER
        if simulated_sufficiency(self.scene, region, phrases, self.rho) < self.answer_threshold:
            return UNKNOWN_ANSWER
        return self.scene.expected_answer(phrases)
