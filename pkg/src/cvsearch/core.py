"""Domain types, geometry, configuration and the search trace.

All rectangles are normalized to the frame of the grid or image they refer
to.  Pixel coordinates only appear at the oracle boundary.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument, RegionTooSmall

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1
_FGRD_HEADER = struct.Struct("<4sIIII")

# Rect edges are snapped to this many decimals (in cell units) before the
# center-in-rect test so nested compositions land on the same cells.
_CELL_SNAP_DECIMALS = 9


# ----------------------------------------------------------------------------
# Feature grid
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Dense H x W x C float32 feature map."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype="<f4")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise InvalidArgument(f"feature grid must be H x W x C, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidArgument("feature grid contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.shape == other.shape and self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())

    def to_bytes(self) -> bytes:
        h, w, c = self.shape
        return _FGRD_HEADER.pack(FGRD_MAGIC, FGRD_VERSION, h, w, c) + self.data.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureGrid":
        if len(buf) < _FGRD_HEADER.size:
            raise FormatError("truncated FGRD header")
        magic, version, h, w, c = _FGRD_HEADER.unpack_from(buf)
        if magic != FGRD_MAGIC:
            raise FormatError(f"bad FGRD magic {magic!r}")
        if version != FGRD_VERSION:
            raise FormatError(f"unsupported FGRD version {version}")
        n = h * w * c
        payload = buf[_FGRD_HEADER.size:]
        if n == 0 or len(payload) != 4 * n:
            raise FormatError(f"FGRD payload has {len(payload)} bytes, expected {4 * n}")
        data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
        try:
            return cls(data)
        except InvalidArgument as exc:
            raise FormatError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureGrid":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(buf)


# ----------------------------------------------------------------------------
# Rectangles
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgument(f"non-finite rect {vals}")
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise InvalidArgument(f"invalid rect {vals}")

    @classmethod
    def unit(cls) -> "Rect":
        return cls(0.0, 0.0, 1.0, 1.0)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Rect":
        if len(seq) != 4:
            raise InvalidArgument(f"rect needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    def intersection_area(self, other: "Rect") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def iou(self, other: "Rect") -> float:
        inter = self.intersection_area(other)
        if inter == 0.0:
            return 0.0
        return inter / (self.area + other.area - inter)

    def contains(self, other: "Rect", tol: float = 1e-12) -> bool:
        return (
            other.x0 >= self.x0 - tol
            and other.y0 >= self.y0 - tol
            and other.x1 <= self.x1 + tol
            and other.y1 <= self.y1 + tol
        )

    def expanded(self, frac: float) -> "Rect":
        """Grow width and height by ``frac`` around the center, clipped to [0,1]."""
        dx = self.width * frac / 2
        dy = self.height * frac / 2
        return Rect(
            max(0.0, self.x0 - dx),
            max(0.0, self.y0 - dy),
            min(1.0, self.x1 + dx),
            min(1.0, self.y1 + dy),
        )


def union_rect(rects: Iterable[Rect]) -> Rect:
    rects = list(rects)
    if not rects:
        raise InvalidArgument("union of no rects")
    return Rect(
        min(r.x0 for r in rects),
        min(r.y0 for r in rects),
        max(r.x1 for r in rects),
        max(r.y1 for r in rects),
    )


def compose_rect(outer: Rect, inner: Rect) -> Rect:
    """Express ``inner`` (given in ``outer``'s local frame) in ``outer``'s parent frame."""
    w, h = outer.width, outer.height
    x0 = outer.x0 + inner.x0 * w
    y0 = outer.y0 + inner.y0 * h
    x1 = outer.x0 + inner.x1 * w
    y1 = outer.y0 + inner.y1 * h
    # rounding can push an edge a hair past the outer rect
    return Rect(
        max(x0, outer.x0),
        max(y0, outer.y0),
        min(x1, outer.x1),
        min(y1, outer.y1),
    )


def relative_rect(outer: Rect, rect: Rect) -> Rect | None:
    """Inverse of :func:`compose_rect`: ``rect`` clipped to ``outer`` in its local frame."""
    x0, x1 = max(rect.x0, outer.x0), min(rect.x1, outer.x1)
    y0, y1 = max(rect.y0, outer.y0), min(rect.y1, outer.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    w, h = outer.width, outer.height
    return Rect(
        min(max((x0 - outer.x0) / w, 0.0), 1.0),
        min(max((y0 - outer.y0) / h, 0.0), 1.0),
        min(max((x1 - outer.x0) / w, 0.0), 1.0),
        min(max((y1 - outer.y0) / h, 0.0), 1.0),
    )


def _axis_window(lo: float, hi: float, n: int) -> tuple[int, int]:
    # cell i has center (i + 0.5) / n; keep centers with lo <= c < hi
    start = math.ceil(round(lo * n - 0.5, _CELL_SNAP_DECIMALS))
    stop = math.ceil(round(hi * n - 0.5, _CELL_SNAP_DECIMALS))
    if hi >= 1.0:
        stop = n
    return max(start, 0), min(stop, n)


def cell_window(region: Rect, height: int, width: int) -> tuple[int, int, int, int]:
    """Row/col slice bounds ``(r0, r1, c0, c1)`` of the cells whose centers lie in ``region``."""
    r0, r1 = _axis_window(region.y0, region.y1, height)
    c0, c1 = _axis_window(region.x0, region.x1, width)
    return r0, r1, c0, c1


def window_rect(r0: int, r1: int, c0: int, c1: int, height: int, width: int) -> Rect:
    """Exact normalized extent of a cell window."""
    return Rect(c0 / width, r0 / height, c1 / width, r1 / height)


def crop_grid(grid: FeatureGrid, region: Rect) -> FeatureGrid:
    r0, r1, c0, c1 = cell_window(region, grid.height, grid.width)
    if r1 - r0 < 2 or c1 - c0 < 2:
        raise RegionTooSmall(
            f"{region} maps to a {r1 - r0}x{c1 - c0} window of a {grid.height}x{grid.width} grid"
        )
    return FeatureGrid(grid.data[r0:r1, c0:c1])


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    tau_q: float = 0.9
    tau_q_min: float = 0.5
    tau_v: float = 0.4
    delta_tau: float = 0.05
    alpha: float = 0.2
    beta: float = 0.4
    gamma: float = 0.4
    k_min: int = 4
    k_max: int = 8
    depth_single: int = 2
    depth_multi: int = 3
    max_iter: int = 3
    min_region_frac: float = 1 / 32
    n_atoms: int = 64
    slic_compactness: float = 0.5
    slic_iters: int = 10
    existence_aggregation: str = "max"
    reextract_features: bool = False

    def __post_init__(self):
        problems = []
        if not 0 < self.tau_q <= 1:
            problems.append("tau_q must be in (0, 1]")
        if not 0 < self.tau_q_min <= self.tau_q:
            problems.append("tau_q_min must be in (0, tau_q]")
        if not 0 <= self.tau_v < 1:
            problems.append("tau_v must be in [0, 1)")
        if not self.delta_tau > 0:
            problems.append("delta_tau must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            problems.append("priority weights must be nonnegative with a positive sum")
        if not 2 <= self.k_min <= self.k_max:
            problems.append("need 2 <= k_min <= k_max")
        if self.depth_single < 1 or self.depth_multi < 1:
            problems.append("tree depths must be >= 1")
        if self.max_iter < 1:
            problems.append("max_iter must be >= 1")
        if not 0 < self.min_region_frac <= 1:
            problems.append("min_region_frac must be in (0, 1]")
        if self.n_atoms < 2:
            problems.append("n_atoms must be >= 2")
        if self.slic_compactness < 0:
            problems.append("slic_compactness must be nonnegative")
        if self.slic_iters < 1:
            problems.append("slic_iters must be >= 1")
        if self.existence_aggregation not in ("max", "mean"):
            problems.append("existence_aggregation must be 'max' or 'mean'")
        if problems:
            raise InvalidArgument("; ".join(problems))

    def tree_depth(self, n_targets: int) -> int:
        return self.depth_single if n_targets <= 1 else self.depth_multi

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SearchConfig":
        if not isinstance(doc, dict):
            raise InvalidArgument("config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            default = known[key].default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise InvalidArgument(f"{key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise InvalidArgument(f"{key} must be an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise InvalidArgument(f"{key} must be a number")
                value = float(value)
            elif isinstance(default, str) and not isinstance(value, str):
                raise InvalidArgument(f"{key} must be a string")
            kwargs[key] = value
        return cls(**kwargs)

    def replace(self, **changes) -> "SearchConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path) -> "SearchConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"config {path} is not a JSON object")
        try:
            return cls.from_dict(doc)
        except InvalidArgument as exc:
            raise FormatError(f"config {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# Targets
# ----------------------------------------------------------------------------


def normalize_phrase(phrase: str) -> str:
    return " ".join(phrase.split()).lower()


@dataclass(frozen=True)
class TargetSet:
    objects: tuple[str, ...]

    def __post_init__(self):
        objs = tuple(" ".join(o.split()) for o in self.objects)
        if not objs or any(not o for o in objs):
            raise InvalidArgument("target set needs at least one nonempty phrase")
        seen = set()
        for o in objs:
            key = normalize_phrase(o)
            if key in seen:
                raise InvalidArgument(f"duplicate target phrase {o!r}")
            seen.add(key)
        object.__setattr__(self, "objects", objs)

    @classmethod
    def of(cls, phrases: Iterable[str]) -> "TargetSet":
        """Build a target set, silently dropping duplicates."""
        out, seen = [], set()
        for p in phrases:
            key = normalize_phrase(p)
            if key and key not in seen:
                seen.add(key)
                out.append(p)
        return cls(tuple(out))

    def __len__(self):
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)


# ----------------------------------------------------------------------------
# Trace
# ----------------------------------------------------------------------------


def _rect_json(rect: Rect | None):
    return None if rect is None else rect.as_list()


@dataclass(frozen=True)
class Event:
    kind = "Event"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"event": self.kind}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Rect):
                value = _rect_json(value)
            elif isinstance(value, tuple):
                value = [v.as_list() if isinstance(v, Rect) else v for v in value]
            out[f.name] = value
        return out


@dataclass(frozen=True)
class IterationStart(Event):
    kind = "IterationStart"
    round: int
    region: Rect


@dataclass(frozen=True)
class SufficiencyCall(Event):
    kind = "SufficiencyCall"
    region: Rect
    query: str
    confidence: float


@dataclass(frozen=True)
class ExistenceCall(Event):
    kind = "ExistenceCall"
    region: Rect
    phrase: str
    confidence: float


@dataclass(frozen=True)
class ExpertCall(Event):
    kind = "ExpertCall"
    region: Rect
    concepts: tuple
    labels: tuple
    has_features: bool


@dataclass(frozen=True)
class AnswerCall(Event):
    kind = "AnswerCall"
    region: Rect
    query: str
    text: str


@dataclass(frozen=True)
class ModeDecision(Event):
    kind = "ModeDecision"
    mode: str
    c_q: float | None


@dataclass(frozen=True)
class Pruned(Event):
    kind = "Pruned"
    node: str
    c_v: float
    region: Rect


@dataclass(frozen=True)
class NodeVisit(Event):
    kind = "NodeVisit"
    node: int
    depth: int
    c_v: float
    c_o: float
    c_x: float
    c_q: float
    tau_curr: float
    resolved: tuple = ()


@dataclass(frozen=True)
class Termination(Event):
    kind = "Termination"
    status: str
    node: int | None


EVENT_TYPES: dict[str, type] = {
    cls.kind: cls
    for cls in (
        IterationStart,
        SufficiencyCall,
        ExistenceCall,
        ExpertCall,
        AnswerCall,
        ModeDecision,
        Pruned,
        NodeVisit,
        Termination,
    )
}


def event_from_dict(doc: dict[str, Any]) -> Event:
    """Inverse of ``Event.to_dict``; raises FormatError on unknown kinds or fields."""
    if not isinstance(doc, dict):
        raise FormatError("event is not a JSON object")
    cls = EVENT_TYPES.get(doc.get("event"))
    if cls is None:
        raise FormatError(f"unknown event kind {doc.get('event')!r}")
    names = {f.name for f in dataclasses.fields(cls)}
    body = {k: v for k, v in doc.items() if k != "event"}
    if set(body) - names:
        raise FormatError(f"{cls.kind}: unexpected fields {sorted(set(body) - names)}")
    try:
        for k, v in body.items():
            if k == "region":
                body[k] = Rect.from_seq(v)
            elif isinstance(v, list):
                body[k] = tuple(v)
        return cls(**body)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{cls.kind}: {exc}") from exc


_COUNTED = {
    "sufficiency_calls": SufficiencyCall,
    "existence_calls": ExistenceCall,
    "expert_calls": ExpertCall,
    "answer_calls": AnswerCall,
}


@dataclass
class SearchTrace:
    """Ordered audit log of one search session (single writer)."""

    events: list[Event] = field(default_factory=list)

    def add(self, event: Event) -> Event:
        self.events.append(event)
        return event

    def extend(self, events: Iterable[Event]) -> None:
        self.events.extend(events)

    def of_kind(self, cls) -> list:
        return [e for e in self.events if isinstance(e, cls)]

    def count(self, cls) -> int:
        return sum(1 for e in self.events if isinstance(e, cls))

    @property
    def sufficiency_calls(self) -> int:
        return self.count(SufficiencyCall)

    @property
    def existence_calls(self) -> int:
        return self.count(ExistenceCall)

    @property
    def expert_calls(self) -> int:
        return self.count(ExpertCall)

    @property
    def answer_calls(self) -> int:
        return self.count(AnswerCall)

    @property
    def node_visits(self) -> int:
        return self.count(NodeVisit)

    def counters(self) -> dict[str, int]:
        return {name: self.count(cls) for name, cls in _COUNTED.items()}

    def to_dicts(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.events]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(d) + "\n" for d in self.to_dicts())

    @classmethod
    def from_jsonl(cls, text: str) -> tuple["SearchTrace", list[dict[str, Any]]]:
        """Parse events; lines that are not events (e.g. an outcome summary) are returned separately."""
        trace, extra = cls(), []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {n}: {exc}") from exc
            if isinstance(doc, dict) and "event" in doc:
                trace.add(event_from_dict(doc))
            elif isinstance(doc, dict):
                extra.append(doc)
            else:
                raise FormatError(f"line {n}: not a JSON object")
        return trace, extra
