"""Synthetic benchmark: planted scenes, the rigid-grid top-down baseline, and
oracle-call efficiency metrics.

Throughput cannot be measured without real models, so the report counts
oracle calls (sufficiency + existence) as the cost proxy.
"""

from __future__ import annotations

import dataclasses
import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import orchestrator
from .core import FeatureGrid, NodeVisit, Rect, SearchConfig, SearchTrace, TargetSet, Termination, cell_window
from .errors import FormatError, InvalidArgument, OverlapError
from .oracles.base import OracleSuite, instrument
from .oracles.simulated import (
    DEFAULT_RECALL_FLOOR,
    DEFAULT_RHO,
    Distractor,
    SceneTarget,
    SimulatedOracles,
    SimulatedScene,
)
from .search import FOUND, NOT_FOUND, NodeScore, SearchResult

FEATURE_DIM = 24
_BG_BASE = 6.0
_BG_SPREAD = 1.5
_TEX_SCALE = 3.0
CONTEXT_FRAC = 0.375

COST_PROXY_NOTE = (
    "cost = sufficiency + existence oracle calls per query; a stand-in for "
    "wall-clock throughput, which needs real models"
)

POLICIES = ("cvsearch", "rigid_grid")

_VOCAB = (
    ("helmet", "white"), ("tissue box", "blue"), ("umbrella", "red"), ("backpack", "black"),
    ("street sign", "green"), ("cup", "yellow"), ("bicycle", "silver"), ("dog", "brown"),
    ("clock", "gold"), ("flag", "orange"), ("kite", "purple"), ("glove", "gray"),
    ("bottle", "clear"), ("scarf", "pink"), ("lamp", "beige"), ("bucket", "teal"),
)


# ----------------------------------------------------------------------------
# Scene generation
# ----------------------------------------------------------------------------


def _split_layout(rng: np.random.Generator, h: int, w: int, n: int, min_cells: int) -> list[tuple[int, int, int, int]]:
    """Guillotine partition of the grid into ``n`` cell-aligned rectangles."""
    boxes = [(0, h, 0, w)]
    while len(boxes) < n:
        order = sorted(range(len(boxes)), key=lambda i: (-(boxes[i][1] - boxes[i][0]) * (boxes[i][3] - boxes[i][2]), i))
        for i in order:
            r0, r1, c0, c1 = boxes[i]
            vertical = (c1 - c0) >= (r1 - r0)
            lo, hi = (c0, c1) if vertical else (r0, r1)
            if hi - lo < 2 * min_cells:
                continue
            cut = int(round(lo + (hi - lo) * rng.uniform(0.35, 0.65)))
            cut = min(max(cut, lo + min_cells), hi - min_cells)
            if vertical:
                boxes[i:i + 1] = [(r0, r1, c0, cut), (r0, r1, cut, c1)]
            else:
                boxes[i:i + 1] = [(r0, cut, c0, c1), (cut, r1, c0, c1)]
            break
        else:
            raise InvalidArgument(f"cannot split a {h}x{w} grid into {n} regions")
    return boxes


def _grid_layout(h: int, w: int, n: int) -> list[tuple[int, int, int, int]]:
    rows = max(1, int(round(math.sqrt(n))))
    per_row = [n // rows + (1 if i < n % rows else 0) for i in range(rows)]
    boxes = []
    for i, cols in enumerate(per_row):
        r0, r1 = i * h // rows, (i + 1) * h // rows
        for j in range(cols):
            boxes.append((r0, r1, j * w // cols, (j + 1) * w // cols))
    return boxes


def _context_window(rect: Rect, h: int, w: int, context_frac: float) -> tuple[int, int, int, int]:
    cw = max(rect.width * 1.5, context_frac)
    ch = max(rect.height * 1.5, context_frac)
    cx, cy = (rect.x0 + rect.x1) / 2, (rect.y0 + rect.y1) / 2
    x0 = min(max(cx - cw / 2, 0.0), 1.0 - cw)
    y0 = min(max(cy - ch / 2, 0.0), 1.0 - ch)
    c0, c1 = int(round(x0 * w)), int(round((x0 + cw) * w))
    r0, r1 = int(round(y0 * h)), int(round((y0 + ch) * h))
    return r0, max(r1, r0 + 2), c0, max(c1, c0 + 2)


def _texture_basis(rng: np.random.Generator, channels: int, n: int) -> np.ndarray:
    """``n`` orthonormal directions in the texture channels."""
    tex = channels // 2
    q, _ = np.linalg.qr(rng.normal(size=(channels - tex, n)))
    out = np.zeros((n, channels))
    out[:, tex:] = q.T
    return out


def _plaid(rng: np.random.Generator, data: np.ndarray, window, basis: np.ndarray, period: float) -> None:
    """Feature direction rotating smoothly along both axes, so any patch
    spanning a good part of a period has dispersed atom features."""
    r0, r1, c0, c1 = window
    omega = 2 * np.pi / period
    ty = omega * np.arange(r1 - r0)[:, None] + rng.uniform(0, 2 * np.pi)
    tx = omega * np.arange(c1 - c0)[None, :] + rng.uniform(0, 2 * np.pi)
    comps = (np.cos(tx) * np.cos(ty), np.cos(tx) * np.sin(ty), np.sin(tx) * np.cos(ty), np.sin(tx) * np.sin(ty))
    block = sum(c[..., None] * basis[i] for i, c in enumerate(comps))
    data[r0:r1, c0:c1] = _TEX_SCALE * block


def generate_scene(
    seed: int,
    dims: tuple[int, int] = (64, 64),
    n_background_regions: int = 4,
    target_specs: Sequence[SceneTarget] = (),
    *,
    layout: str = "random",
    noise: float = 0.02,
    context_frac: float = CONTEXT_FRAC,
    period_frac: float = 0.25,
    distractors: Sequence[Distractor] = (),
    channels: int = FEATURE_DIM,
    tier: str = "",
) -> SimulatedScene:
    """Planted scene: constant-feature background blocks plus a smoothly rotating
    texture around every target and distractor."""
    h, w = dims
    if h < 32 or w < 32:
        raise InvalidArgument("scene grids must be at least 32x32 cells")
    if n_background_regions < 1:
        raise InvalidArgument("need at least one background region")
    if channels < 10:
        raise InvalidArgument("need at least 10 feature channels")
    targets = tuple(target_specs)
    for i, a in enumerate(targets):
        for b in targets[i + 1:]:
            if a.rect.intersection_area(b.rect) > 0:
                raise OverlapError(f"targets {a.phrase!r} and {b.phrase!r} overlap")

    rng = np.random.default_rng(seed)
    data = np.zeros((h, w, channels))
    if layout == "grid":
        boxes = _grid_layout(h, w, n_background_regions)
    elif layout == "random":
        boxes = _split_layout(rng, h, w, n_background_regions, min_cells=max(4, min(h, w) // 10))
    else:
        raise InvalidArgument(f"unknown layout {layout!r}")
    bg = channels // 2
    for r0, r1, c0, c1 in boxes:
        f = np.zeros(channels)
        f[0] = _BG_BASE
        f[1:bg] = rng.normal(scale=_BG_SPREAD, size=bg - 1)
        data[r0:r1, c0:c1] = f

    for obj in list(targets) + list(distractors):
        basis = _texture_basis(rng, channels, 5)
        _plaid(rng, data, _context_window(obj.rect, h, w, context_frac), basis, period_frac * min(h, w))
        if isinstance(obj, SceneTarget):
            r0, r1, c0, c1 = cell_window(obj.rect, h, w)
            data[r0:r1, c0:c1] = _TEX_SCALE * basis[4]

    if noise > 0:
        data = data + rng.normal(scale=noise, size=data.shape)
    return SimulatedScene(FeatureGrid(data.astype(np.float32)), targets, tuple(distractors), seed, tier)


# ----------------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------------

TIER_AREAS = {
    "prominent": (0.004, 0.02),
    "salient": (0.0007, 0.0019),
    "tiny": (0.0001, 0.00035),
}


@dataclass(frozen=True)
class SuiteConfig:
    n_scenes: int = 200
    seed: int = 0
    dims: tuple[int, int] = (64, 64)
    tiers: dict = field(default_factory=lambda: {"prominent": 1.0, "salient": 1.0, "tiny": 1.0})
    background_regions: tuple[int, int] = (3, 6)
    noise: float = 0.02
    distractor_frac: float = 0.3
    rho: float = DEFAULT_RHO
    recall_floor: float = DEFAULT_RECALL_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "background_regions", tuple(self.background_regions))
        if self.n_scenes < 1:
            raise InvalidArgument("suite needs at least one scene")
        unknown = set(self.tiers) - set(TIER_AREAS)
        if unknown:
            raise InvalidArgument(f"unknown tiers {sorted(unknown)}")
        if not self.tiers or sum(self.tiers.values()) <= 0:
            raise InvalidArgument("tier weights must have a positive sum")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["background_regions"] = list(self.background_regions)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SuiteConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgument(f"unknown suite keys: {', '.join(sorted(unknown))}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read suite {path}: {exc}") from exc
        try:
            if not isinstance(doc, dict):
                raise FormatError(f"suite {path} is not a JSON object")
            return cls.from_dict(doc)
        except (TypeError, InvalidArgument) as exc:
            raise FormatError(f"bad suite {path}: {exc}") from exc


@dataclass(frozen=True)
class SuiteCase:
    index: int
    scene: SimulatedScene
    query: str

    @property
    def expected(self) -> str:
        return self.scene.expected_answer([t.phrase for t in self.scene.mentioned(self.query)])


def _random_rect(rng, area: float, avoid: Sequence[Rect], margin: float = 0.02) -> Rect:
    for _ in range(1000):
        aspect = rng.uniform(0.6, 1.6)
        rw = math.sqrt(area * aspect)
        rh = area / rw
        x0 = rng.uniform(margin, 1 - margin - rw)
        y0 = rng.uniform(margin, 1 - margin - rh)
        r = Rect(x0, y0, x0 + rw, y0 + rh)
        if all(r.expanded(1.0).intersection_area(a.expanded(1.0)) == 0 for a in avoid):
            return r
    raise InvalidArgument("could not place a non-overlapping rect")


def _context_rect(rect: Rect, context_frac: float = CONTEXT_FRAC) -> Rect:
    cw = max(rect.width * 1.5, context_frac)
    ch = max(rect.height * 1.5, context_frac)
    cx, cy = (rect.x0 + rect.x1) / 2, (rect.y0 + rect.y1) / 2
    return Rect(max(cx - cw / 2, 0.0), max(cy - ch / 2, 0.0), min(cx + cw / 2, 1.0), min(cy + ch / 2, 1.0))


def make_case(index: int, suite: SuiteConfig) -> SuiteCase:
    rng = np.random.default_rng([suite.seed, index])
    names = sorted(suite.tiers)
    weights = np.array([suite.tiers[n] for n in names], dtype=float)
    tier = names[int(rng.choice(len(names), p=weights / weights.sum()))]
    phrase, answer = _VOCAB[int(rng.integers(len(_VOCAB)))]
    lo, hi = TIER_AREAS[tier]
    rect = _random_rect(rng, rng.uniform(lo, hi), [])
    visibility = float(rng.uniform(0.7, 1.0)) if tier == "tiny" else 1.0
    target = SceneTarget(phrase, rect, round(visibility, 6), answer)
    distractors = []
    if tier == "tiny" and rng.uniform() < suite.distractor_frac:
        ctx = _context_rect(rect)
        drect = _random_rect(rng, rng.uniform(0.002, 0.004), [ctx])
        if _context_rect(drect).intersection_area(ctx) == 0:
            distractors.append(Distractor(phrase, drect, 0.9))
    n_bg = int(rng.integers(suite.background_regions[0], suite.background_regions[1] + 1))
    scene = generate_scene(
        int(rng.integers(2**31)),
        suite.dims,
        n_bg,
        [target],
        noise=suite.noise,
        distractors=distractors,
        tier=tier,
    )
    return SuiteCase(index, scene, f"What is the color of the {phrase}?")


def make_suite(suite: SuiteConfig) -> list[SuiteCase]:
    return [make_case(i, suite) for i in range(suite.n_scenes)]


# ----------------------------------------------------------------------------
# Rigid-grid top-down baseline
# ----------------------------------------------------------------------------


def _grid_children(region: Rect, arity: int) -> list[Rect]:
    out = []
    for i in range(arity):
        for j in range(arity):
            out.append(
                Rect(
                    region.x0 + region.width * j / arity,
                    region.y0 + region.height * i / arity,
                    region.x0 + region.width * (j + 1) / arity if j + 1 < arity else region.x1,
                    region.y0 + region.height * (i + 1) / arity if i + 1 < arity else region.y1,
                )
            )
    return out


def rigid_grid_topdown_search(
    oracles: OracleSuite,
    targets: TargetSet,
    query: str,
    config: SearchConfig,
    grid_arity: int = 2,
    depth: int = 3,
    trace: SearchTrace | None = None,
) -> SearchResult:
    """Greedy root-to-leaf descent over a uniform ``grid_arity`` x ``grid_arity`` tree.

    At each node the sufficiency check runs first; otherwise the child with
    the highest existence confidence is entered.  No backtracking.
    """
    if grid_arity < 2:
        raise InvalidArgument("grid_arity must be >= 2")
    suite = instrument(oracles, trace)
    trace = suite.trace
    start = len(trace.events)
    region, node_id, d = Rect.unit(), 0, 0
    visits, scores = [], {}
    fanout = grid_arity * grid_arity
    while True:
        c_q = suite.sufficiency(region, query)
        visits.append(node_id)
        c_o = scores[node_id].c_o if node_id in scores else 0.0
        hit = c_q > config.tau_q
        trace.add(NodeVisit(node_id, d, 0.0, c_o, c_o, c_q, config.tau_q, tuple(targets) if hit else ()))
        if hit:
            status = FOUND
            break
        if d >= depth:
            status = NOT_FOUND
            break
        best, best_c = None, -1.0
        for idx, child in enumerate(_grid_children(region, grid_arity)):
            vals = [suite.existence(child, o) for o in targets]
            c = max(vals) if config.existence_aggregation == "max" else sum(vals) / len(vals)
            cid = node_id * fanout + idx + 1
            scores[cid] = NodeScore(cid, 0.0, c, 0.0, c)
            if c > best_c:
                best, best_c = (cid, child), c
        node_id, region = best
        d += 1
    resolved = {o: region for o in targets} if status == FOUND else {}
    result = SearchResult(status, node_id, len(visits) - (status == FOUND), visits, scores, resolved)
    result.trace = SearchTrace(list(trace.events[start:]))
    result.final_region = region
    return result


def run_rigid_grid(oracles: OracleSuite, query: str, config: SearchConfig, grid_arity: int = 2, depth: int = 3):
    """Baseline policy end to end; returns an Outcome like :func:`orchestrator.run`."""
    suite = instrument(oracles)
    targets = orchestrator.parse_targets(suite, query)
    result = rigid_grid_topdown_search(suite, targets, query, config, grid_arity, depth)
    region = result.final_region
    if result.found:
        mode = orchestrator.DIRECT if result.node == 0 else orchestrator.SCAN
    else:
        mode = orchestrator.FALLBACK
    answer = suite.answer(region, query)
    suite.trace.add(Termination(mode, result.node))
    return orchestrator.Outcome(mode, answer, [region], 0, list(targets), suite.trace)


# ----------------------------------------------------------------------------
# Benchmark
# ----------------------------------------------------------------------------


def _run_policy(policy: str, case: SuiteCase, config: SearchConfig, suite_cfg: SuiteConfig, use_numba=None):
    oracles = SimulatedOracles(case.scene, rho=suite_cfg.rho, recall_floor=suite_cfg.recall_floor)
    if policy == "cvsearch":
        return orchestrator.run(oracles, case.query, config, use_numba=use_numba)
    if policy == "rigid_grid":
        return run_rigid_grid(oracles, case.query, config)
    raise InvalidArgument(f"unknown policy {policy!r}")


def _case_records(args) -> list[dict]:
    index, suite_cfg, config, policies, timing, use_numba = args
    case = make_case(index, suite_cfg)
    records = []
    for policy in policies:
        rec: dict[str, Any] = {"index": index, "tier": case.scene.tier, "policy": policy}
        t0 = time.perf_counter()
        try:
            out = _run_policy(policy, case, config, suite_cfg, use_numba)
        except Exception as exc:  # per-scene failure goes into the report
            rec.update(mode=None, success=False, error=f"{type(exc).__name__}: {exc}")
            rec.update(sufficiency_calls=0, existence_calls=0, expert_calls=0, answer_calls=0, nodes_visited=0)
        else:
            rec.update(mode=out.mode, success=out.answer == case.expected, iterations=out.iterations, error=None)
            rec.update(out.trace.counters())
            rec["nodes_visited"] = out.trace.node_visits
        if timing:
            rec["wall_time_s"] = round(time.perf_counter() - t0, 6)
        records.append(rec)
    return records


def _summarize(records: list[dict], timing: bool) -> dict:
    n = len(records)
    scan_cost = [r["sufficiency_calls"] + r["existence_calls"] for r in records]
    modes = {m: 0 for m in orchestrator.MODES}
    for r in records:
        if r["mode"] in modes:
            modes[r["mode"]] += 1
    out = {
        "scenes": n,
        "success_rate": sum(r["success"] for r in records) / n,
        "errors": sum(r["error"] is not None for r in records),
        "mean_sufficiency_calls": statistics.fmean(r["sufficiency_calls"] for r in records),
        "median_sufficiency_calls": statistics.median(r["sufficiency_calls"] for r in records),
        "mean_existence_calls": statistics.fmean(r["existence_calls"] for r in records),
        "median_existence_calls": statistics.median(r["existence_calls"] for r in records),
        "mean_expert_calls": statistics.fmean(r["expert_calls"] for r in records),
        "median_expert_calls": statistics.median(r["expert_calls"] for r in records),
        "mean_cost": statistics.fmean(scan_cost),
        "median_cost": statistics.median(scan_cost),
        "mean_nodes_visited": statistics.fmean(r["nodes_visited"] for r in records),
        "mode_counts": modes,
        "mode_ratio": {m: c / n for m, c in modes.items()},
    }
    if timing:
        out["wall_time_s"] = round(sum(r["wall_time_s"] for r in records), 6)
    return out


@dataclass
class BenchmarkReport:
    policies: dict[str, dict]
    scenes: list[dict]
    suite: dict
    config: dict
    seed: int
    cost_proxy: str = COST_PROXY_NOTE

    def to_dict(self) -> dict:
        return {
            "cost_proxy": self.cost_proxy,
            "seed": self.seed,
            "suite": self.suite,
            "config": self.config,
            "policies": self.policies,
            "scenes": self.scenes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def cost_ratio(self, policy: str = "cvsearch", baseline: str = "rigid_grid") -> float:
        return self.policies[policy]["mean_cost"] / self.policies[baseline]["mean_cost"]

    def to_csv(self) -> str:
        cols = ["index", "tier", "policy", "mode", "success", "sufficiency_calls", "existence_calls",
                "expert_calls", "answer_calls", "nodes_visited", "error"]
        lines = [",".join(cols)]
        for r in self.scenes:
            lines.append(",".join("" if r.get(c) is None else str(r.get(c)).replace(",", ";") for c in cols))
        return "\n".join(lines) + "\n"


def run_benchmark(
    suite_config: SuiteConfig,
    policies: Sequence[str],
    config: SearchConfig | None = None,
    *,
    jobs: int = 1,
    timing: bool = False,
    use_numba=None,
) -> BenchmarkReport:
    """Run every policy on every scene; aggregates are reduced in scene order."""
    policies = list(policies)
    if not policies:
        raise InvalidArgument("no policies given")
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise InvalidArgument(f"unknown policies: {', '.join(bad)}")
    config = config or SearchConfig()
    tasks = [(i, suite_config, config, policies, timing, use_numba) for i in range(suite_config.n_scenes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_case = list(pool.map(_case_records, tasks))
    else:
        per_case = [_case_records(t) for t in tasks]
    records = [r for recs in per_case for r in recs]
    summary = {p: _summarize([r for r in records if r["policy"] == p], timing) for p in policies}
    return BenchmarkReport(summary, records, suite_config.to_dict(), config.to_dict(), suite_config.seed)
