"""Semantic guided adaptive patching.

Feature-space superpixels, their adjacency graph, connectivity constrained
agglomerative clustering with cost-driven choice of k, visual complexity, and
recursive construction of the adaptive region tree.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .core import FeatureGrid, Rect, SearchConfig, compose_rect, crop_grid
from .errors import Infeasible, InvalidArgument, RegionTooSmall, UndefinedSilhouette

# ----------------------------------------------------------------------------
# Atoms
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class Atom:
    id: int
    cells: np.ndarray  # (n, 2) int (row, col), raster order
    feature: np.ndarray  # float64 mean of member cell features
    spatial_centroid: tuple[float, float]
    bbox: Rect

    @property
    def size(self) -> int:
        return len(self.cells)

    def cell_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.cells}


def _grid_centers(height: int, width: int, n_atoms: int) -> np.ndarray:
    nx = min(width, max(1, math.ceil(math.sqrt(n_atoms * width / height))))
    ny = min(height, max(1, round(n_atoms / nx)))
    ys = (np.arange(ny) + 0.5) * height / ny - 0.5
    xs = (np.arange(nx) + 0.5) * width / nx - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def slic_labels(
    grid: FeatureGrid, n_atoms: int, compactness: float = 0.5, iters: int = 10, use_numba=None
) -> np.ndarray:
    """SLIC over feature space; returns an H x W map of atom ids in raster order."""
    h, w, c = grid.shape
    n = h * w
    if n_atoms < 2 or n < n_atoms or iters < 1:
        raise InvalidArgument(f"cannot make {n_atoms} atoms from a {h}x{w} grid")
    step = math.sqrt(n / n_atoms)
    feats = grid.data.reshape(n, c).astype(np.float64)
    rows, cols = np.divmod(np.arange(n), w)
    pos = np.stack([rows, cols], axis=1).astype(np.float64)

    cpos = _grid_centers(h, w, n_atoms)
    seed_r = np.clip(np.floor(cpos[:, 0] + 0.5).astype(int), 0, h - 1)
    seed_c = np.clip(np.floor(cpos[:, 1] + 0.5).astype(int), 0, w - 1)
    cfeat = feats[seed_r * w + seed_c].copy()
    k = len(cpos)

    labels = None
    for _ in range(iters):
        new = _kernels.slic_assign(feats, pos, cfeat, cpos, compactness, step, 2 * step, use_numba)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        live = counts > 0
        for ax in range(2):
            cpos[live, ax] = np.bincount(labels, weights=pos[:, ax], minlength=k)[live] / counts[live]
        for ch in range(c):
            cfeat[live, ch] = np.bincount(labels, weights=feats[:, ch], minlength=k)[live] / counts[live]

    lab = _kernels.enforce_connectivity(labels.reshape(h, w), feats, use_numba)
    # relabel 0..n-1 by first cell in raster order
    _, first = np.unique(lab.ravel(), return_index=True)
    order = lab.ravel()[np.sort(first)]
    remap = np.empty(int(lab.max()) + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[lab]


def atoms_from_labels(grid: FeatureGrid, labels: np.ndarray) -> list[Atom]:
    h, w, c = grid.shape
    if labels.shape != (h, w):
        raise InvalidArgument("label map does not match grid")
    feats = grid.data.reshape(h * w, c).astype(np.float64)
    flat = labels.ravel()
    atoms = []
    for aid in range(int(flat.max()) + 1):
        idx = np.flatnonzero(flat == aid)
        if idx.size == 0:
            raise InvalidArgument(f"atom {aid} is empty")
        r, cc = np.divmod(idx, w)
        atoms.append(
            Atom(
                id=aid,
                cells=np.stack([r, cc], axis=1),
                feature=feats[idx].mean(axis=0),
                spatial_centroid=(float(r.mean()), float(cc.mean())),
                bbox=Rect(cc.min() / w, r.min() / h, (cc.max() + 1) / w, (r.max() + 1) / h),
            )
        )
    return atoms


def slic_superpixels(
    grid: FeatureGrid, n_atoms: int, compactness: float = 0.5, iters: int = 10, use_numba=None
) -> list[Atom]:
    return atoms_from_labels(grid, slic_labels(grid, n_atoms, compactness, iters, use_numba))


# ----------------------------------------------------------------------------
# Region adjacency graph
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionAdjacencyGraph:
    n: int
    edges: frozenset

    def adjacency_matrix(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        return adj

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def components(self) -> list[list[int]]:
        adj = self.adjacency_matrix()
        seen = np.zeros(self.n, dtype=bool)
        comps = []
        for s in range(self.n):
            if seen[s]:
                continue
            seen[s] = True
            comp, queue = [s], deque([s])
            while queue:
                u = queue.popleft()
                for v in np.flatnonzero(adj[u]):
                    if not seen[v]:
                        seen[v] = True
                        comp.append(int(v))
                        queue.append(int(v))
            comps.append(sorted(comp))
        return comps


def label_map(atoms: Sequence[Atom], grid_dims: tuple[int, int]) -> np.ndarray:
    """Rebuild the atom-id map, checking the atoms partition the grid."""
    h, w = grid_dims[:2]
    lab = np.full((h, w), -1, dtype=np.int64)
    for i, atom in enumerate(atoms):
        r, c = atom.cells[:, 0], atom.cells[:, 1]
        if r.min() < 0 or c.min() < 0 or r.max() >= h or c.max() >= w:
            raise InvalidArgument(f"atom {i} has cells outside the grid")
        if (lab[r, c] >= 0).any() or len(set(zip(r.tolist(), c.tolist()))) != len(r):
            raise InvalidArgument(f"atom {i} overlaps another atom")
        lab[r, c] = i
    if (lab < 0).any():
        raise InvalidArgument("atoms leave cells uncovered")
    return lab


def build_rag(atoms: Sequence[Atom], grid_dims: tuple[int, int]) -> RegionAdjacencyGraph:
    lab = label_map(atoms, grid_dims)
    pairs = []
    for a, b in ((lab[:, :-1], lab[:, 1:]), (lab[:-1, :], lab[1:, :])):
        diff = a != b
        pairs.append(np.stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])], axis=1))
    both = np.unique(np.concatenate(pairs), axis=0) if pairs else np.empty((0, 2), int)
    return RegionAdjacencyGraph(len(atoms), frozenset((int(i), int(j)) for i, j in both))


# ----------------------------------------------------------------------------
# Clustering and its cost
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterPartition:
    k: int
    labels: np.ndarray  # atom id -> cluster id
    boxes: tuple[Rect, ...]
    overlap_cost: float
    silhouette: float
    total_cost: float

    def members(self, cluster: int) -> list[int]:
        return np.flatnonzero(self.labels == cluster).tolist()


def overlap_cost(boxes: Sequence[Rect]) -> float:
    """Mean pairwise IoU of the boxes (0 for a single box)."""
    k = len(boxes)
    if k < 1:
        raise InvalidArgument("overlap_cost needs at least one box")
    if k == 1:
        return 0.0
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            total += boxes[i].iou(boxes[j])
    return total / (k * (k - 1) / 2)


def silhouette_score(atom_features, labels, use_numba=None) -> float:
    feats = np.asarray(atom_features, dtype=np.float64)
    _, dense = np.unique(np.asarray(labels), return_inverse=True)
    k = int(dense.max()) + 1 if dense.size else 0
    if k < 2:
        raise UndefinedSilhouette("silhouette needs at least two clusters")
    dist = _kernels.pairwise_distances(feats, use_numba)
    return float(np.mean(_kernels.silhouette_samples(dist, dense, k, use_numba)))


def _features(atoms: Sequence[Atom]) -> np.ndarray:
    return np.stack([a.feature for a in atoms]).astype(np.float64)


class _MergePlan:
    """Greedy merge sequence shared by every k down to ``k_stop``."""

    def __init__(self, atoms: Sequence[Atom], graph: RegionAdjacencyGraph, k_stop: int, use_numba=None):
        n = len(atoms)
        if graph.n != n:
            raise InvalidArgument("graph size does not match atom count")
        if not 1 <= k_stop <= n:
            raise InvalidArgument(f"k={k_stop} outside [1, {n}]")
        n_comp = len(graph.components())
        if n_comp > k_stop:
            raise Infeasible(f"graph has {n_comp} components, cannot form {k_stop} clusters")
        self.atoms = atoms
        self.n = n
        self.features = _features(atoms)
        self.dist = _kernels.pairwise_distances(self.features, use_numba)
        self.merges = _kernels.agglomerate(self.dist, graph.adjacency_matrix(), k_stop, use_numba)
        self.use_numba = use_numba

    def labels(self, k: int) -> np.ndarray:
        parent = np.arange(self.n)

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for keep, gone in self.merges[: self.n - k]:
            parent[find(gone)] = find(keep)
        roots = np.array([find(i) for i in range(self.n)])
        # cluster ids in order of each cluster's smallest atom id
        _, first = np.unique(roots, return_index=True)
        order = roots[np.sort(first)]
        remap = {int(r): i for i, r in enumerate(order)}
        return np.array([remap[int(r)] for r in roots], dtype=np.int64)

    def partition(self, k: int) -> ClusterPartition:
        labels = self.labels(k)
        boxes = []
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            boxes.append(
                Rect(
                    min(self.atoms[i].bbox.x0 for i in idx),
                    min(self.atoms[i].bbox.y0 for i in idx),
                    max(self.atoms[i].bbox.x1 for i in idx),
                    max(self.atoms[i].bbox.y1 for i in idx),
                )
            )
        l_o = overlap_cost(boxes)
        if k >= 2:
            l_s = float(np.mean(_kernels.silhouette_samples(self.dist, labels, k, self.use_numba)))
        else:
            l_s = 0.0
        return ClusterPartition(k, labels, tuple(boxes), l_o, l_s, l_o - l_s)


def constrained_agglomerative(atoms, graph, k, use_numba=None) -> ClusterPartition:
    """Average-linkage merging restricted to graph-adjacent clusters, down to ``k``."""
    return _MergePlan(atoms, graph, k, use_numba).partition(k)


def select_k(atoms, graph, k_min: int, k_max: int, use_numba=None) -> tuple[int, ClusterPartition]:
    """Cluster count in ``[k_min, k_max]`` minimizing overlap minus silhouette.

    Ties go to the smaller k.
    """
    if not 1 <= k_min <= k_max <= len(atoms):
        raise InvalidArgument(f"bad k range [{k_min}, {k_max}] for {len(atoms)} atoms")
    plan = _MergePlan(atoms, graph, k_min, use_numba)
    best = None
    for k in range(k_min, k_max + 1):
        part = plan.partition(k)
        if best is None or part.total_cost < best.total_cost:
            best = part
    return best.k, best


def cost_curve(atoms, graph, k_min: int, k_max: int, use_numba=None) -> dict[int, ClusterPartition]:
    plan = _MergePlan(atoms, graph, k_min, use_numba)
    return {k: plan.partition(k) for k in range(k_min, k_max + 1)}


def visual_complexity(features) -> float:
    """Dispersion of feature directions around their mean, in [0, 1]."""
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if h.shape[0] == 0:
        raise InvalidArgument("visual complexity of an empty region")
    mean = h.mean(axis=0)
    mnorm = np.linalg.norm(mean)
    norms = np.linalg.norm(h, axis=1)
    denom = norms * mnorm
    cos = np.zeros(len(h))
    ok = denom > 0
    cos[ok] = (h[ok] @ mean) / denom[ok]
    return float(min(1.0, max(0.0, 1.0 - cos.mean())))


# ----------------------------------------------------------------------------
# Adaptive tree
# ----------------------------------------------------------------------------


@dataclass
class TreeNode:
    id: int
    depth: int
    index: int
    region: Rect
    c_v: float
    parent: int | None
    children: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class PrunedRegion:
    parent: int
    slot: int
    region: Rect
    c_v: float

    @property
    def label(self) -> str:
        return f"{self.parent}.{self.slot}"


@dataclass
class AdaptiveTree:
    nodes: dict[int, TreeNode]
    max_depth: int
    root: int = 0
    pruned: list[PrunedRegion] = field(default_factory=list)

    def layer(self, depth: int) -> list[TreeNode]:
        return sorted((n for n in self.nodes.values() if n.depth == depth), key=lambda n: n.id)

    @property
    def deepest(self) -> int:
        return max(n.depth for n in self.nodes.values())

    def children(self, node_id: int) -> list[TreeNode]:
        return [self.nodes[c] for c in self.nodes[node_id].children]

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "depth": n.depth,
                    "index": n.index,
                    "region": [round(v, 6) for v in n.region.as_list()],
                    "c_v": round(n.c_v, 6),
                    "parent": n.parent,
                    "children": list(n.children),
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
            "root": self.root,
            "max_depth": self.max_depth,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "AdaptiveTree":
        nodes = {}
        for d in doc["nodes"]:
            nodes[d["id"]] = TreeNode(
                d["id"], d["depth"], d["index"], Rect.from_seq(d["region"]), d["c_v"], d["parent"], list(d["children"])
            )
        return cls(nodes, doc["max_depth"], doc["root"])


FeatureSource = Callable[[Rect], FeatureGrid]


def build_tree(
    grid: FeatureGrid,
    config: SearchConfig,
    depth: int,
    feature_source: FeatureSource | None = None,
    use_numba=None,
) -> AdaptiveTree:
    """Recursively patch ``grid`` into an adaptive tree of at most ``depth`` layers.

    Child regions are tight boxes around each selected cluster; clusters whose
    complexity falls below ``config.tau_v`` are dropped with their subtrees.
    ``feature_source`` (root-frame rect -> grid) replaces slicing of the parent
    grid when ``config.reextract_features`` is set.
    """
    if depth < 1:
        raise InvalidArgument("tree depth must be >= 1")
    root = TreeNode(0, 0, 0, Rect.unit(), visual_complexity(grid.data.reshape(-1, grid.dim)), None)
    tree = AdaptiveTree({0: root}, depth)
    queue = deque([(root, grid)])
    next_id = 1
    layer_count: dict[int, int] = {}
    while queue:
        node, sub = queue.popleft()
        if node.depth >= depth or sub is None:
            continue
        if sub.height * sub.width < 2 * config.n_atoms:
            continue
        atoms = slic_superpixels(sub, config.n_atoms, config.slic_compactness, config.slic_iters, use_numba)
        if len(atoms) < 2:
            continue
        graph = build_rag(atoms, (sub.height, sub.width))
        k_hi = min(config.k_max, len(atoms))
        k_lo = min(config.k_min, k_hi)
        _, part = select_k(atoms, graph, k_lo, k_hi, use_numba)
        feats = _features(atoms)
        if node.id == tree.root:
            node.c_v = visual_complexity(feats)
        for c in range(part.k):
            c_v = visual_complexity(feats[part.labels == c])
            box = part.boxes[c]
            region = compose_rect(node.region, box)
            if c_v < config.tau_v:
                tree.pruned.append(PrunedRegion(node.id, c, region, c_v))
                continue
            d = node.depth + 1
            child = TreeNode(next_id, d, layer_count.get(d, 0), region, c_v, node.id)
            layer_count[d] = child.index + 1
            next_id += 1
            tree.nodes[child.id] = child
            node.children.append(child.id)
            if config.reextract_features and feature_source is not None:
                child_grid = feature_source(region)
            else:
                try:
                    child_grid = crop_grid(sub, box)
                except RegionTooSmall:
                    child_grid = None
            queue.append((child, child_grid))
    return tree
