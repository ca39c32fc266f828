"""End-to-end acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line in the "acceptance criteria" section of the
pytest summary.
"""

import base64
import json
import math
import struct
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from cvsearch import orchestrator
from cvsearch.core import (
    FeatureGrid,
    NodeVisit,
    Rect,
    SearchConfig,
    TargetSet,
    compose_rect,
)
from cvsearch.errors import OracleUnavailable, RangeError
from cvsearch.harness import SuiteConfig, generate_scene, make_case, run_benchmark
from cvsearch.oracles.http import HttpClient, http_score
from cvsearch.oracles.scripted import ScriptedOracles
from cvsearch.oracles.simulated import SimulatedOracles
from cvsearch.patching import (
    build_rag,
    build_tree,
    cost_curve,
    select_k,
    slic_superpixels,
    visual_complexity,
)
from cvsearch.search import FOUND, NOT_FOUND, bottom_up_search, dynamic_threshold, node_priority

from conftest import random_tree, reference_search, scripted_for_tree

SUITE = SuiteConfig(n_scenes=200, seed=0)


def _flat_tree(n):
    from cvsearch.patching import AdaptiveTree, TreeNode

    nodes = {0: TreeNode(0, 0, 0, Rect.unit(), 0.0, None)}
    for i in range(1, n + 1):
        nodes[i] = TreeNode(i, 1, i - 1, Rect((i - 1) / n, 0, i / n, 1), 0.5, 0)
        nodes[0].children.append(i)
    return AdaptiveTree(nodes, 1)


@pytest.mark.acceptance(1, "analytic c_v, priority and threshold values")
def test_criterion_1_analytic(detail):
    cfg = SearchConfig()
    checks = [
        (visual_complexity(np.ones((6, 3))), 0.0),
        (visual_complexity(np.eye(4)), 0.5),
        (visual_complexity(np.eye(2)), 1 - math.sqrt(0.5)),
        (visual_complexity(np.array([[1.0, 2.0], [-1.0, -2.0]])), 1.0),
        (node_priority(0.6, 0.3, 0.45, cfg), 0.42),
        (node_priority(0.5, 0.72, 0.25, cfg), 0.488),
        (dynamic_threshold(0.9, 0, 0.05, 0.5), 0.9),
        (dynamic_threshold(0.9, 3, 0.05, 0.5), 0.75),
        (dynamic_threshold(0.9, 8, 0.05, 0.5), 0.5),
        (dynamic_threshold(0.9, 12, 0.05, 0.5), 0.5),
    ]
    worst = max(abs(got - want) for got, want in checks)
    detail(f"{len(checks)} values, max abs error {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.acceptance(2, "select_k recovers planted k on >=95/100 grids, cost minimal, <60 s")
def test_criterion_2_select_k(detail):
    t0 = time.perf_counter()
    hits = 0
    for seed in range(100):
        k_true = int(np.random.default_rng(seed).integers(4, 9))
        scene = generate_scene(seed, (64, 64), k_true, noise=0.0, layout="random")
        atoms = slic_superpixels(scene.grid, 64)
        graph = build_rag(atoms, (64, 64))
        k, part = select_k(atoms, graph, 4, 8)
        curve = cost_curve(atoms, graph, 4, 8)
        assert all(part.total_cost <= p.total_cost for p in curve.values())
        hits += k == k_true
    elapsed = time.perf_counter() - t0
    detail(f"{hits}/100 recovered in {elapsed:.1f}s")
    assert hits >= 95 and elapsed < 60


@pytest.mark.acceptance(3, "search order equals brute-force enumeration on 50 trees")
def test_criterion_3_search_order(detail):
    rng = np.random.default_rng(2024)
    cfg = SearchConfig()
    found = 0
    for i in range(50):
        depth = 1 + i % 3
        tree = random_tree(rng, depth=depth, max_children=4 if depth < 3 else 3)
        assert len(tree.nodes) <= 40
        ids = [n for n in tree.nodes if n != tree.root]
        c_o = {n: float(rng.uniform()) for n in ids}
        c_q = {n: float(rng.uniform(0, 0.95)) for n in ids}
        res = bottom_up_search(tree, scripted_for_tree(tree, c_o, c_q), TargetSet.of(["cup"]), "cup?", cfg)
        visits, hit, steps = reference_search(tree, c_o, c_q, cfg)
        assert res.visits == visits and res.steps == steps
        assert (res.node if res.found else None) == hit
        found += res.found
    detail(f"50 trees matched, {found} found / {50 - found} not found")


@pytest.mark.acceptance(4, "gate truth table over 1000 c_q values")
def test_criterion_4_gate(detail):
    cfg = SearchConfig()
    rng = np.random.default_rng(4)
    values = list(rng.uniform(0, 1, size=994)) + [0.0, 1.0, 0.9, np.nextafter(0.9, 1), np.nextafter(0.9, 0), 0.5]
    direct = 0
    for c in values:
        out = orchestrator.run(ScriptedOracles(sufficiency=float(c)), "What color is the cup?", cfg)
        is_direct = out.mode == orchestrator.DIRECT
        assert is_direct == (c > cfg.tau_q), c
        if is_direct:
            k = out.trace.counters()
            assert (k["sufficiency_calls"], k["answer_calls"], k["expert_calls"]) == (1, 1, 0)
            direct += 1
    detail(f"{len(values)} values, {direct} direct")
    assert len(values) == 1000


@pytest.mark.acceptance(5, "c_q=0.55 resolves only at k_step>=8; NOT_FOUND with floor 0.6")
def test_criterion_5_relaxation(detail):
    tree = _flat_tree(12)
    oracles = ScriptedOracles(sufficiency=0.55, existence=0.2)
    res = bottom_up_search(tree, oracles, TargetSet.of(["cup"]), "cup?", SearchConfig())
    visits = res.trace.of_kind(NodeVisit)
    assert res.status == FOUND and res.steps == 8
    for k, v in enumerate(visits):
        assert bool(v.resolved) == (k >= 8)
        assert v.tau_curr == pytest.approx(max(0.9 - 0.05 * k, 0.5))
    strict = bottom_up_search(tree, oracles, TargetSet.of(["cup"]), "cup?", SearchConfig(tau_q_min=0.6))
    assert strict.status == NOT_FOUND
    detail(f"found at visit {len(visits)}, k_step {res.steps}; floor 0.6 -> {strict.status}")


@pytest.fixture(scope="module")
def suite_report():
    t0 = time.perf_counter()
    report = run_benchmark(SUITE, ["cvsearch", "rigid_grid"])
    return report, time.perf_counter() - t0


@pytest.mark.acceptance(6, "200 scenes: cost <= 0.6x baseline, success >= baseline, <5 min")
def test_criterion_6_benchmark(suite_report, detail):
    report, elapsed = suite_report
    cv, rg = report.policies["cvsearch"], report.policies["rigid_grid"]
    ratio = report.cost_ratio()
    detail(
        f"cost {cv['mean_cost']:.3f} vs {rg['mean_cost']:.3f} (ratio {ratio:.3f}), "
        f"success {cv['success_rate']:.3f} vs {rg['success_rate']:.3f}, {elapsed:.1f}s"
    )
    assert cv["errors"] == 0 and rg["errors"] == 0
    assert ratio <= 0.6
    assert cv["success_rate"] >= rg["success_rate"]
    assert elapsed < 300


@pytest.mark.acceptance(7, "all three modes occur; Direct share falls as tau_q rises")
def test_criterion_7_mode_sweep(detail):
    shares = []
    seen = set()
    for tau in (0.5, 0.6, 0.7, 0.8, 0.9):
        cfg = SearchConfig(tau_q=tau, tau_q_min=min(0.5, tau))
        s = run_benchmark(SUITE, ["cvsearch"], cfg).policies["cvsearch"]
        shares.append(s["mode_ratio"][orchestrator.DIRECT])
        seen |= {m for m, c in s["mode_counts"].items() if c}
    detail("direct " + " ".join(f"{x:.3f}" for x in shares) + "; modes " + ",".join(sorted(seen)))
    assert {orchestrator.DIRECT, orchestrator.EXPERT, orchestrator.SCAN} <= seen
    assert all(a > b for a, b in zip(shares, shares[1:]))


@pytest.mark.acceptance(8, "same seed gives byte-identical trace and report")
def test_criterion_8_reproducible(detail):
    small = SuiteConfig(n_scenes=20, seed=5)
    a = run_benchmark(small, ["cvsearch", "rigid_grid"]).dumps()
    b = run_benchmark(small, ["cvsearch", "rigid_grid"]).dumps()
    c = run_benchmark(small, ["cvsearch", "rigid_grid"], jobs=2).dumps()
    traces = []
    for _ in range(2):
        case = make_case(7, small)
        traces.append(orchestrator.run(SimulatedOracles(case.scene), case.query).to_jsonl())
    kernels = run_benchmark(small, ["cvsearch"], use_numba=False).dumps() == run_benchmark(
        small, ["cvsearch"], use_numba=True
    ).dumps()
    detail(f"report {len(a)} bytes, trace {len(traces[0])} bytes, numba/numpy identical={kernels}")
    assert a == b == c
    assert traces[0] == traces[1]
    assert kernels


def _components(cells, members_adj):
    start = next(iter(cells))
    seen, stack = {start}, [start]
    while stack:
        for nb in members_adj[stack.pop()] & cells:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen == cells


def _random_feature_grid(rng):
    h, w = (int(x) for x in rng.integers(12, 25, size=2))
    if rng.uniform() < 0.5:
        data = rng.normal(size=(h, w, 4))
    else:
        data = np.zeros((h, w, 4))
        data[..., 0] = 3
        r0, c0 = int(rng.integers(0, h - 6)), int(rng.integers(0, w - 6))
        data[r0:r0 + 6, c0:c0 + 6] = rng.normal(size=(6, 6, 4)) * 3
    return FeatureGrid(data.astype(np.float32))


@pytest.mark.acceptance(9, "randomized invariant suites, 1000 cases each")
def test_criterion_9_invariants(detail):
    rng = np.random.default_rng(9)
    n = 1000
    counts = {}

    # tree containment and pruning
    pruned_total = 0
    for _ in range(n):
        grid = _random_feature_grid(rng)
        cfg = SearchConfig(n_atoms=16, tau_v=float(rng.uniform(0, 0.6)))
        tree = build_tree(grid, cfg, int(rng.integers(1, 4)))
        for node in tree.nodes.values():
            if node.parent is None:
                continue
            parent = tree.nodes[node.parent]
            assert parent.region.contains(node.region, tol=1e-9)
            assert node.depth == parent.depth + 1 and cfg.tau_v <= node.c_v <= 1
        for p in tree.pruned:
            assert p.c_v < cfg.tau_v
        pruned_total += len(tree.pruned)
    counts["tree"] = n

    # partition connectivity
    for _ in range(n):
        grid = _random_feature_grid(rng)
        h, w = grid.shape[:2]
        atoms = slic_superpixels(grid, 16)
        graph = build_rag(atoms, (h, w))
        adj = {i: set() for i in range(len(atoms))}
        for a, b in graph.edges:
            adj[a].add(b)
            adj[b].add(a)
        hi = min(8, len(atoms))
        for k, part in cost_curve(atoms, graph, min(4, hi), hi).items():
            for c in range(k):
                assert _components(set(part.members(c)), adj)
    counts["partition"] = n

    # c_v range and scale invariance
    for _ in range(n):
        x = rng.normal(size=(int(rng.integers(1, 12)), int(rng.integers(1, 6))))
        c = visual_complexity(x)
        assert 0.0 <= c <= 1.0
        assert abs(visual_complexity(x * float(rng.uniform(1e-3, 1e3))) - c) <= 1e-9
    counts["c_v"] = n

    # rect composition associativity
    def rnd_rect():
        x0, y0 = rng.uniform(0, 0.99, 2)
        return Rect(x0, y0, rng.uniform(x0 + 1e-3, 1), rng.uniform(y0 + 1e-3, 1))

    for _ in range(n):
        a, b, c = rnd_rect(), rnd_rect(), rnd_rect()
        left = compose_rect(compose_rect(a, b), c)
        right = compose_rect(a, compose_rect(b, c))
        assert np.allclose(left.as_list(), right.as_list(), atol=1e-12)
    counts["rect"] = n

    # each node visited at most once
    for _ in range(n):
        tree = random_tree(rng, depth=int(rng.integers(1, 4)), max_children=4)
        ids = [i for i in tree.nodes if i != tree.root]
        c_o = {i: float(rng.uniform()) for i in ids}
        c_q = {i: float(rng.uniform(0, 0.95)) for i in ids}
        res = bottom_up_search(tree, scripted_for_tree(tree, c_o, c_q), TargetSet.of(["cup"]), "cup?", SearchConfig())
        assert len(res.visits) == len(set(res.visits))
        assert set(res.visits) <= set(ids)
    counts["visit_once"] = n

    detail(", ".join(f"{k}={v}" for k, v in counts.items()) + f"; {pruned_total} pruned regions seen")
    assert min(counts.values()) >= 1000 and pruned_total > 0


class _Stub(BaseHTTPRequestHandler):
    def do_POST(self):
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        status, payload, delay = self.server.script.pop(0)
        if delay:
            time.sleep(delay)
        raw = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        try:
            self.wfile.write(raw)
        except OSError:
            pass

    def log_message(self, *args):
        pass


@pytest.mark.acceptance(10, "HTTP stub behaviour and bit-exact FGRD round trip")
def test_criterion_10_http_and_fgrd(detail, tmp_path):
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    url = f"http://127.0.0.1:{srv.server_address[1]}"
    try:
        srv.script = [(200, {"confidence": 0.9}, 0)]
        assert http_score(url, {}) == 0.9

        srv.script = [(503, {}, 0), (200, {"confidence": 0.6}, 0)]
        client = HttpClient(url, backoff=0.01)
        assert http_score(client, {}) == 0.6 and client.retry_count == 1

        srv.script = [(200, {"confidence": 0.9}, 1.0)]
        with pytest.raises(OracleUnavailable):
            http_score(HttpClient(url, timeout=0.2), {})

        srv.script = [(200, {"confidence": 1.7}, 0)]
        with pytest.raises(RangeError):
            http_score(url, {})
    finally:
        srv.shutdown()
        srv.server_close()

    rng = np.random.default_rng(10)
    data = rng.normal(size=(7, 5, 3)).astype(np.float32)
    data.flat[:4] = [-0.0, np.float32(1e-45), np.finfo(np.float32).max, np.finfo(np.float32).tiny]
    blob = FeatureGrid(data).to_bytes()
    assert blob[:4] == b"FGRD" and struct.unpack("<4I", blob[4:20]) == (1, 7, 5, 3)
    back = FeatureGrid.from_bytes(base64.b64decode(base64.b64encode(blob)))
    assert back.data.tobytes() == data.tobytes()
    FeatureGrid(data).save(tmp_path / "g.fgrd")
    assert (tmp_path / "g.fgrd").read_bytes() == blob
    assert FeatureGrid.load(tmp_path / "g.fgrd").data.tobytes() == data.tobytes()
    detail("success, retry-after-503, timeout, out-of-range; FGRD 7x5x3 bit-exact")
