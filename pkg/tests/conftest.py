import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cvsearch.core import FeatureGrid, Rect

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


def make_grid(data) -> FeatureGrid:
    return FeatureGrid(np.asarray(data, dtype=np.float32))


def block_grid(h, w, blocks, dim=4):
    """Grid whose cells take ``feature`` inside each (r0, r1, c0, c1) block."""
    data = np.zeros((h, w, dim), dtype=np.float32)
    for (r0, r1, c0, c1), feature in blocks:
        data[r0:r1, c0:c1] = feature
    return FeatureGrid(data)


@pytest.fixture
def quadrant_grid():
    feats = np.eye(4) * 5 + 1
    return block_grid(
        16, 16,
        [((0, 8, 0, 8), feats[0]), ((0, 8, 8, 16), feats[1]), ((8, 16, 0, 8), feats[2]), ((8, 16, 8, 16), feats[3])],
    )


@pytest.fixture
def unit():
    return Rect.unit()


def random_tree(rng, depth=2, max_children=4):
    """AdaptiveTree whose nodes split the parent into vertical strips with random c_v."""
    from cvsearch.patching import AdaptiveTree, TreeNode

    nodes = {0: TreeNode(0, 0, 0, Rect.unit(), 0.0, None)}
    frontier = [0]
    next_id = 1
    for d in range(1, depth + 1):
        new = []
        for pid in frontier:
            parent = nodes[pid]
            n = int(rng.integers(2, max_children + 1))
            cuts = np.linspace(parent.region.x0, parent.region.x1, n + 1)
            for i in range(n):
                r = Rect(float(cuts[i]), parent.region.y0, float(cuts[i + 1]), parent.region.y1)
                nodes[next_id] = TreeNode(next_id, d, i, r, float(rng.uniform(0.4, 1.0)), pid)
                parent.children.append(next_id)
                new.append(next_id)
                next_id += 1
        frontier = new
    return AdaptiveTree(nodes, depth)


def reference_search(tree, c_o, c_q, config):
    """Plain re-statement of the single-target bottom-up visit order.

    ``c_o`` and ``c_q`` map node id -> confidence.
    Returns (visits, found_node or None, number of failed visits).
    Each layer is ordered by repeated selection of the best remaining node.
    """
    scores = {}
    visits = []
    step = 0
    for d in range(tree.max_depth, 0, -1):
        layer = [n for n in tree.nodes.values() if n.depth == d]
        for n in layer:
            child = max((scores[c] for c in n.children), default=0.0)
            scores[n.id] = config.alpha * n.c_v + config.beta * c_o[n.id] + config.gamma * child
        remaining = list(layer)
        while remaining:
            best = remaining[0]
            for n in remaining[1:]:
                if scores[n.id] > scores[best.id] or (scores[n.id] == scores[best.id] and n.id < best.id):
                    best = n
            remaining.remove(best)
            visits.append(best.id)
            tau = max(config.tau_q - step * config.delta_tau, config.tau_q_min)
            if c_q[best.id] > tau:
                return visits, best.id, step
            step += 1
    return visits, None, step


def scripted_for_tree(tree, c_o, c_q):
    from cvsearch.oracles.scripted import ScriptedOracles, by_region

    return ScriptedOracles(
        sufficiency=by_region({tree.nodes[i].region: v for i, v in c_q.items()}),
        existence=by_region({tree.nodes[i].region: v for i, v in c_o.items()}),
    )


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    # setup errors count as failures too
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    status = "PASS" if rep.passed else "FAIL"
    _ACCEPTANCE[n] = (status, title, getattr(item, "acceptance_detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"criterion {n:>2} {status}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a measured summary to the acceptance line of the running test."""

    def record(text):
        request.node.acceptance_detail = text
        print(f"criterion detail: {text}")

    return record
