import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvsearch.core import (
    AnswerCall,
    ExistenceCall,
    ExpertCall,
    FeatureGrid,
    IterationStart,
    ModeDecision,
    NodeVisit,
    Pruned,
    Rect,
    SearchConfig,
    SearchTrace,
    SufficiencyCall,
    TargetSet,
    Termination,
    cell_window,
    compose_rect,
    crop_grid,
    event_from_dict,
    relative_rect,
    union_rect,
)
from cvsearch.errors import FormatError, InvalidArgument, RegionTooSmall

from conftest import make_grid


# ---------------------------------------------------------------- FeatureGrid


def test_fgrd_header_layout():
    g = make_grid(np.arange(24).reshape(2, 3, 4))
    buf = g.to_bytes()
    assert buf[:4] == b"FGRD"
    assert struct.unpack("<4I", buf[4:20]) == (1, 2, 3, 4)
    assert np.array_equal(np.frombuffer(buf[20:], "<f4"), np.arange(24, dtype=np.float32))


def test_fgrd_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(5, 7, 3)).astype(np.float32)
    data[0, 0, 0] = -0.0
    data[1, 1, 1] = np.float32(1e-45)  # subnormal
    g = FeatureGrid(data)
    path = tmp_path / "g.fgrd"
    g.save(path)
    back = FeatureGrid.load(path)
    assert back.data.tobytes() == data.tobytes()
    assert path.read_bytes() == g.to_bytes()


@pytest.mark.parametrize(
    "mutate, msg",
    [
        (lambda b: b"XGRD" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-1], "length"),
        (lambda b: b[:10], "header"),
    ],
)
def test_fgrd_rejects_malformed(mutate, msg):
    buf = make_grid(np.ones((2, 2, 2))).to_bytes()
    with pytest.raises(FormatError):
        FeatureGrid.from_bytes(mutate(buf))


def test_feature_grid_rejects_nonfinite():
    data = np.ones((2, 2, 1), dtype=np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(InvalidArgument):
        FeatureGrid(data)


def test_feature_grid_is_read_only():
    g = make_grid(np.ones((2, 2, 1)))
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 3


# ---------------------------------------------------------------- Rect


def test_rect_validation():
    with pytest.raises(InvalidArgument):
        Rect(0.5, 0, 0.5, 1)
    with pytest.raises(InvalidArgument):
        Rect(0, 0, 1.1, 1)
    with pytest.raises(InvalidArgument):
        Rect(float("nan"), 0, 1, 1)


def test_rect_iou_hand_values():
    a = Rect(0, 0, 0.5, 1)
    b = Rect(0.25, 0, 0.75, 1)
    assert a.iou(b) == pytest.approx(1 / 3)
    assert a.iou(a) == 1.0
    assert a.iou(Rect(0.5, 0, 1, 1)) == 0.0


def test_compose_examples():
    assert compose_rect(Rect.unit(), Rect(0.2, 0.2, 0.6, 0.6)) == Rect(0.2, 0.2, 0.6, 0.6)
    assert compose_rect(Rect(0.5, 0.5, 1, 1), Rect(0, 0, 0.5, 0.5)) == Rect(0.5, 0.5, 0.75, 0.75)


def test_relative_rect_inverts_compose():
    outer = Rect(0.2, 0.1, 0.6, 0.9)
    inner = Rect(0.25, 0.5, 0.75, 1.0)
    back = relative_rect(outer, compose_rect(outer, inner))
    assert back.as_list() == pytest.approx(inner.as_list(), abs=1e-12)
    assert relative_rect(outer, Rect(0.7, 0, 0.9, 1)) is None


def test_union_rect():
    assert union_rect([Rect(0, 0, 0.1, 0.1), Rect(0.5, 0.6, 0.7, 0.8)]) == Rect(0, 0, 0.7, 0.8)


def test_expanded_clips_to_unit():
    # 10% growth of each side length, split evenly around the center
    r = Rect(0.0, 0.4, 0.2, 0.6).expanded(0.1)
    assert r.as_list() == pytest.approx([0.0, 0.39, 0.21, 0.61])


coords = st.floats(0, 1, allow_nan=False)


@st.composite
def rects(draw):
    x0, x1 = sorted([draw(coords), draw(coords)])
    y0, y1 = sorted([draw(coords), draw(coords)])
    if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
        x0, x1, y0, y1 = 0.1, 0.9, 0.2, 0.8
    return Rect(x0, y0, x1, y1)


@given(rects(), rects(), rects())
def test_compose_associative(a, b, c):
    left = compose_rect(compose_rect(a, b), c)
    right = compose_rect(a, compose_rect(b, c))
    assert left.as_list() == pytest.approx(right.as_list(), abs=1e-12)


@given(rects(), rects())
def test_compose_stays_inside_outer(outer, inner):
    assert outer.contains(compose_rect(outer, inner))
    assert compose_rect(Rect.unit(), inner).as_list() == pytest.approx(inner.as_list(), abs=1e-15)


@given(rects(), rects())
def test_iou_symmetric_and_bounded(a, b):
    assert a.iou(b) == pytest.approx(b.iou(a))
    assert 0.0 <= a.iou(b) <= 1.0


# ---------------------------------------------------------------- crop_grid


def _center_membership(region, h, w):
    """Brute-force rows/cols whose cell centers fall in the half-open rect (closed at 1)."""
    def axis(lo, hi, n):
        keep = []
        for i in range(n):
            c = (i + 0.5) / n
            if lo <= c < hi or (hi >= 1.0 and c >= lo):
                keep.append(i)
        return keep

    return axis(region.y0, region.y1, h), axis(region.x0, region.x1, w)


def test_crop_identity():
    g = make_grid(np.random.default_rng(1).normal(size=(6, 5, 2)))
    assert crop_grid(g, Rect.unit()) == g


def test_crop_exact_half():
    data = np.arange(64 * 2).reshape(8, 8, 2)
    sub = crop_grid(make_grid(data), Rect(0, 0, 0.5, 0.5))
    assert sub.shape == (4, 4, 2)
    assert np.array_equal(sub.data, data[:4, :4].astype(np.float32))


def test_crop_matches_center_oracle_on_thirds():
    region = Rect(0, 0, 0.33, 0.33)
    rows, cols = _center_membership(region, 10, 10)
    sub = crop_grid(make_grid(np.zeros((10, 10, 1))), region)
    assert sub.shape[:2] == (len(rows), len(cols)) == (3, 3)


@given(rects(), st.integers(2, 40), st.integers(2, 40))
def test_cell_window_matches_center_oracle(region, h, w):
    rows, cols = _center_membership(region, h, w)
    r0, r1, c0, c1 = cell_window(region, h, w)
    assert list(range(r0, r1)) == rows
    assert list(range(c0, c1)) == cols


@given(st.integers(2, 30), st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3))
def test_sibling_windows_partition_cells(n, cuts):
    cuts = sorted(set(round(c, 6) for c in cuts))
    edges = [0.0] + cuts + [1.0]
    covered = []
    for lo, hi in zip(edges, edges[1:]):
        if hi - lo <= 0:
            continue
        r0, r1, _, _ = cell_window(Rect(0, lo, 1, hi), n, n)
        covered.extend(range(r0, r1))
    assert covered == list(range(n))


def test_crop_too_small():
    with pytest.raises(RegionTooSmall):
        crop_grid(make_grid(np.zeros((8, 8, 1))), Rect(0, 0, 0.1, 0.5))


@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 4), st.integers(0, 4), st.data())
def test_crop_then_crop_equals_composed(a, b, ra, ca, data):
    # outer rect aligned to cell boundaries of a 16x16 grid
    n = 16
    r0, c0 = ra, ca
    r1, c1 = min(n, r0 + 4 + a), min(n, c0 + 4 + b)
    outer = Rect(c0 / n, r0 / n, c1 / n, r1 / n)
    inner = data.draw(rects())
    g = make_grid(np.arange(n * n).reshape(n, n, 1))
    try:
        nested = crop_grid(crop_grid(g, outer), inner)
    except RegionTooSmall:
        nested = None
    try:
        direct = crop_grid(g, compose_rect(outer, inner))
    except RegionTooSmall:
        direct = None
    if nested is None or direct is None:
        assert nested is None and direct is None
    else:
        assert nested == direct


# ---------------------------------------------------------------- SearchConfig


def test_config_defaults():
    c = SearchConfig()
    assert (c.tau_q, c.tau_q_min, c.tau_v) == (0.9, 0.5, 0.4)
    assert (c.alpha, c.beta, c.gamma) == (0.2, 0.4, 0.4)
    assert (c.k_min, c.k_max, c.depth_single, c.depth_multi) == (4, 8, 2, 3)
    assert c.tree_depth(1) == 2 and c.tree_depth(3) == 3


@pytest.mark.parametrize(
    "bad",
    [
        {"tau_q_min": 0.95},
        {"tau_v": 1.0},
        {"delta_tau": 0.0},
        {"alpha": 0.0, "beta": 0.0, "gamma": 0.0},
        {"alpha": -0.1},
        {"k_min": 1},
        {"k_min": 6, "k_max": 5},
        {"max_iter": 0},
        {"existence_aggregation": "sum"},
    ],
)
def test_config_rejects(bad):
    with pytest.raises(InvalidArgument):
        SearchConfig(**bad)


def test_config_roundtrip_and_unknown_key(tmp_path):
    c = SearchConfig(tau_q=0.8, existence_aggregation="mean")
    p = tmp_path / "c.json"
    p.write_text(c.dumps())
    assert SearchConfig.load(p) == c
    p.write_text(json.dumps({"tau_qq": 0.5}))
    with pytest.raises(FormatError):
        SearchConfig.load(p)
    p.write_text("{not json")
    with pytest.raises(FormatError):
        SearchConfig.load(p)


# ---------------------------------------------------------------- TargetSet


def test_target_set():
    t = TargetSet.of(["Helmet", " helmet ", "tissue  box"])
    assert list(t) == ["Helmet", "tissue box"]
    with pytest.raises(InvalidArgument):
        TargetSet(("a", "A"))
    with pytest.raises(InvalidArgument):
        TargetSet(())


# ---------------------------------------------------------------- trace


def _sample_trace():
    r = Rect(0, 0, 0.5, 0.5)
    t = SearchTrace()
    t.extend(
        [
            IterationStart(0, Rect.unit()),
            SufficiencyCall(Rect.unit(), "q", 0.2),
            ExpertCall(Rect.unit(), ("a",), (), True),
            ModeDecision("ScanSearch", 0.2),
            Pruned("0.1", 0.1, r),
            ExistenceCall(r, "a", 0.5),
            NodeVisit(1, 1, 0.5, 0.5, 0.3, 0.95, 0.9, ("a",)),
            AnswerCall(r, "q", "red"),
            Termination("ScanSearch", 1),
        ]
    )
    return t


def test_trace_counters_match_events():
    t = _sample_trace()
    assert t.counters() == {"sufficiency_calls": 1, "existence_calls": 1, "expert_calls": 1, "answer_calls": 1}
    assert t.node_visits == 1


def test_trace_jsonl_roundtrip():
    t = _sample_trace()
    text = t.to_jsonl() + json.dumps({"outcome": {}}) + "\n"
    back, extra = SearchTrace.from_jsonl(text)
    assert back.to_jsonl() == t.to_jsonl()
    assert extra == [{"outcome": {}}]


def test_event_from_dict_rejects():
    with pytest.raises(FormatError):
        event_from_dict({"event": "Bogus"})
    with pytest.raises(FormatError):
        event_from_dict({"event": "Termination", "status": "x", "node": None, "extra": 1})
    with pytest.raises(FormatError):
        SearchTrace.from_jsonl("[1, 2]\n")
