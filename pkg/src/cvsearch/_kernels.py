"""Hot numeric kernels.

Every kernel has a numba implementation and a pure-numpy implementation with
identical semantics (same tie-breaks, same accumulation order where it
matters).  The numba path is used when numba imports and the environment
variable ``CVSEARCH_NUMBA`` is not set to ``0``.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("CVSEARCH_NUMBA", "1") != "0"


# ----------------------------------------------------------------------------
# SLIC assignment
# ----------------------------------------------------------------------------


@njit(cache=True)
def _slic_assign_nb(feats, pos, cfeat, cpos, compactness, step, window):
    n = feats.shape[0]
    k = cfeat.shape[0]
    c = feats.shape[1]
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        best_j = -1
        near = np.inf
        near_j = 0
        for j in range(k):
            dy = pos[i, 0] - cpos[j, 0]
            dx = pos[i, 1] - cpos[j, 1]
            sp = np.sqrt(dy * dy + dx * dx)
            if sp < near:
                near = sp
                near_j = j
            if abs(dy) > window or abs(dx) > window:
                continue
            acc = 0.0
            for ch in range(c):
                d = feats[i, ch] - cfeat[j, ch]
                acc += d * d
            dist = np.sqrt(acc) + compactness * sp / step
            if dist < best:
                best = dist
                best_j = j
        labels[i] = best_j if best_j >= 0 else near_j
    return labels


def _slic_assign_np(feats, pos, cfeat, cpos, compactness, step, window):
    dy = pos[:, None, 0] - cpos[None, :, 0]
    dx = pos[:, None, 1] - cpos[None, :, 1]
    sp = np.sqrt(dy * dy + dx * dx)
    acc = np.zeros(sp.shape)
    for ch in range(feats.shape[1]):  # channel order matches the jitted kernel
        d = feats[:, None, ch] - cfeat[None, :, ch]
        acc += d * d
    fd = np.sqrt(acc)
    dist = fd + compactness * sp / step
    inside = (np.abs(dy) <= window) & (np.abs(dx) <= window)
    dist = np.where(inside, dist, np.inf)
    labels = np.argmin(dist, axis=1)
    orphan = ~inside.any(axis=1)
    if orphan.any():
        labels[orphan] = np.argmin(sp[orphan], axis=1)
    return labels.astype(np.int64)


def slic_assign(feats, pos, cfeat, cpos, compactness, step, window, use_numba=None):
    """Label each cell with the center minimizing feature + scaled spatial distance.

    Only centers within ``window`` (Chebyshev, in cells) are candidates; a cell
    with no candidate goes to its spatially nearest center.
    """
    if use_numba is None:
        use_numba = numba_enabled()
    args = (
        np.ascontiguousarray(feats, dtype=np.float64),
        np.ascontiguousarray(pos, dtype=np.float64),
        np.ascontiguousarray(cfeat, dtype=np.float64),
        np.ascontiguousarray(cpos, dtype=np.float64),
        float(compactness),
        float(step),
        float(window),
    )
    if use_numba:
        return _slic_assign_nb(*args)
    return _slic_assign_np(*args)


# ----------------------------------------------------------------------------
# Pairwise distances
# ----------------------------------------------------------------------------


@njit(cache=True)
def _pairwise_nb(x):
    n = x.shape[0]
    c = x.shape[1]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for ch in range(c):
                d = x[i, ch] - x[j, ch]
                acc += d * d
            out[i, j] = np.sqrt(acc)
            out[j, i] = out[i, j]
    return out


def _pairwise_np(x):
    acc = np.zeros((x.shape[0], x.shape[0]))
    for ch in range(x.shape[1]):
        d = x[:, None, ch] - x[None, :, ch]
        acc += d * d
    out = np.sqrt(acc)
    np.fill_diagonal(out, 0.0)
    return out


def pairwise_distances(x, use_numba=None):
    if use_numba is None:
        use_numba = numba_enabled()
    x = np.ascontiguousarray(x, dtype=np.float64)
    if use_numba:
        return _pairwise_nb(x)
    return _pairwise_np(x)


# ----------------------------------------------------------------------------
# Connectivity-constrained average-linkage agglomeration
# ----------------------------------------------------------------------------


@njit(cache=True)
def _agglomerate_nb(dist, adj, n_stop):
    n = dist.shape[0]
    total = dist.copy()
    link = adj.copy()
    size = np.ones(n)
    active = np.ones(n, dtype=np.bool_)
    n_active = n
    merges = np.empty((max(n - n_stop, 0), 2), dtype=np.int64)
    m = 0
    while n_active > n_stop:
        best = np.inf
        bi = -1
        bj = -1
        for i in range(n):
            if not active[i]:
                continue
            for j in range(i + 1, n):
                if not active[j] or not link[i, j]:
                    continue
                v = total[i, j] / (size[i] * size[j])
                if v < best:
                    best = v
                    bi = i
                    bj = j
        if bi < 0:
            break
        for t in range(n):
            total[bi, t] += total[bj, t]
            total[t, bi] = total[bi, t]
            link[bi, t] = link[bi, t] or link[bj, t]
            link[t, bi] = link[bi, t]
        link[bi, bi] = False
        size[bi] += size[bj]
        active[bj] = False
        merges[m, 0] = bi
        merges[m, 1] = bj
        m += 1
        n_active -= 1
    return merges[:m]


def _agglomerate_np(dist, adj, n_stop):
    n = dist.shape[0]
    total = dist.copy()
    link = adj.copy()
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    merges = []
    n_active = n
    while n_active > n_stop:
        ok = link & upper & active[:, None] & active[None, :]
        if not ok.any():
            break
        vals = np.where(ok, total / np.outer(size, size), np.inf)
        flat = int(np.argmin(vals))
        bi, bj = divmod(flat, n)
        total[bi, :] += total[bj, :]
        total[:, bi] = total[bi, :]
        link[bi, :] |= link[bj, :]
        link[:, bi] = link[bi, :]
        link[bi, bi] = False
        size[bi] += size[bj]
        active[bj] = False
        merges.append((bi, bj))
        n_active -= 1
    return np.array(merges, dtype=np.int64).reshape(-1, 2)


def agglomerate(dist, adj, n_stop, use_numba=None):
    """Greedy merge sequence down to ``n_stop`` clusters.

    Returns an (m, 2) array of ``(keep, absorbed)`` cluster slots; cluster
    slots are the index of their lowest original member.  Only pairs adjacent
    in the (contracted) graph may merge; ties go to the smallest ``(i, j)``.
    """
    if use_numba is None:
        use_numba = numba_enabled()
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    adj = np.ascontiguousarray(adj, dtype=np.bool_)
    if use_numba:
        return _agglomerate_nb(dist, adj, int(n_stop))
    return _agglomerate_np(dist, adj, int(n_stop))


# ----------------------------------------------------------------------------
# Silhouette
# ----------------------------------------------------------------------------


@njit(cache=True)
def _silhouette_nb(dist, labels, k):
    n = dist.shape[0]
    counts = np.zeros(k)
    for i in range(n):
        counts[labels[i]] += 1
    out = np.zeros(n)
    sums = np.zeros(k)
    for i in range(n):
        for c in range(k):
            sums[c] = 0.0
        for j in range(n):
            sums[labels[j]] += dist[i, j]
        own = labels[i]
        if counts[own] <= 1:
            out[i] = 0.0
            continue
        a = sums[own] / (counts[own] - 1)
        b = np.inf
        for c in range(k):
            if c != own and counts[c] > 0:
                v = sums[c] / counts[c]
                if v < b:
                    b = v
        m = max(a, b)
        out[i] = 0.0 if m == 0.0 else (b - a) / m
    return out


def _silhouette_np(dist, labels, k):
    n = dist.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    counts = onehot.sum(axis=0)
    sums = dist @ onehot
    own = labels
    own_n = counts[own]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = sums[np.arange(n), own] / (own_n - 1)
        means = sums / counts[None, :]
    means[np.arange(n), own] = np.inf
    means[:, counts == 0] = np.inf
    b = means.min(axis=1)
    m = np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(m > 0, (b - a) / m, 0.0)
    s[own_n <= 1] = 0.0
    return s


def silhouette_samples(dist, labels, k, use_numba=None):
    if use_numba is None:
        use_numba = numba_enabled()
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if use_numba:
        return _silhouette_nb(dist, labels, int(k))
    return _silhouette_np(dist, labels, int(k))


# ----------------------------------------------------------------------------
# Superpixel connectivity repair
# ----------------------------------------------------------------------------


def _connectivity_impl(labels, feats):
    # Written in the numba-compatible subset; jitted below for the fast path.
    h, w = labels.shape
    n = h * w
    c = feats.shape[1]
    flat = labels.ravel().copy()
    comp = np.full(n, -1, dtype=np.int64)
    comp_label = np.empty(n, dtype=np.int64)
    comp_size = np.zeros(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    ncomp = 0
    for s in range(n):
        if comp[s] >= 0:
            continue
        lab = flat[s]
        comp[s] = ncomp
        stack[0] = s
        top = 1
        size = 0
        while top > 0:
            top -= 1
            u = stack[top]
            size += 1
            r = u // w
            col = u % w
            for k in range(4):
                if k == 0:
                    if r == 0:
                        continue
                    v = u - w
                elif k == 1:
                    if r == h - 1:
                        continue
                    v = u + w
                elif k == 2:
                    if col == 0:
                        continue
                    v = u - 1
                else:
                    if col == w - 1:
                        continue
                    v = u + 1
                if comp[v] < 0 and flat[v] == lab:
                    comp[v] = ncomp
                    stack[top] = v
                    top += 1
        comp_label[ncomp] = lab
        comp_size[ncomp] = size
        ncomp += 1

    nlab = flat.max() + 1
    keeper = np.full(nlab, -1, dtype=np.int64)
    best = np.zeros(nlab, dtype=np.int64)
    for ci in range(ncomp):
        lab = comp_label[ci]
        if comp_size[ci] > best[lab]:
            best[lab] = comp_size[ci]
            keeper[lab] = ci

    out = flat.copy()
    sums = np.zeros((nlab, c))
    counts = np.zeros(nlab)
    for u in range(n):
        if keeper[flat[u]] != comp[u]:
            out[u] = -1
        else:
            counts[flat[u]] += 1
            for ch in range(c):
                sums[flat[u], ch] += feats[u, ch]
    for lab in range(nlab):
        if counts[lab] > 0:
            for ch in range(c):
                sums[lab, ch] /= counts[lab]

    # cells grouped by component (counting sort keeps raster order inside)
    start = np.zeros(ncomp + 1, dtype=np.int64)
    for u in range(n):
        start[comp[u] + 1] += 1
    for ci in range(ncomp):
        start[ci + 1] += start[ci]
    fill = start[:-1].copy()
    cells = np.empty(n, dtype=np.int64)
    for u in range(n):
        cells[fill[comp[u]]] = u
        fill[comp[u]] += 1

    pending = np.zeros(ncomp, dtype=np.bool_)
    n_pending = 0
    for ci in range(ncomp):
        if keeper[comp_label[ci]] != ci:
            pending[ci] = True
            n_pending += 1
    frag = np.zeros(c)
    while n_pending > 0:
        progressed = False
        for ci in range(ncomp):
            if not pending[ci]:
                continue
            size = start[ci + 1] - start[ci]
            for ch in range(c):
                frag[ch] = 0.0
            for t in range(start[ci], start[ci + 1]):
                for ch in range(c):
                    frag[ch] += feats[cells[t], ch]
            for ch in range(c):
                frag[ch] /= size
            best_d = np.inf
            best_l = -1
            for t in range(start[ci], start[ci + 1]):
                u = cells[t]
                r = u // w
                col = u % w
                for k in range(4):
                    if k == 0:
                        if r == 0:
                            continue
                        v = u - w
                    elif k == 1:
                        if r == h - 1:
                            continue
                        v = u + w
                    elif k == 2:
                        if col == 0:
                            continue
                        v = u - 1
                    else:
                        if col == w - 1:
                            continue
                        v = u + 1
                    lab = out[v]
                    if lab < 0:
                        continue
                    acc = 0.0
                    for ch in range(c):
                        d = frag[ch] - sums[lab, ch]
                        acc += d * d
                    d = np.sqrt(acc)
                    if d < best_d or (d == best_d and lab < best_l):
                        best_d = d
                        best_l = lab
            if best_l >= 0:
                for t in range(start[ci], start[ci + 1]):
                    out[cells[t]] = best_l
                pending[ci] = False
                n_pending -= 1
                progressed = True
        if not progressed:
            break
    return out.reshape(h, w)


_connectivity_nb = njit(cache=True)(_connectivity_impl)


def enforce_connectivity(labels, feats, use_numba=None):
    """Keep each label's largest 4-connected piece and fold every other piece
    into the adjacent label whose kept-piece mean feature is nearest."""
    if use_numba is None:
        use_numba = numba_enabled()
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    feats = np.ascontiguousarray(feats, dtype=np.float64).reshape(labels.size, -1)
    if use_numba:
        return _connectivity_nb(labels, feats)
    return _connectivity_impl(labels, feats)
