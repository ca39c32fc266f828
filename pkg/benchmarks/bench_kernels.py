"""Compare the numba and pure-numpy kernel paths on scene-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--size 64]

The first numba call includes JIT compilation (cached on disk afterwards);
it is warmed up before timing.
"""

import argparse
import time

import numpy as np

from cvsearch import _kernels
from cvsearch.core import SearchConfig
from cvsearch.harness import SuiteConfig, make_case
from cvsearch.patching import build_rag, build_tree, slic_labels, slic_superpixels


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()

    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return

    scene = make_case(1, SuiteConfig(n_scenes=1, dims=(args.size, args.size))).scene
    grid = scene.grid
    atoms = slic_superpixels(grid, 64)
    feats = np.stack([a.feature for a in atoms])
    graph = build_rag(atoms, (grid.height, grid.width))
    dist = _kernels.pairwise_distances(feats)
    adj = graph.adjacency_matrix()
    labels = slic_labels(grid, 64)
    cell_feats = grid.data.reshape(-1, grid.dim).astype(np.float64)
    config = SearchConfig()

    cases = {
        "slic_labels": lambda nb: slic_labels(grid, 64, use_numba=nb),
        "pairwise_distances": lambda nb: _kernels.pairwise_distances(feats, nb),
        "agglomerate": lambda nb: _kernels.agglomerate(dist, adj, 1, nb),
        "silhouette_samples": lambda nb: _kernels.silhouette_samples(dist, np.arange(len(atoms)) % 5, 5, nb),
        "enforce_connectivity": lambda nb: _kernels.enforce_connectivity(labels, cell_feats, nb),
        "build_tree(depth=2)": lambda nb: build_tree(grid, config, 2, use_numba=nb),
    }
    print(f"grid {grid.height}x{grid.width}x{grid.dim}, {len(atoms)} atoms, best of {args.repeat}")
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases.items():
        fn(True)  # compile
        t_np = _time(lambda: fn(False), args.repeat)
        t_nb = _time(lambda: fn(True), args.repeat)
        print(f"{name:<22} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.1f}")


if __name__ == "__main__":
    main()
