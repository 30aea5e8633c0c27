"""Time the numba kernels against the pure-numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 24] [--points 6] [--repeat 3]

Both kernel modules are imported directly, so the environment flag that
selects the solver's backend has no effect here.  The first numba call of
each kernel (compilation) is excluded from the timings.
"""
import argparse
import time

import numpy as np

from ccsocr import _kernels_numpy
from ccsocr.regularizers import PatchGeometry
from ccsocr.scenes import PatternSpec, default_pyramid_grid, make_pattern
from ccsocr.transport import TransportOperator, timing_window, virtual_points

try:
    from ccsocr import _kernels_numba
except ImportError:  # pragma: no cover
    _kernels_numba = None


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        tic = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - tic)
    return best


def cases(n, points):
    grid = default_pyramid_grid(n)
    pairs = make_pattern(PatternSpec(kind="box-frame", counts=(points,), extent=(1.2, 1.2),
                                     mode="exhaustive-nonconfocal"))
    illum = np.array([p.illum for p in pairs])
    detect = np.array([p.detect for p in pairs])
    t0, n_t = timing_window(grid, illum, detect, 32e-12)
    op = TransportOperator(grid, illum, detect, n_t, 32e-12, t0)
    r = np.random.default_rng(0)
    u = r.normal(size=(grid.n_voxels, 3))
    s = r.normal(size=(op.n_pairs, n_t))
    c = op._centers
    args = (n_t, op._inv_cdt, op._t0_bins, op.quadrature_weight)
    table = (op._points, op._ia, op._id, op._dist, op._inv_r2, op._inv_r3)

    pts = virtual_points(grid, 0.0).reshape(-1, 3)
    t0v, n_tv = timing_window(grid, pts, pts, 32e-12)
    vop = TransportOperator.virtual(grid, 0.0, n_tv, 32e-12, t0v)
    geo = (vop._cols_y, vop._cols_z, vop._dir_x, vop._ys, vop._zs, vop._fbin, vop._kern, n_tv)
    uv = r.normal(size=grid.shape + (3,))
    sv = r.normal(size=(vop.n_pairs, n_tv))
    shape = np.array(grid.shape, dtype=np.int64)

    geom = PatchGeometry(grid.shape, (4, 4, 4), (2, 2, 2))
    blocks = np.ascontiguousarray(geom.extract(r.random(grid.shape)))
    lattice = np.array(geom.lattice, dtype=np.int64)

    return [
        ("transport_forward_table", lambda k: k.transport_forward_table(c, u, *table, *args)),
        ("transport_adjoint_table", lambda k: k.transport_adjoint_table(c, s, *table, *args)),
        ("transport_forward", lambda k: k.transport_forward(c, u, illum, detect, *args)),
        ("transport_adjoint", lambda k: k.transport_adjoint(c, s, illum, detect, *args)),
        ("transport_gram_diagonal", lambda k: k.transport_gram_diagonal(c, illum, detect, *args)),
        ("lattice_forward", lambda k: k.lattice_forward(uv, *geo)),
        ("lattice_adjoint", lambda k: k.lattice_adjoint(sv, shape, *geo)),
        ("block_match", lambda k: k.block_match(blocks, lattice, 5, 8)),
    ], f"grid {n}^3, {op.n_pairs} pairs, {n_t} bins, {vop.n_pairs} virtual pairs"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=24, help="grid size per axis")
    parser.add_argument("--points", type=int, default=6, help="box-frame points per side")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    kernels, label = cases(args.n, args.points)
    print(label)
    print(f"{'kernel':26s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s}")
    for name, call in kernels:
        t_np = best_of(lambda: call(_kernels_numpy), args.repeat)
        if _kernels_numba is None:
            print(f"{name:26s} {t_np:10.4f} {'n/a':>10s} {'n/a':>8s}")
            continue
        call(_kernels_numba)  # compile
        t_nb = best_of(lambda: call(_kernels_numba), args.repeat)
        print(f"{name:26s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}")


if __name__ == "__main__":
    main()
