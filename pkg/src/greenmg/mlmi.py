"""Multi-level multi-integration (MLMI) for u = h**d * G f.

For an asymptotically smooth kernel the dense product is replaced by a
recursion over a grid hierarchy.  At level l (fine mesh h, coarse mesh 2h):

1. restrict the forcing, f~ = R f;
2. compute the coarse product u~ = MLMI_{l+1}(f~), dense at the coarsest level;
3. correct the coarse-coincident rows,
   u_bar[I] = u~[I] + h**d * sum_{|j - 2I| <= m} (G[2I, j] - G~[2I, j]) f[j],
   where G~ interpolates G[2I, 2J] along the column;
4. interpolate u_bar to the fine grid;
5. correct the remaining rows,
   u[i] += h**d * sum_{|j - i| <= m} (G[i, j] - G^[i, j]) f[j],
   where G^ interpolates the rows G[2I, j] of the surrounding coarse nodes.

Windows use the Chebyshev norm on multi-indices and are shifted, not
truncated, at the boundary so every row sees min(2m + 1, n) columns per axis.
With m = 0 no corrections are applied; with windows covering the whole grid
the result equals the dense product exactly.

Kernel samples live in one flat vector laid out in blocks.  For each level
l < k, in order: even-correction entries, odd-correction entries, one
odd-stencil block per odd parity class (the coarse-row samples G[2I, j] that
the odd corrections interpolate from), and an even-stencil block holding any
column-stencil samples G[2I, 2J] that the odd-stencil blocks do not already
contain.  The coarsest-full block (all pairs at level k, row-major) comes
last.  Each block is sorted by (i, j).  A physical point may therefore be
stored in more than one block; each block is a separate sample for counting
and for the adjoint, and the network simply evaluates it once per block.
Even-correction entries whose column is itself coarse-coincident are left
out because their correction is identically zero.
"""

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels
from .errors import InvalidConfig, ShapeMismatch
from .grid import GridHierarchy, build_hierarchy, interpolate, restrict

ROLES = ("coarsest-full", "even-correction", "even-stencil", "odd-correction", "odd-stencil")
COARSEST, EVEN_CORR, EVEN_STENCIL, ODD_CORR, ODD_STENCIL = range(5)


def _to_multi(flat, n, d):
    if d == 1:
        return flat[:, None]
    a, b = np.divmod(flat, n)
    return np.column_stack([a, b])


def _to_flat(multi, n):
    out = multi[..., 0]
    for axis in range(1, multi.shape[-1]):
        out = out * n + multi[..., axis]
    return out


def _windows(rows, n, d, m):
    """Shifted Chebyshev windows: flat column indices, shape (len(rows), w**d)."""
    w = min(2 * m + 1, n)
    lo = np.clip(_to_multi(rows, n, d) - m, 0, n - w)
    off = np.arange(w)
    if d == 1:
        return lo[:, 0:1] + off
    j0 = lo[:, 0, None, None] + off[None, :, None]
    j1 = lo[:, 1, None, None] + off[None, None, :]
    return (j0 * n + j1).reshape(len(rows), w * w)


def _stencil(flat, n, d):
    """Coarse-coincident neighbours of each node with linear weights.

    Returns flat indices and weights of shape (K, 2**d).  Axes where the
    node is already even carry one live slot and one zero-weight duplicate.
    """
    multi = _to_multi(flat, n, d)
    odd = multi % 2
    lo = multi - odd
    hi = multi + odd
    wl = np.where(odd == 1, 0.5, 1.0)
    wh = np.where(odd == 1, 0.5, 0.0)
    if d == 1:
        return np.column_stack([lo[:, 0], hi[:, 0]]), np.column_stack([wl[:, 0], wh[:, 0]])
    idx = np.column_stack([
        lo[:, 0] * n + lo[:, 1], lo[:, 0] * n + hi[:, 1],
        hi[:, 0] * n + lo[:, 1], hi[:, 0] * n + hi[:, 1],
    ])
    wts = np.column_stack([
        wl[:, 0] * wl[:, 1], wl[:, 0] * wh[:, 1],
        wh[:, 0] * wl[:, 1], wh[:, 0] * wh[:, 1],
    ])
    return idx, wts


def _parity_class(flat, n, d):
    multi = _to_multi(flat, n, d) % 2
    return _to_flat(multi, 2)


@dataclass(frozen=True)
class LevelSchedule:
    """Precomputed correction data for one level l < k, in CSR row order."""

    level: int
    n: int
    h: float
    indptr: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    g: np.ndarray
    st: np.ndarray
    sw: np.ndarray
    even_nodes: np.ndarray
    odd_nodes: np.ndarray


@dataclass(frozen=True)
class KernelPointSet:
    """All kernel samples read by one MLMI apply, one row per sample."""

    d: int
    sizes: tuple
    level: np.ndarray
    role: np.ndarray
    row: np.ndarray
    col: np.ndarray
    block: np.ndarray

    def __len__(self):
        return int(self.row.shape[0])

    def index_pairs(self):
        """Target and source multi-indices, each of shape (|S|, d)."""
        i = np.empty((len(self), self.d), dtype=np.int64)
        j = np.empty_like(i)
        for lev, n in enumerate(self.sizes):
            sel = self.level == lev
            i[sel] = _to_multi(self.row[sel], n, self.d)
            j[sel] = _to_multi(self.col[sel], n, self.d)
        return i, j

    def coordinates(self):
        """Physical (x, y) pairs in [0, 1]**(2d), shape (|S|, 2d)."""
        i, j = self.index_pairs()
        h = np.array([1.0 / (n - 1) for n in self.sizes])[self.level][:, None]
        return np.hstack([i * h, j * h])

    def role_counts(self):
        return {name: int(np.count_nonzero(self.role == code)) for code, name in enumerate(ROLES)}

    def write_csv(self, path):
        """Write ``level,i...,j...,role`` rows."""
        i, j = self.index_pairs()
        axes = range(self.d)
        header = ["level"] + [f"i{a}" for a in axes] + [f"j{a}" for a in axes] + ["role"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for e in range(len(self)):
                out.writerow([int(self.level[e]), *i[e].tolist(), *j[e].tolist(), ROLES[self.role[e]]])


@dataclass(frozen=True)
class MlmiPlan:
    hierarchy: GridHierarchy
    m: int
    point_set: KernelPointSet
    levels: tuple
    coarse_start: int
    size: int = field(default=0)

    @property
    def k(self):
        return self.hierarchy.k

    @property
    def d(self):
        return self.hierarchy.d

    @property
    def n_fine(self):
        return self.hierarchy.n_fine


class _Blocks:
    """Accumulates sample blocks and hands out their global offsets."""

    def __init__(self):
        self.parts = []
        self.total = 0

    def add(self, level, role, row, col):
        start = self.total
        self.parts.append((level, role, row, col))
        self.total += row.shape[0]
        return start


def _build_level(blocks, level, n, d, m):
    nn = n ** d
    nodes = np.arange(nn, dtype=np.int64)
    parity = _parity_class(nodes, n, d)
    even_nodes = nodes[parity == 0]
    odd_nodes = nodes[parity != 0]
    empty = np.zeros(0, dtype=np.int64)
    width = 2 ** d

    if m == 0:
        return LevelSchedule(level, n, 1.0 / (n - 1), np.zeros(nn + 1, dtype=np.int64), empty, empty,
                             empty, np.zeros((0, width), dtype=np.int64), np.zeros((0, width)),
                             even_nodes, odd_nodes)

    win = _windows(even_nodes, n, d, m)
    e_rows = np.repeat(even_nodes, win.shape[1])
    e_cols = win.ravel()
    keep = _parity_class(e_cols, n, d) != 0
    e_rows, e_cols = e_rows[keep], e_cols[keep]

    win = _windows(odd_nodes, n, d, m)
    o_rows = np.repeat(odd_nodes, win.shape[1])
    o_cols = win.ravel()

    e_start = blocks.add(level, EVEN_CORR, e_rows, e_cols)
    o_start = blocks.add(level, ODD_CORR, o_rows, o_cols)

    # odd rows interpolate from the rows of their coarse-coincident corners
    corner, o_w = _stencil(o_rows, n, d)
    o_keys = corner * nn + o_cols[:, None]
    o_st = np.empty_like(o_keys)
    o_class = _parity_class(o_rows, n, d)
    pool_keys, pool_index = [], []
    for cls in range(1, 2 ** d):
        sel = o_class == cls
        if not sel.any():
            continue
        keys = np.unique(o_keys[sel])
        start = blocks.add(level, ODD_STENCIL, keys // nn, keys % nn)
        o_st[sel] = start + np.searchsorted(keys, o_keys[sel])
        pool_keys.append(keys)
        pool_index.append(start + np.arange(keys.shape[0]))

    # even rows interpolate along the column; reuse odd-stencil samples
    corner, e_w = _stencil(e_cols, n, d)
    e_keys = e_rows[:, None] * nn + corner
    e_st = np.full(e_keys.shape, -1, dtype=np.int64)
    if pool_keys:
        keys = np.concatenate(pool_keys)
        index = np.concatenate(pool_index)
        keys, first = np.unique(keys, return_index=True)
        pos = np.clip(np.searchsorted(keys, e_keys), 0, keys.shape[0] - 1)
        hit = keys[pos] == e_keys
        e_st[hit] = index[first[pos[hit]]]
    missing = e_st < 0
    if missing.any():
        keys = np.unique(e_keys[missing])
        start = blocks.add(level, EVEN_STENCIL, keys // nn, keys % nn)
        e_st[missing] = start + np.searchsorted(keys, e_keys[missing])

    rows = np.concatenate([e_rows, o_rows])
    cols = np.concatenate([e_cols, o_cols])
    g = np.concatenate([e_start + np.arange(e_rows.shape[0]), o_start + np.arange(o_rows.shape[0])])
    st = np.concatenate([e_st, o_st])
    sw = np.concatenate([e_w, o_w])
    order = np.argsort(rows * nn + cols, kind="stable")
    rows, cols, g, st, sw = rows[order], cols[order], g[order], st[order], sw[order]
    indptr = np.zeros(nn + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=nn), out=indptr[1:])
    return LevelSchedule(level, n, 1.0 / (n - 1), indptr, rows, cols, g,
                         np.ascontiguousarray(st), np.ascontiguousarray(sw), even_nodes, odd_nodes)


def build_plan(hierarchy, m):
    """Enumerate the sample blocks and correction schedule for (hierarchy, m)."""
    if m < 0:
        raise InvalidConfig(f"correction range m must be >= 0, got {m}")
    d = hierarchy.d
    blocks = _Blocks()
    levels = tuple(_build_level(blocks, lev, hierarchy.n(lev), d, int(m)) for lev in range(hierarchy.k))
    nk = hierarchy.num_nodes(hierarchy.k)
    full = np.arange(nk, dtype=np.int64)
    coarse_start = blocks.add(hierarchy.k, COARSEST, np.repeat(full, nk), np.tile(full, nk))
    level = np.concatenate([np.full(p[2].shape[0], p[0], dtype=np.int16) for p in blocks.parts])
    role = np.concatenate([np.full(p[2].shape[0], p[1], dtype=np.int8) for p in blocks.parts])
    row = np.concatenate([p[2] for p in blocks.parts])
    col = np.concatenate([p[3] for p in blocks.parts])
    block = np.concatenate([np.full(p[2].shape[0], b, dtype=np.int32) for b, p in enumerate(blocks.parts)])
    points = KernelPointSet(d, tuple(hierarchy.sizes), level, role, row, col, block)
    return MlmiPlan(hierarchy, int(m), points, levels, coarse_start, blocks.total)


def make_plan(n_fine, d, k, m):
    return build_plan(build_hierarchy(n_fine, d, k), m)


def enumerate_points(hierarchy, m):
    """Kernel samples read by the forward pass."""
    return build_plan(hierarchy, m).point_set


def point_fraction(point_set, hierarchy):
    """|S| / (n_fine**d)**2."""
    return float(Fraction(len(point_set), hierarchy.num_nodes(0) ** 2))


def _batch(plan, f, name):
    hier = plan.hierarchy
    shape = hier.shape(0)
    f = np.asarray(f, dtype=float)
    if f.shape[-hier.d:] != shape:
        raise ShapeMismatch(f"{name} trailing shape {f.shape} does not match grid {shape}")
    lead = f.shape[:-hier.d]
    return f.reshape(-1, *shape), lead


def _check_samples(plan, samples):
    s = np.ascontiguousarray(samples, dtype=float)
    if s.shape != (plan.size,):
        raise ShapeMismatch(f"expected {plan.size} kernel samples, got shape {s.shape}")
    return s


def _restriction_chain(plan, f):
    d = plan.d
    chain = [f]
    for _ in range(plan.k):
        chain.append(restrict(chain[-1], d))
    return [c.reshape(c.shape[0], -1) for c in chain]


def mlmi_apply(plan, samples, f):
    """Approximate h**d * G f from the plan's kernel samples.

    ``f`` has the fine grid as its trailing axes, optionally with leading
    batch axes; the result has the same shape.
    """
    s = _check_samples(plan, samples)
    fb, lead = _batch(plan, f, "f")
    hier, d = plan.hierarchy, plan.d
    chain = _restriction_chain(plan, fb)
    nk = hier.num_nodes(plan.k)
    coarse = s[plan.coarse_start:plan.coarse_start + nk * nk].reshape(nk, nk)
    u = hier.h(plan.k) ** d * (chain[-1] @ coarse.T)
    for sched in reversed(plan.levels):
        shape = hier.shape(sched.level)
        if sched.rows.shape[0]:
            vals = _kernels.correction_values(s, sched.g, sched.st, sched.sw)
            ft = np.ascontiguousarray(chain[sched.level].T)
            corr = _kernels.csr_matvec(sched.indptr, sched.cols, vals, ft, sched.h ** d).T
            u = u + corr[:, sched.even_nodes]
        u = interpolate(u.reshape(-1, *hier.shape(sched.level + 1)), d).reshape(u.shape[0], -1)
        if sched.rows.shape[0]:
            u[:, sched.odd_nodes] += corr[:, sched.odd_nodes]
        del shape
    return u.reshape(*lead, *hier.shape(0))


def mlmi_adjoint(plan, f, u_cotangent):
    """Gradient of <mlmi_apply(plan, s, f), w> with respect to the samples s."""
    fb, _ = _batch(plan, f, "f")
    wb, _ = _batch(plan, u_cotangent, "u_cotangent")
    if wb.shape != fb.shape:
        raise ShapeMismatch(f"f batch {fb.shape} and cotangent batch {wb.shape} differ")
    hier, d = plan.hierarchy, plan.d
    chain = _restriction_chain(plan, fb)
    grad = np.zeros(plan.size)
    w = wb.reshape(wb.shape[0], -1)
    for sched in plan.levels:
        coarse_shape = hier.shape(sched.level + 1)
        wbar = (2.0 ** d) * restrict(w.reshape(-1, *hier.shape(sched.level)), d).reshape(w.shape[0], -1)
        if sched.rows.shape[0]:
            wc = w.copy()
            wc[:, sched.even_nodes] = wbar
            q = _kernels.correction_adjoint(sched.rows, sched.cols, np.ascontiguousarray(wc.T),
                                            np.ascontiguousarray(chain[sched.level].T), sched.h ** d)
            _kernels.scatter_corrections(grad, sched.g, sched.st, sched.sw, q)
        w = wbar
        del coarse_shape
    nk = hier.num_nodes(plan.k)
    grad[plan.coarse_start:plan.coarse_start + nk * nk] += hier.h(plan.k) ** d * (w.T @ chain[-1]).ravel()
    return grad


def dense_apply(kernel_matrix, f, h, d):
    """Exact h**d * G f; ``f`` may carry leading batch axes."""
    G = np.asarray(kernel_matrix, dtype=float)
    f = np.asarray(f, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ShapeMismatch(f"kernel matrix must be square, got {G.shape}")
    nn = G.shape[0]
    n = round(nn ** (1.0 / d))
    if n ** d != nn or f.shape[f.ndim - d:] != (n,) * d:
        raise ShapeMismatch(f"field shape {f.shape} does not conform to kernel {G.shape}")
    lead = f.shape[:f.ndim - d]
    fb = f.reshape(-1, nn)
    return (h ** d * (fb @ G.T)).reshape(*lead, *(n,) * d)


def dense_adjoint(f, u_cotangent, h, d):
    """Gradient of <dense_apply(G, f), w> with respect to G."""
    nn_f = np.asarray(f, dtype=float)
    w = np.asarray(u_cotangent, dtype=float)
    if nn_f.shape != w.shape:
        raise ShapeMismatch(f"f {nn_f.shape} and cotangent {w.shape} differ")
    lead = nn_f.ndim - d
    nn = int(np.prod(nn_f.shape[lead:]))
    return h ** d * (w.reshape(-1, nn).T @ nn_f.reshape(-1, nn))


def samples_from_function(plan, kernel):
    """Evaluate ``kernel(x, y)`` (vectorized over rows of coordinates) at the plan's points."""
    xy = plan.point_set.coordinates()
    d = plan.d
    return np.asarray(kernel(xy[:, :d], xy[:, d:]), dtype=float)


def samples_from_matrices(plan, matrices):
    """Gather samples from per-level dense kernel matrices (level -> array)."""
    ps = plan.point_set
    out = np.empty(len(ps))
    for lev in range(plan.k + 1):
        sel = ps.level == lev
        mat = np.asarray(matrices[lev])
        out[sel] = mat[ps.row[sel], ps.col[sel]]
    return out


def samples_from_fine_matrix(plan, kernel_matrix):
    """Gather samples by injection from the fine-level dense kernel matrix."""
    hier, d = plan.hierarchy, plan.d
    G = np.asarray(kernel_matrix, dtype=float)
    fine = G.reshape(hier.shape(0) * 2)
    mats = {}
    for lev in range(plan.k + 1):
        step = 2 ** lev
        sl = (slice(None, None, step),) * (2 * d)
        nn = hier.num_nodes(lev)
        mats[lev] = fine[sl].reshape(nn, nn)
    return samples_from_matrices(plan, mats)
