"""Hot loops, in a numba-compiled and a pure-numpy flavour.

``numba_impl`` and ``numpy_impl`` expose the same functions; the module-level
names are bound to whichever ``greenmg._backend.BACKEND`` selects.

Correction entries are stored in CSR order (sorted by target row).  Entry e
reads the sample ``s[g[e]]`` minus the interpolated value
``sum_b w[e, b] * s[st[e, b]]`` and contributes it times ``f[col[e]]`` to the
target row.
"""

from types import SimpleNamespace

import numpy as np
import scipy.sparse as sp

from ._backend import BACKEND, HAVE_NUMBA, njit

FLOOR = 1e-12


# ---------------------------------------------------------------- numpy side

def _np_correction_values(s, g, st, sw):
    return s[g] - np.einsum("ij,ij->i", sw, s[st])


def _np_csr_matvec(indptr, cols, vals, ft, scale):
    """out[r, :] = scale * sum_e vals[e] * ft[cols[e], :] over row r's entries."""
    n = indptr.shape[0] - 1
    mat = sp.csr_matrix((vals, cols, indptr), shape=(n, ft.shape[0]))
    return scale * (mat @ ft)


def _np_correction_adjoint(rows, cols, wt, ft, scale, chunk=1 << 16):
    out = np.empty(rows.shape[0])
    for start in range(0, rows.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = np.einsum("ij,ij->i", wt[rows[sl]], ft[cols[sl]])
    return scale * out


def _np_scatter_corrections(out, g, st, sw, q):
    size = out.shape[0]
    out += np.bincount(g, weights=q, minlength=size)
    out -= np.bincount(st.ravel(), weights=(sw * q[:, None]).ravel(), minlength=size)
    return out


def _np_rational_forward(z, bias, p, q, out):
    z += bias
    num = p[0] + z * (p[1] + z * (p[2] + z * p[3]))
    den = np.maximum(np.abs(q[0] + z * (q[1] + z * q[2])), FLOOR)
    np.divide(num, den, out=out)
    return out


def _np_rational_backward(z, p, q, gy, gz_out):
    """Write dL/dz into ``gz_out``; return (dL/dp, dL/dq, column sums of dL/dz)."""
    num = p[0] + z * (p[1] + z * (p[2] + z * p[3]))
    qraw = q[0] + z * (q[1] + z * q[2])
    aq = np.abs(qraw)
    live = aq > FLOOR
    den = np.where(live, aq, FLOOR)
    sgn = np.where(live, np.sign(qraw), 0.0)
    inv = 1.0 / den
    dnum = p[1] + z * (2.0 * p[2] + z * 3.0 * p[3])
    dqraw = q[1] + 2.0 * q[2] * z
    r = gy * inv
    t = -gy * num * inv * inv * sgn
    np.add(r * dnum, t * dqraw, out=gz_out)
    z2 = z * z
    gp = np.array([r.sum(), (r * z).sum(), (r * z2).sum(), (r * z2 * z).sum()])
    gq = np.array([t.sum(), (t * z).sum(), (t * z2).sum()])
    return gp, gq, gz_out.sum(axis=0)


numpy_impl = SimpleNamespace(
    correction_values=_np_correction_values,
    csr_matvec=_np_csr_matvec,
    correction_adjoint=_np_correction_adjoint,
    scatter_corrections=_np_scatter_corrections,
    rational_forward=_np_rational_forward,
    rational_backward=_np_rational_backward,
)


# ---------------------------------------------------------------- numba side

@njit(cache=True)
def _nb_correction_values(s, g, st, sw):
    out = np.empty(g.shape[0])
    for e in range(g.shape[0]):
        acc = s[g[e]]
        for b in range(st.shape[1]):
            acc -= sw[e, b] * s[st[e, b]]
        out[e] = acc
    return out


@njit(cache=True)
def _nb_csr_matvec(indptr, cols, vals, ft, scale):
    n = indptr.shape[0] - 1
    nb = ft.shape[1]
    out = np.zeros((n, nb))
    for r in range(n):
        for e in range(indptr[r], indptr[r + 1]):
            c = cols[e]
            v = scale * vals[e]
            for b in range(nb):
                out[r, b] += v * ft[c, b]
    return out


@njit(cache=True)
def _nb_correction_adjoint(rows, cols, wt, ft, scale):
    out = np.empty(rows.shape[0])
    nb = wt.shape[1]
    for e in range(rows.shape[0]):
        r = rows[e]
        c = cols[e]
        acc = 0.0
        for b in range(nb):
            acc += wt[r, b] * ft[c, b]
        out[e] = scale * acc
    return out


@njit(cache=True)
def _nb_scatter_corrections(out, g, st, sw, q):
    for e in range(g.shape[0]):
        out[g[e]] += q[e]
        for b in range(st.shape[1]):
            out[st[e, b]] -= sw[e, b] * q[e]
    return out


@njit(cache=True)
def _nb_rational_forward(z, bias, p, q, out):
    rows, cols = z.shape
    for i in range(rows):
        for j in range(cols):
            x = z[i, j] + bias[j]
            z[i, j] = x
            num = p[0] + x * (p[1] + x * (p[2] + x * p[3]))
            den = abs(q[0] + x * (q[1] + x * q[2]))
            if den < FLOOR:
                den = FLOOR
            out[i, j] = num / den
    return out


@njit(cache=True)
def _nb_rational_backward(z, p, q, gy, gz):
    rows, cols = z.shape
    # per-column partial sums keep the inner loop free of a serial reduction
    acc = np.zeros((8, cols))
    for i in range(rows):
        for j in range(cols):
            x = z[i, j]
            num = p[0] + x * (p[1] + x * (p[2] + x * p[3]))
            qraw = q[0] + x * (q[1] + x * q[2])
            aq = abs(qraw)
            live = aq > FLOOR
            inv = 1.0 / aq if live else 1.0 / FLOOR
            sgn = (1.0 if qraw > 0 else -1.0) if live else 0.0
            r = gy[i, j] * inv
            t = -gy[i, j] * num * inv * inv * sgn
            gzij = r * (p[1] + x * (2.0 * p[2] + x * 3.0 * p[3])) + t * (q[1] + 2.0 * q[2] * x)
            gz[i, j] = gzij
            acc[7, j] += gzij
            x2 = x * x
            acc[0, j] += r
            acc[1, j] += r * x
            acc[2, j] += r * x2
            acc[3, j] += r * x2 * x
            acc[4, j] += t
            acc[5, j] += t * x
            acc[6, j] += t * x2
    tot = np.zeros(7)
    for k in range(7):
        for j in range(cols):
            tot[k] += acc[k, j]
    return tot[:4].copy(), tot[4:].copy(), acc[7].copy()


if HAVE_NUMBA:
    numba_impl = SimpleNamespace(
        correction_values=_nb_correction_values,
        csr_matvec=_nb_csr_matvec,
        correction_adjoint=_nb_correction_adjoint,
        scatter_corrections=_nb_scatter_corrections,
        rational_forward=_nb_rational_forward,
        rational_backward=_nb_rational_backward,
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if BACKEND == "numba" else numpy_impl

correction_values = active.correction_values
csr_matvec = active.csr_matvec
correction_adjoint = active.correction_adjoint
scatter_corrections = active.scatter_corrections
rational_forward = active.rational_forward
rational_backward = active.rational_backward
