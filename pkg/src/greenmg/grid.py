"""Nested equispaced grids on [0, 1]^d and their transfer operators.

Grids are endpoint inclusive: level l has n_l = 2**(L - l) + 1 nodes per axis
at t_i = i * h_l with h_l = 1 / (n_l - 1).  Coarse node J coincides with fine
node 2J, so interpolation is an injection on even nodes plus midpoint
averaging on odd ones.  Restriction is the exact scaled transpose
R = 2**-d * I^T, boundaries included, which gives the quadrature duality

    h_l**d * <I v, f> == h_{l+1}**d * <v, R f>.

Fields are plain numpy arrays whose trailing ``d`` axes are the grid axes in
row-major order; any leading axes are treated as a batch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import LevelMismatch, NonDyadicGrid, ShapeMismatch, UnsupportedDimension


def _check_dim(d):
    if d not in (1, 2):
        raise UnsupportedDimension(f"dimension must be 1 or 2, got {d}")


def dyadic_exponent(n):
    """Return L with n == 2**L + 1, or raise NonDyadicGrid."""
    n = int(n)
    if n < 2 or (n - 1) & (n - 2):
        raise NonDyadicGrid(f"grid size {n} is not 2**L + 1")
    return (n - 1).bit_length() - 1


@dataclass(frozen=True)
class GridHierarchy:
    """Levels 0..k of nested grids; level 0 is the finest."""

    d: int
    n_fine: int
    k: int

    def __post_init__(self):
        _check_dim(self.d)
        L = dyadic_exponent(self.n_fine)
        if self.k < 0 or self.k > L:
            raise NonDyadicGrid(f"grid size {self.n_fine} supports at most {L} coarsenings, got k={self.k}")

    @property
    def sizes(self):
        return [self.n(level) for level in range(self.k + 1)]

    @property
    def spacings(self):
        return [self.h(level) for level in range(self.k + 1)]

    def _check_level(self, level):
        if not 0 <= level <= self.k:
            raise LevelMismatch(f"level {level} outside 0..{self.k}")

    def n(self, level):
        self._check_level(level)
        return ((self.n_fine - 1) >> level) + 1

    def h(self, level):
        return 1.0 / (self.n(level) - 1)

    def num_nodes(self, level):
        return self.n(level) ** self.d

    def shape(self, level):
        return (self.n(level),) * self.d

    def coords(self, level):
        """Node coordinates, shape (n,) in 1D and (n*n, 2) in 2D (row-major)."""
        t = np.arange(self.n(level)) * self.h(level)
        if self.d == 1:
            return t
        a, b = np.meshgrid(t, t, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()])

    def interpolate(self, values, level):
        """Interpolate a field from ``level`` (coarse) to ``level - 1``."""
        self._check_level(level)
        if level == 0:
            raise LevelMismatch("cannot interpolate below level 0")
        _check_field(values, self.shape(level))
        return interpolate(values, self.d)

    def restrict(self, values, level):
        """Restrict a field from ``level`` (fine) to ``level + 1``."""
        self._check_level(level)
        if level == self.k:
            raise LevelMismatch(f"cannot restrict past the coarsest level {self.k}")
        _check_field(values, self.shape(level))
        return restrict(values, self.d)


def build_hierarchy(n_fine, d, k):
    """Construct and validate a ``GridHierarchy``."""
    return GridHierarchy(d=int(d), n_fine=int(n_fine), k=int(k))


def _check_field(values, shape):
    if np.shape(values)[-len(shape):] != shape:
        raise ShapeMismatch(f"field trailing shape {np.shape(values)} does not match grid {shape}")


def _interp_last(c):
    n = c.shape[-1]
    out = np.empty(c.shape[:-1] + (2 * n - 1,))
    out[..., ::2] = c
    out[..., 1::2] = 0.5 * (c[..., :-1] + c[..., 1:])
    return out


def _restrict_last(f):
    odd = 0.25 * f[..., 1::2]
    out = 0.5 * f[..., ::2]
    out[..., :-1] += odd
    out[..., 1:] += odd
    return out


def _along(func, values, axis):
    return np.moveaxis(func(np.moveaxis(values, axis, -1)), -1, axis)


def interpolate(values, d):
    """Linear (d=1) or bilinear (d=2) interpolation on the trailing axes."""
    _check_dim(d)
    out = np.asarray(values, dtype=float)
    for axis in range(-d, 0):
        if out.shape[axis] < 2:
            raise ShapeMismatch("need at least two nodes per axis")
        out = _along(_interp_last, out, axis)
    return out


def restrict(values, d):
    """Full-weighting restriction 2**-d I^T on the trailing axes."""
    _check_dim(d)
    out = np.asarray(values, dtype=float)
    for axis in range(-d, 0):
        dyadic_exponent(out.shape[axis])
        if out.shape[axis] < 3:
            raise LevelMismatch("cannot restrict a two-node axis")
        out = _along(_restrict_last, out, axis)
    return out


def interpolation_matrix(n_coarse, d=1):
    """Explicit dense interpolation matrix, for testing and small problems."""
    eye = np.eye(n_coarse ** d).reshape((n_coarse ** d,) + (n_coarse,) * d)
    return interpolate(eye, d).reshape(n_coarse ** d, -1).T
