"""Benchmark problems: analytic kernels, GP forcings, reference solvers, datasets.

All problems are posed on the unit grid t_i = i / (n - 1) (per axis).
Problems defined on another interval are mapped affinely onto [0, 1]; the
forcing length scale is measured in the mapped coordinates and learned
kernels live there too.  Reference solutions use second-order centred finite
differences with homogeneous Dirichlet conditions, except ``log1d`` which is
the exact quadrature of the cell-averaged log kernel.
"""

import functools
import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CovarianceNotPD, InvalidConfig, InvalidCount, ShapeMismatch, SingularInput, SolveFailure
from .grid import build_hierarchy, dyadic_exponent
from .io import read_container, write_container
from .mlmi import dense_apply

PROBLEMS = ("log1d", "poisson1d", "schrodinger1d", "airy1d", "poisson2d", "darcy2d")
EXACT_KERNEL = ("log1d", "poisson1d")
JITTER = 1e-10
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    n: int
    domain: tuple = (0.0, 1.0)
    length_scale: float = 0.03
    h_eq: float = 0.1
    theta: float = 10.0
    coeff_seed: int = 0

    def __post_init__(self):
        if self.name not in PROBLEMS:
            raise InvalidConfig(f"unknown problem {self.name!r}; choose from {', '.join(PROBLEMS)}")
        dyadic_exponent(self.n)
        if not self.length_scale > 0:
            raise InvalidConfig("length scale must be positive")

    @property
    def d(self):
        return 2 if self.name.endswith("2d") else 1

    @property
    def h(self):
        return 1.0 / (self.n - 1)

    @property
    def shape(self):
        return (self.n,) * self.d

    def to_dict(self):
        out = asdict(self)
        out["domain"] = list(self.domain)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["domain"] = tuple(data.get("domain", (0.0, 1.0)))
        return cls(**data)


_DOMAINS = {"log1d": (-1.0, 1.0), "schrodinger1d": (-3.0, 3.0)}


def problem_spec(name, n, **overrides):
    """Spec with the benchmark defaults for ``name`` on an n-point grid."""
    base = dict(name=name, n=int(n), domain=_DOMAINS.get(name, (0.0, 1.0)),
                length_scale=0.2 if name.endswith("2d") else 0.03)
    base.update(overrides)
    return ProblemSpec(**base)


# ------------------------------------------------------------ analytic kernels

def green_poisson_1d(x, y):
    """Green's function of -u'' = f on [0, 1] with u(0) = u(1) = 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.where(x <= y, x * (1.0 - y), y * (1.0 - x))


def _xlogx_minus_x(t):
    a = np.abs(t)
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, t * np.log(safe), 0.0) - t


def log_kernel_discrete(x, y, h):
    """Cell average (1/h) * integral of ln|x - t| over t in [y - h/2, y + h/2]."""
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    d = np.abs(d)
    return (_xlogx_minus_x(d + 0.5 * h) - _xlogx_minus_x(d - 0.5 * h)) / h


def log1d_kernel(x, y, n):
    """Kernel of the log problem in unit coordinates on an n-point grid.

    The physical interval [-1, 1] has mesh 2h, so h * K = 2h * G_{2h} gives
    K = 2 * G_{2h} evaluated at the mapped points.
    """
    h = 1.0 / (n - 1)
    return 2.0 * log_kernel_discrete(2.0 * np.asarray(x) - 1.0, 2.0 * np.asarray(y) - 1.0, 2.0 * h)


def green_disk_poisson_2d(x, y):
    """Green's function of the Laplacian on the unit disk (points as (..., 2))."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    num = (x[..., 0] - y[..., 0]) ** 2 + (x[..., 1] - y[..., 1]) ** 2
    if np.any(num == 0.0):
        raise SingularInput("disk Green's function evaluated at x == y")
    den = (x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]) ** 2 + (x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] - 1.0) ** 2
    return np.log(num / den) / (4.0 * np.pi)


def exact_kernel_matrix(spec):
    """Dense kernel on the unit grid for problems that have one, else None."""
    if spec.name not in EXACT_KERNEL:
        return None
    t = np.arange(spec.n) * spec.h
    x, y = np.meshgrid(t, t, indexing="ij")
    if spec.name == "poisson1d":
        return green_poisson_1d(x, y)
    return log1d_kernel(x, y, spec.n)


def exact_kernel_function(spec):
    """Vectorized ``kernel(x, y)`` on unit coordinates (rows of shape (., d))."""
    if spec.name == "poisson1d":
        return lambda x, y: green_poisson_1d(x[:, 0], y[:, 0])
    if spec.name == "log1d":
        return lambda x, y: log1d_kernel(x[:, 0], y[:, 0], spec.n)
    return None


# ----------------------------------------------------------------- GP forcing

@functools.lru_cache(maxsize=8)
def _gp_factor(n, d, length_scale):
    hier = build_hierarchy(n, d, 0)
    pts = hier.coords(0).reshape(n ** d, d)
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    cov = np.exp(-sq / (2.0 * length_scale ** 2))
    cov[np.diag_indices_from(cov)] += JITTER
    try:
        factor = scipy.linalg.cholesky(cov, lower=True, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise CovarianceNotPD(f"SE covariance (n={n}, d={d}, l={length_scale}) not positive definite") from exc
    factor.setflags(write=False)
    return factor


def _seed_key(seed):
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return int(seed)


def sample_gp_batch(n, d, length_scale, seeds):
    """One mean-zero SE-GP draw per seed, shape (len(seeds), n, ..., n)."""
    factor = _gp_factor(int(n), int(d), float(length_scale))
    z = np.stack([np.random.default_rng(_seed_key(s)).standard_normal(n ** d) for s in seeds], axis=1)
    return (factor @ z).T.reshape((len(seeds),) + (n,) * d)


def sample_gp_forcing(n, d, length_scale, seed):
    """A single GP draw on the n-point unit grid in dimension d."""
    return sample_gp_batch(n, d, length_scale, [seed])[0]


def darcy_coefficient(n, seed, log_field=None):
    """a = exp(g) with g an SE-GP draw of length scale 0.2 (or a given ``log_field``)."""
    g = sample_gp_forcing(n, 2, 0.2, seed) if log_field is None else np.asarray(log_field, dtype=float)
    if g.shape != (n, n):
        raise ShapeMismatch(f"log coefficient field must be {(n, n)}, got {g.shape}")
    return np.exp(g)


# --------------------------------------------------------------- FD operators

def _second_difference(m):
    return sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], format="csr")


def _operator_1d(spec):
    lo, hi = spec.domain
    n = spec.n
    hp = (hi - lo) / (n - 1)
    x = lo + hp * np.arange(1, n - 1)
    lap = _second_difference(n - 2) / hp ** 2
    if spec.name == "poisson1d":
        return lap
    if spec.name == "airy1d":
        return lap + sp.diags(spec.theta ** 2 * x)
    if spec.name == "schrodinger1d":
        v = x ** 2 + 1.5 * np.exp(-((4.0 * x) ** 4))
        return spec.h_eq ** 2 * lap + sp.diags(v)
    raise InvalidConfig(f"no 1D finite-difference operator for {spec.name}")


def _operator_2d(n, a):
    """Interior five-point operator for -div(a grad u) with harmonic-mean faces."""
    h = 1.0 / (n - 1)
    ax = 2.0 * a[1:, :] * a[:-1, :] / (a[1:, :] + a[:-1, :])  # face between (i, j) and (i+1, j)
    ay = 2.0 * a[:, 1:] * a[:, :-1] / (a[:, 1:] + a[:, :-1])  # face between (i, j) and (i, j+1)
    m = n - 2
    idx = np.arange(m * m).reshape(m, m)
    ii, jj = np.meshgrid(np.arange(1, n - 1), np.arange(1, n - 1), indexing="ij")
    diag = ax[ii - 1, jj] + ax[ii, jj] + ay[ii, jj - 1] + ay[ii, jj]
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [diag.ravel()]
    for di, dj, coef in ((1, 0, ax[ii, jj]), (-1, 0, ax[ii - 1, jj]), (0, 1, ay[ii, jj]), (0, -1, ay[ii, jj - 1])):
        pi, pj = ii + di, jj + dj
        ok = (pi >= 1) & (pi <= n - 2) & (pj >= 1) & (pj <= n - 2)
        rows.append(idx[ii[ok] - 1, jj[ok] - 1])
        cols.append(idx[pi[ok] - 1, pj[ok] - 1])
        vals.append(-coef[ok])
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m))
    return mat.tocsc() / h ** 2


def fd_operator(spec, coefficient=None):
    """Sparse interior operator of the problem's PDE."""
    if spec.d == 1:
        return _operator_1d(spec)
    if spec.name == "poisson2d":
        a = np.ones(spec.shape)
    elif coefficient is not None:
        a = np.asarray(coefficient, dtype=float)
    else:
        a = darcy_coefficient(spec.n, spec.coeff_seed)
    return _operator_2d(spec.n, a)


def solve_reference(spec, f, coefficient=None):
    """Reference solution(s) for forcing(s) ``f`` (grid as the trailing axes)."""
    f = np.asarray(f, dtype=float)
    if f.shape[f.ndim - spec.d:] != spec.shape:
        raise ShapeMismatch(f"forcing shape {f.shape} does not match grid {spec.shape}")
    lead = f.shape[:f.ndim - spec.d]
    fb = f.reshape((-1,) + spec.shape)
    if spec.name == "log1d":
        return dense_apply(exact_kernel_matrix(spec), fb, spec.h, 1).reshape(f.shape)
    inner = (slice(1, -1),) * spec.d
    rhs = fb[(slice(None),) + inner].reshape(fb.shape[0], -1).T
    op = sp.csc_matrix(fd_operator(spec, coefficient))
    try:
        sol = spla.splu(op).solve(np.ascontiguousarray(rhs))
    except RuntimeError as exc:
        raise SolveFailure(f"sparse factorization failed for {spec.name}: {exc}") from exc
    res = np.linalg.norm(op @ sol - rhs, axis=0)
    scale = np.maximum(np.linalg.norm(rhs, axis=0), np.finfo(float).tiny)
    if not np.all(np.isfinite(sol)) or np.any(res > RESIDUAL_TOL * scale):
        raise SolveFailure(f"{spec.name}: relative residual {np.max(res / scale):.3e} above {RESIDUAL_TOL}")
    out = np.zeros_like(fb)
    out[(slice(None),) + inner] = sol.T.reshape((fb.shape[0],) + (spec.n - 2,) * spec.d)
    return out.reshape(f.shape)


# ------------------------------------------------------------------- datasets

@dataclass
class Dataset:
    spec: ProblemSpec
    forcings: np.ndarray
    solutions: np.ndarray
    seed: int
    kernel: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.forcings.shape != self.solutions.shape or self.forcings.shape[1:] != self.spec.shape:
            raise ShapeMismatch(f"forcings {self.forcings.shape} / solutions {self.solutions.shape} "
                                f"do not match grid {self.spec.shape}")

    def __len__(self):
        return self.forcings.shape[0]

    def checksum(self):
        digest = hashlib.sha256()
        for arr in (self.forcings, self.solutions):
            digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def subset(self, index):
        return replace(self, forcings=self.forcings[index], solutions=self.solutions[index])

    def save(self, path):
        header = {"kind": "dataset", "problem": self.spec.to_dict(), "N": len(self),
                  "grid": {"n": self.spec.n, "d": self.spec.d}, "seed": self.seed,
                  "has_kernel": self.kernel is not None}
        blocks = {"forcings": self.forcings, "solutions": self.solutions}
        if self.kernel is not None:
            blocks["kernel"] = self.kernel
        write_container(path, header, blocks)

    @classmethod
    def load(cls, path):
        header, blocks = read_container(path)
        if header.get("kind") != "dataset":
            raise OSError(f"{path}: not a dataset file")
        return cls(ProblemSpec.from_dict(header["problem"]), blocks["forcings"], blocks["solutions"],
                   header["seed"], blocks.get("kernel"))


def generate_dataset(spec, N, seed):
    """N forcings (sample k seeded by ``(seed, k)``) and their reference solutions."""
    if int(N) < 1:
        raise InvalidCount(f"dataset size must be >= 1, got {N}")
    forcings = sample_gp_batch(spec.n, spec.d, spec.length_scale, [(seed, k) for k in range(int(N))])
    solutions = solve_reference(spec, forcings)
    return Dataset(spec, forcings, solutions, int(seed), exact_kernel_matrix(spec))
