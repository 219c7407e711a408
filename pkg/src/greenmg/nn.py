"""Kernel network: a 4x50 MLP with trainable rational activations.

The network maps a coordinate pair (x, y) in [0, 1]**(2d) to one output (GL)
or two outputs (AugNN).  AugNN outputs are assembled piecewise across the
hyperplane s = sum(x - y) = 0:

    D1 (s < 0)          -> G1
    D2 (s > 0)          -> G2
    D3 (x == y)         -> G2
    D4 (s == 0, x != y) -> (G1 + G2) / 2

Gradients are written out by hand.  Parameters are kept in an ordered dict
``W1, b1, P1, Q1, ..., W4, b4, P4, Q4, W5, b5``; that order is also the
checkpoint payload order.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import _kernels
from .errors import ArchitectureMismatch, InvalidConfig, NumericalBlowup, ShapeMismatch
from .io import read_container, write_container

HIDDEN = (50, 50, 50, 50)
RATIONAL_P = (0.0218, 0.5, 1.5957, 1.1915)
RATIONAL_Q = (1.0, 0.0, 2.383)
FLOOR = _kernels.FLOOR


class SubdomainTag(IntEnum):
    D1 = 1
    D2 = 2
    D3 = 3
    D4 = 4


# ------------------------------------------------------------------ rational

def rational_activation(x, p=RATIONAL_P, q=RATIONAL_Q):
    """Evaluate P(x) / |Q(x)| elementwise with all first derivatives.

    Returns ``(value, d/dx, d/dp, d/dq)``; the coefficient derivatives carry
    a trailing axis of length 4 and 3 respectively.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    num = p[0] + x * (p[1] + x * (p[2] + x * p[3]))
    qraw = q[0] + x * (q[1] + x * q[2])
    aq = np.abs(qraw)
    live = aq > FLOOR
    den = np.where(live, aq, FLOOR)
    sgn = np.where(live, np.sign(qraw), 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        value = num / den
        powers = np.stack([np.ones_like(x), x, x * x, x * x * x], axis=-1)
        dp = powers / den[..., None]
        dq = -(num * sgn / den ** 2)[..., None] * powers[..., :3]
        dx = (p[1] + x * (2 * p[2] + 3 * p[3] * x)) / den + dq[..., 0] * (q[1] + 2 * q[2] * x)
    for arr in (value, dx, dp, dq):
        if not np.all(np.isfinite(arr)):
            raise NumericalBlowup("rational activation produced non-finite values")
    return value, dx, dp, dq


# ---------------------------------------------------------------- parameters

@dataclass
class MlpParams:
    """Ordered parameter arrays plus the architecture they describe."""

    d: int
    out_width: int
    seed: int
    arrays: dict = field(repr=False)

    @property
    def names(self):
        return list(self.arrays)

    def copy(self):
        return MlpParams(self.d, self.out_width, self.seed, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]

    def flatten(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vector):
        total = sum(arr.size for arr in self.arrays.values())
        if len(vector) != total:
            raise ShapeMismatch(f"flat vector has {len(vector)} entries, expected {total}")
        out, offset = {}, 0
        for name, arr in self.arrays.items():
            out[name] = np.asarray(vector[offset:offset + arr.size], dtype=float).reshape(arr.shape).copy()
            offset += arr.size
        return MlpParams(self.d, self.out_width, self.seed, out)

    def architecture(self):
        return {"input_width": 2 * self.d, "hidden": list(HIDDEN), "out_width": self.out_width,
                "activation": "rational(3,2)", "d": self.d}

    def save(self, path, extra=None):
        header = {"kind": "checkpoint", "architecture": self.architecture(), "seed": self.seed,
                  "out_width": self.out_width}
        if extra:
            header["extra"] = extra
        write_container(path, header, self.arrays)

    @classmethod
    def load(cls, path, expect_out_width=None, expect_d=None):
        header, blocks = read_container(path)
        if header.get("kind") != "checkpoint":
            raise OSError(f"{path}: not a checkpoint file")
        arch = header["architecture"]
        if arch.get("hidden") != list(HIDDEN) or arch.get("activation") != "rational(3,2)":
            raise ArchitectureMismatch(f"{path}: unsupported architecture {arch}")
        if expect_out_width is not None and header["out_width"] != expect_out_width:
            raise ArchitectureMismatch(f"checkpoint out_width {header['out_width']} != {expect_out_width}")
        if expect_d is not None and arch["d"] != expect_d:
            raise ArchitectureMismatch(f"checkpoint dimension {arch['d']} != {expect_d}")
        params = cls(arch["d"], header["out_width"], header["seed"], blocks)
        expected = init_params(arch["d"], header["out_width"], 0)
        for name, arr in expected.arrays.items():
            if name not in blocks or blocks[name].shape != arr.shape:
                raise ArchitectureMismatch(f"{path}: parameter {name} missing or misshapen")
        return params


def init_params(d, out_width, seed):
    """Glorot-uniform weights, zero biases, ReLU-fitted rational coefficients."""
    if out_width not in (1, 2):
        raise ArchitectureMismatch(f"out_width must be 1 or 2, got {out_width}")
    rng = np.random.default_rng(seed)
    widths = (2 * d, *HIDDEN, out_width)
    arrays = {}
    for layer in range(len(widths) - 1):
        fan_in, fan_out = widths[layer], widths[layer + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{layer + 1}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"b{layer + 1}"] = np.zeros(fan_out)
        if layer < len(HIDDEN):
            arrays[f"P{layer + 1}"] = np.array(RATIONAL_P)
            arrays[f"Q{layer + 1}"] = np.array(RATIONAL_Q)
    return MlpParams(int(d), int(out_width), int(seed), arrays)


# ------------------------------------------------------------ forward/backward

def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalBlowup(f"non-finite values in {what}")


class Workspace:
    """Reusable activation buffers for one batch size.

    Training evaluates the same coordinate batch every step; reusing the
    buffers avoids re-faulting tens of megabytes of fresh memory per step.
    """

    def __init__(self, batch):
        self.batch = batch
        self.z = [np.empty((batch, w)) for w in HIDDEN]
        self.a = [np.empty((batch, w)) for w in HIDDEN]
        self.g = np.empty((batch, max(HIDDEN)))
        self.g2 = np.empty((batch, max(HIDDEN)))


def mlp_forward(params, inputs, keep_cache=False, workspace=None):
    """Outputs of shape (B, out_width); optionally the activations for backprop.

    With a ``workspace`` the cached activations live in its buffers and are
    overwritten by the next forward call that uses it.
    """
    x = np.ascontiguousarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2 * params.d or x.shape[0] == 0:
        raise ShapeMismatch(f"inputs must be a nonempty (B, {2 * params.d}) array, got {x.shape}")
    _finite(x, "network inputs")
    ws = workspace if workspace is not None and workspace.batch == x.shape[0] else Workspace(x.shape[0])
    a = x
    cache = [x]
    for layer in range(1, len(HIDDEN) + 1):
        z = ws.z[layer - 1]
        np.matmul(a, params[f"W{layer}"], out=z)
        a = _kernels.rational_forward(z, params[f"b{layer}"], params[f"P{layer}"], params[f"Q{layer}"],
                                      ws.a[layer - 1])
        cache.extend([z, a])
    out = a @ params[f"W{len(HIDDEN) + 1}"] + params[f"b{len(HIDDEN) + 1}"]
    _finite(out, "network outputs")
    return (out, cache) if keep_cache else out


def mlp_backward(params, cache, out_cotangent, workspace=None):
    """Gradient of sum(out_cotangent * outputs) with respect to every parameter."""
    g = np.ascontiguousarray(out_cotangent, dtype=float)
    last = len(HIDDEN) + 1
    batch = cache[0].shape[0]
    if g.shape != (batch, params.out_width):
        raise ShapeMismatch(f"cotangent shape {g.shape} does not match outputs")
    ws = workspace if workspace is not None and workspace.batch == batch else Workspace(batch)
    grads = {}
    grads[f"W{last}"] = cache[-1].T @ g
    grads[f"b{last}"] = g.sum(axis=0)
    ga = np.matmul(g, params[f"W{last}"].T, out=ws.g[:, :HIDDEN[-1]])
    gz = ws.g2[:, :HIDDEN[-1]]
    for layer in range(len(HIDDEN), 0, -1):
        z = cache[2 * layer - 1]
        a_prev = cache[2 * layer - 2]
        gz = ws.g2[:, :HIDDEN[layer - 1]]
        gp, gq, gb = _kernels.rational_backward(z, params[f"P{layer}"], params[f"Q{layer}"], ga, gz)
        grads[f"P{layer}"] = gp
        grads[f"Q{layer}"] = gq
        grads[f"W{layer}"] = a_prev.T @ gz
        grads[f"b{layer}"] = gb
        if layer > 1:
            ga = np.matmul(gz, params[f"W{layer}"].T, out=ws.g[:, :HIDDEN[layer - 2]])
    for name, arr in grads.items():
        _finite(arr, f"gradient of {name}")
    return {name: grads[name] for name in params.names}


# -------------------------------------------------------------- subdomains

def classify_indices(i, j):
    """Vectorized tags for integer multi-index pairs of shape (K, d)."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    s = (i - j).sum(axis=-1)
    same = np.all(i == j, axis=-1)
    tags = np.where(s < 0, SubdomainTag.D1, SubdomainTag.D2).astype(np.int8)
    tags[s == 0] = SubdomainTag.D4
    tags[same] = SubdomainTag.D3
    return tags


def classify_points(x, y):
    """Vectorized tags for real point pairs of shape (K, d) (exact float comparison)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = (x - y).sum(axis=-1)
    same = np.all(x == y, axis=-1)
    tags = np.where(s < 0, SubdomainTag.D1, SubdomainTag.D2).astype(np.int8)
    tags[s == 0] = SubdomainTag.D4
    tags[same] = SubdomainTag.D3
    return tags


def classify_subdomain(x, y, index_form=None):
    """Tag of a single pair; ``index_form=(i, j)`` switches to exact integer arithmetic."""
    if index_form is not None:
        i, j = index_form
        return SubdomainTag(int(classify_indices(np.atleast_1d(i)[None], np.atleast_1d(j)[None])[0]))
    return SubdomainTag(int(classify_points(np.atleast_1d(x)[None], np.atleast_1d(y)[None])[0]))


def assemble_piecewise(g1, g2, tag):
    """Combine the two heads according to the subdomain tag (scalar or array)."""
    tag = np.asarray(tag)
    out = np.where(tag == SubdomainTag.D1, g1, g2)
    return np.where(tag == SubdomainTag.D4, 0.5 * (np.asarray(g1) + np.asarray(g2)), out)


def head_weights(tags):
    """(K, 2) weights so that the assembled kernel is sum(weights * heads, axis=1)."""
    tags = np.asarray(tags)
    w = np.zeros((tags.shape[0], 2))
    w[tags == SubdomainTag.D1, 0] = 1.0
    w[(tags == SubdomainTag.D2) | (tags == SubdomainTag.D3), 1] = 1.0
    w[tags == SubdomainTag.D4] = 0.5
    return w


class KernelModel:
    """Network evaluation at a fixed batch of coordinate pairs.

    ``weights`` routes the heads: None for a single-output network, or the
    (K, 2) matrix from ``head_weights`` for AugNN.  D4 entries use exactly
    0.5 * (G1 + G2), so they equal the head mean bit for bit.
    """

    def __init__(self, inputs, tags=None, reuse_buffers=True):
        self.inputs = np.ascontiguousarray(inputs, dtype=float)
        self.workspace = Workspace(self.inputs.shape[0]) if reuse_buffers else None
        self.tags = None if tags is None else np.asarray(tags)
        self.weights = None if tags is None else head_weights(tags)

    def forward(self, params, keep_cache=False):
        out, cache = mlp_forward(params, self.inputs, keep_cache=True, workspace=self.workspace)
        if params.out_width == 1:
            values = out[:, 0].copy()
        else:
            if self.weights is None:
                raise ArchitectureMismatch("two-head network needs subdomain tags")
            values = assemble_piecewise(out[:, 0], out[:, 1], self.tags)
        return (values, cache) if keep_cache else values

    def backward(self, params, cache, value_cotangent):
        gv = np.asarray(value_cotangent, dtype=float)
        if params.out_width == 1:
            gout = gv[:, None]
        else:
            gout = self.weights * gv[:, None]
        return mlp_backward(params, cache, gout, workspace=self.workspace)


# ----------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    return AdamState({k: z.copy() for k, z in zeros.items()}, zeros, 0, beta1, beta2, eps)


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update, in place; returns ``(state, params)``."""
    if not lr >= 0:
        raise InvalidConfig(f"learning rate must be non-negative, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params
