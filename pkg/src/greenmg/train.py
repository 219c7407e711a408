"""Training and evaluation for the three model variants.

* ``GL``: single-output network, dense quadrature over every grid pair.
* ``GL-aug``: two-head AugNN, dense quadrature.
* ``GreenMGNet``: AugNN evaluated only on an MLMI point set, integrated with
  ``mlmi_apply`` and trained through ``mlmi_adjoint``.

Dense variants may subsample a fraction p of the grid pairs; the subset is
redrawn every epoch and the kept samples are scaled by 1/p so the quadrature
stays unbiased.
"""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateTarget, InvalidConfig, NumericalBlowup, ShapeMismatch
from .grid import build_hierarchy
from .mlmi import build_plan, dense_adjoint, dense_apply, mlmi_adjoint, mlmi_apply, point_fraction
from .nn import KernelModel, adam_init, adam_step, classify_indices, init_params
from .problems import exact_kernel_matrix

VARIANTS = ("GL", "GL-aug", "GreenMGNet")
TARGET_FLOOR = 1e-14


@dataclass
class TrainConfig:
    variant: str = "GreenMGNet"
    problem: str = "poisson1d"
    epochs: int = 2000
    lr: float = 0.01
    milestones: tuple = (1000, 3000)
    gamma: float = 0.1
    batch_size: int = 0
    p: float = 1.0
    k: int = 2
    m: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not 0 < self.p <= 1:
            raise InvalidConfig("p must lie in (0, 1]")
        self.milestones = tuple(int(x) for x in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise InvalidConfig("milestones must be strictly increasing")
        if self.batch_size < 0:
            raise InvalidConfig("batch_size must be >= 0 (0 means full batch)")

    @property
    def out_width(self):
        return 1 if self.variant == "GL" else 2

    def to_dict(self):
        out = asdict(self)
        out["milestones"] = list(self.milestones)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{key: value for key, value in data.items() if key in known})


def desk_config(variant, problem, **overrides):
    """Scaled-down defaults: 2000 full-batch epochs in 1D, 300 epochs of batch 20 in 2D."""
    if problem.endswith("2d"):
        base = dict(epochs=300, milestones=(100, 300), batch_size=20)
    else:
        base = dict(epochs=2000, milestones=(1000, 3000), batch_size=0)
    base.update(overrides)
    return TrainConfig(variant=variant, problem=problem, **base)


def lr_at(epoch, config):
    """base * gamma ** (number of milestones <= epoch)."""
    passed = sum(1 for mark in config.milestones if mark <= epoch)
    return config.lr * config.gamma ** passed


def relative_l2_loss(u_pred, u_true):
    """Mean of ||u - u_pred|| / ||u|| over the batch, and its cotangent in u_pred."""
    u_pred = np.asarray(u_pred, dtype=float)
    u_true = np.asarray(u_true, dtype=float)
    if u_pred.shape != u_true.shape:
        raise ShapeMismatch(f"prediction {u_pred.shape} and target {u_true.shape} differ")
    batch = u_true.shape[0]
    diff = (u_true - u_pred).reshape(batch, -1)
    tnorm = np.linalg.norm(u_true.reshape(batch, -1), axis=1)
    if np.any(tnorm < TARGET_FLOOR):
        raise DegenerateTarget("a target field has norm below 1e-14")
    dnorm = np.linalg.norm(diff, axis=1)
    loss = float(np.mean(dnorm / tnorm))
    safe = np.where(dnorm > 0, dnorm, 1.0)
    scale = np.where(dnorm > 0, 1.0 / (tnorm * safe * batch), 0.0)
    cot = -(diff * scale[:, None]).reshape(u_true.shape)
    return loss, cot


def all_pairs(n, d):
    """Index pairs and coordinates for every (x, y) on the n-point grid, row-major."""
    hier = build_hierarchy(n, d, 0)
    nn = n ** d
    flat = np.arange(nn)
    multi = flat[:, None] if d == 1 else np.column_stack(np.divmod(flat, n))
    i = np.repeat(multi, nn, axis=0)
    j = np.tile(multi, (nn, 1))
    h = hier.h(0)
    return i, j, np.hstack([i * h, j * h])


class Objective:
    """Loss and parameter gradient for one variant on one grid."""

    def __init__(self, variant, n, d, k=None, m=None, p=1.0, seed=0):
        self.variant = variant
        self.n, self.d = n, d
        self.h = 1.0 / (n - 1)
        self.p = float(p)
        self.rng = np.random.default_rng([int(seed), 1])
        if variant == "GreenMGNet":
            self.plan = build_plan(build_hierarchy(n, d, k), m)
            i, j = self.plan.point_set.index_pairs()
            self.model = KernelModel(self.plan.point_set.coordinates(), classify_indices(i, j))
            self.fraction = point_fraction(self.plan.point_set, self.plan.hierarchy)
        else:
            self.plan = None
            i, j, xy = all_pairs(n, d)
            tags = classify_indices(i, j) if variant == "GL-aug" else None
            self.model = KernelModel(xy, tags)
            self.fraction = self.p

    def _subset(self):
        total = self.model.inputs.shape[0]
        if self.p >= 1.0:
            return None
        count = max(1, int(round(self.p * total)))
        return np.sort(self.rng.choice(total, size=count, replace=False))

    def value_and_grad(self, params, forcings, solutions, resample=True):
        if self.plan is not None:
            values, cache = self.model.forward(params, keep_cache=True)
            u = mlmi_apply(self.plan, values, forcings)
            loss, cot = relative_l2_loss(u, solutions)
            grad_values = mlmi_adjoint(self.plan, forcings, cot)
            return loss, self.model.backward(params, cache, grad_values)
        nn = self.n ** self.d
        subset = self._subset() if resample else None
        if subset is None:
            values, cache = self.model.forward(params, keep_cache=True)
            kernel = values.reshape(nn, nn)
            u = dense_apply(kernel, forcings, self.h, self.d)
            loss, cot = relative_l2_loss(u, solutions)
            grad_values = dense_adjoint(forcings, cot, self.h, self.d).ravel()
            return loss, self.model.backward(params, cache, grad_values)
        sub = KernelModel(self.model.inputs[subset], None if self.model.tags is None else self.model.tags[subset])
        values, cache = sub.forward(params, keep_cache=True)
        kernel = np.zeros(nn * nn)
        kernel[subset] = values / self.p
        u = dense_apply(kernel.reshape(nn, nn), forcings, self.h, self.d)
        loss, cot = relative_l2_loss(u, solutions)
        grad_values = dense_adjoint(forcings, cot, self.h, self.d).ravel()[subset] / self.p
        return loss, sub.backward(params, cache, grad_values)


@dataclass
class TrainResult:
    params: object
    losses: list
    train_seconds: float
    p: float
    config: TrainConfig = field(repr=False, default=None)


def train_model(config, dataset, progress=None):
    """Run ``config.epochs`` epochs of Adam on ``dataset``; deterministic per seed."""
    spec = dataset.spec
    if spec.name != config.problem:
        raise ShapeMismatch(f"dataset problem {spec.name!r} differs from config problem {config.problem!r}")
    objective = Objective(config.variant, spec.n, spec.d, config.k, config.m, config.p, config.seed)
    params = init_params(spec.d, config.out_width, config.seed)
    state = adam_init(params)
    shuffle = np.random.default_rng([int(config.seed), 2])
    N = len(dataset)
    bs = N if config.batch_size in (0, None) or config.batch_size >= N else config.batch_size
    losses = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = shuffle.permutation(N) if bs < N else np.arange(N)
        total = 0.0
        steps = 0
        for lo in range(0, N, bs):
            idx = order[lo:lo + bs]
            try:
                loss, grads = objective.value_and_grad(params, dataset.forcings[idx], dataset.solutions[idx])
            except NumericalBlowup as exc:
                raise NumericalBlowup(f"epoch {epoch}: {exc}", epoch=epoch) from exc
            if not math.isfinite(loss):
                raise NumericalBlowup(f"epoch {epoch}: non-finite loss", epoch=epoch)
            adam_step(state, params, grads, lr)
            total += loss * idx.shape[0]
            steps += idx.shape[0]
        losses.append(total / steps)
        if progress is not None:
            progress(epoch, losses[-1])
    seconds = time.perf_counter() - start
    return TrainResult(params, losses, seconds, objective.fraction, config)


# ------------------------------------------------------------------ inference

def export_learned_kernel(params, n, d, variant, k=None, m=None):
    """Dense kernel on all grid pairs, plus MLMI-aligned samples for GreenMGNet.

    Returns ``{"kernel": (n**d, n**d) array}`` and, when (k, m) is given for
    GreenMGNet, ``"samples"`` and ``"plan"`` as well.
    """
    i, j, xy = all_pairs(n, d)
    tags = classify_indices(i, j) if params.out_width == 2 else None
    kernel = KernelModel(xy, tags).forward(params).reshape(n ** d, n ** d)
    out = {"kernel": kernel}
    if variant == "GreenMGNet" and k is not None:
        plan = build_plan(build_hierarchy(n, d, k), m)
        pi, pj = plan.point_set.index_pairs()
        out["plan"] = plan
        out["samples"] = KernelModel(plan.point_set.coordinates(), classify_indices(pi, pj)).forward(params)
    return out


class Predictor:
    """Applies a frozen learned kernel without touching the network."""

    def __init__(self, h, d, kernel=None, plan=None, samples=None):
        self.h, self.d = h, d
        self.kernel, self.plan, self.samples = kernel, plan, samples

    def __call__(self, forcings):
        if self.plan is not None:
            return mlmi_apply(self.plan, self.samples, forcings)
        return dense_apply(self.kernel, forcings, self.h, self.d)


def make_predictor(params, n, d, variant, k=None, m=None):
    exported = export_learned_kernel(params, n, d, variant, k, m)
    h = 1.0 / (n - 1)
    if "plan" in exported:
        pred = Predictor(h, d, exported["kernel"], exported["plan"], exported["samples"])
    else:
        pred = Predictor(h, d, exported["kernel"])
    return pred, exported["kernel"]


@dataclass
class Metrics:
    eps_u: float
    eps_G: object
    p: float
    train_seconds: object = None
    infer_seconds: object = None
    losses: list = field(default_factory=list, repr=False)
    E_u: object = field(default=None, repr=False)
    E_G: object = field(default=None, repr=False)

    def summary(self):
        return {"eps_u": self.eps_u, "eps_G": self.eps_G, "p": self.p,
                "train_seconds": self.train_seconds, "infer_seconds": self.infer_seconds}


def relative_errors(u_pred, u_true):
    batch = u_true.shape[0]
    diff = np.linalg.norm((u_true - u_pred).reshape(batch, -1), axis=1)
    ref = np.linalg.norm(u_true.reshape(batch, -1), axis=1)
    if np.any(ref < TARGET_FLOOR):
        raise DegenerateTarget("a target field has norm below 1e-14")
    return diff / ref


def compute_metrics(predict, dataset, kernel=None, p=1.0, pointwise=False):
    """eps_u over the dataset and, when an exact kernel is attached, eps_G.

    ``predict`` maps a batch of forcings to predicted solutions; ``kernel`` is
    the densely evaluated learned kernel used for eps_G.
    """
    if len(dataset) == 0:
        raise ShapeMismatch("evaluation dataset is empty")
    t0 = time.perf_counter()
    u_pred = predict(dataset.forcings)
    infer = time.perf_counter() - t0
    eps_u = float(np.mean(relative_errors(u_pred, dataset.solutions)))
    exact = dataset.kernel if dataset.kernel is not None else exact_kernel_matrix(dataset.spec)
    eps_G = None
    E_G = None
    if exact is not None and kernel is not None:
        eps_G = float(np.linalg.norm(exact - kernel) / np.linalg.norm(exact))
        E_G = np.abs(exact - kernel) if pointwise else None
    E_u = np.abs(dataset.solutions - u_pred) if pointwise else None
    return Metrics(eps_u, eps_G, float(p), infer_seconds=infer, E_u=E_u, E_G=E_G)


def evaluate(params, dataset, variant, k=None, m=None, p=1.0, pointwise=False):
    spec = dataset.spec
    predict, kernel = make_predictor(params, spec.n, spec.d, variant, k, m)
    if predict.plan is not None:
        p = point_fraction(predict.plan.point_set, predict.plan.hierarchy)
    return compute_metrics(predict, dataset, kernel, p, pointwise)
