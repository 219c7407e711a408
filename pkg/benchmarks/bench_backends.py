"""Compare the numba kernels against the pure-numpy fallbacks.

Times each hot kernel on realistic shapes (the poisson1d GreenMGNet setup at
n=513, k=2, m=7 with a batch of 100 forcings, and a 50-wide activation
layer), checks that both implementations agree, and then times a full
``mlmi_apply`` + ``mlmi_adjoint`` under each backend in a subprocess.

    python benchmarks/bench_backends.py [--n 513] [--k 2] [--m 7] [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from greenmg import _kernels
from greenmg.mlmi import make_plan


def speed_test(func, repeat):
    func()
    start = time.perf_counter()
    for _ in range(repeat):
        func()
    return 1e3 * (time.perf_counter() - start) / repeat


def kernel_cases(n, k, m, batch):
    rng = np.random.default_rng(0)
    plan = make_plan(n, 1, k, m)
    sched = plan.levels[0]
    s = rng.standard_normal(plan.size)
    ft = rng.standard_normal((n, batch))
    wt = rng.standard_normal((n, batch))
    vals = rng.standard_normal(sched.rows.shape[0])
    z = rng.standard_normal((16641, 50))
    p = np.array([0.0218, 0.5, 1.5957, 1.1915])
    q = np.array([1.0, 0.0, 2.383])
    bias = np.zeros(50)
    out = np.empty_like(z)
    return {
        "correction_values": lambda impl: impl.correction_values(s, sched.g, sched.st, sched.sw),
        "csr_matvec": lambda impl: impl.csr_matvec(sched.indptr, sched.cols, vals, ft, 0.5),
        "correction_adjoint": lambda impl: impl.correction_adjoint(sched.rows, sched.cols, wt, ft, 0.5),
        "scatter_corrections": lambda impl: impl.scatter_corrections(np.zeros(plan.size), sched.g, sched.st,
                                                                     sched.sw, vals),
        "rational_forward": lambda impl: impl.rational_forward(z.copy(), bias, p, q, out),
        "rational_backward": lambda impl: impl.rational_backward(z, p, q, z, np.empty_like(z)),
    }


END_TO_END = """
import sys, time, numpy as np
from greenmg.mlmi import make_plan, mlmi_apply, mlmi_adjoint
n, k, m, repeat = map(int, sys.argv[1:5])
plan = make_plan(n, 1, k, m)
rng = np.random.default_rng(0)
s = rng.standard_normal(plan.size); f = rng.standard_normal((100, n)); w = rng.standard_normal((100, n))
mlmi_apply(plan, s, f); mlmi_adjoint(plan, f, w)
t = time.perf_counter()
for _ in range(repeat):
    mlmi_apply(plan, s, f); mlmi_adjoint(plan, f, w)
print(1e3 * (time.perf_counter() - t) / repeat)
"""


def end_to_end(backend, n, k, m, repeat):
    env = dict(os.environ, GREENMG_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", END_TO_END, str(n), str(k), str(m), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--n", type=int, default=513)
    parser.add_argument("--k", type=int, default=2)
    parser.add_argument("--m", type=int, default=7)
    parser.add_argument("--batch", type=int, default=100)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    if _kernels.numba_impl is None:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}{'max diff':>12}")
    for name, case in kernel_cases(args.n, args.k, args.m, args.batch).items():
        fast = speed_test(lambda: case(_kernels.numba_impl), args.repeat)
        slow = speed_test(lambda: case(_kernels.numpy_impl), args.repeat)
        a, b = case(_kernels.numba_impl), case(_kernels.numpy_impl)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
        print(f"{name:<22}{fast:>12.3f}{slow:>12.3f}{slow / fast:>10.1f}{diff:>12.2e}")

    fast = end_to_end("numba", args.n, args.k, args.m, args.repeat)
    slow = end_to_end("numpy", args.n, args.k, args.m, args.repeat)
    print(f"{'apply+adjoint':<22}{fast:>12.3f}{slow:>12.3f}{slow / fast:>10.1f}")


if __name__ == "__main__":
    main()
