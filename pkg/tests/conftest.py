import os

# cap BLAS threads before numpy's first import so test timings and outputs
# are single-threaded and bitwise reproducible (mirrors hyperseg.__init__)
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("HGCN_THREADS", "1"))

import numpy as np
import pytest

try:
    # pytest plugins of unrelated installed packages can import numpy before
    # this conftest runs, in which case the env caps above came too late
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=int(os.environ.get("HGCN_THREADS", "1")))
except ImportError:
    pass

from hyperseg import autograd as ag


def central_diff(f, arrays, h=1e-5, n_samples=4, rng=None):
    """Finite-difference gradient samples of scalar f at random coordinates.

    Yields (array_index, flat_index, fd_value) tuples; f() must re-evaluate
    the loss from the current array contents.
    """
    rng = rng or np.random.default_rng(0)
    for ai, arr in enumerate(arrays):
        flat = arr.ravel()
        for idx in rng.choice(flat.size, size=min(n_samples, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f()
            flat[idx] = orig - h
            fm = f()
            flat[idx] = orig
            yield ai, int(idx), (fp - fm) / (2.0 * h)


def check_gradients(build_loss, params, h=1e-5, tol=1e-4, n_samples=4, rng=None):
    """Assert analytic gradients of build_loss() match central differences.

    build_loss must construct the graph from scratch and return the scalar
    loss Var (so dropout masks etc. must be re-seeded identically inside)."""
    for p in params:
        p.zero_grad()
    loss = build_loss()
    ag.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.value)
             for p in params]
    worst = 0.0
    values = [p.value for p in params]
    for ai, idx, fd in central_diff(lambda: float(build_loss().value), values,
                                    h=h, n_samples=n_samples, rng=rng):
        a = grads[ai].ravel()[idx]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        worst = max(worst, rel)
        assert rel < tol, f"param {ai} flat[{idx}]: analytic {a} vs fd {fd} (rel {rel})"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
