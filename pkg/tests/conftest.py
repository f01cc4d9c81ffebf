import numpy as np
import pytest

from hsiadv import autodiff as ad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.absolute(a), np.absolute(b)), 1e-8)
    return np.max(np.absolute(a - b) / denom)


def gradcheck(f, x_data, step=1e-5, tol=1e-4, rng=None, n_coords=None):
    """Compare analytic input-gradient of scalar f against central differences.

    Checks every coordinate by default, or `n_coords` randomly chosen ones.
    Returns the worst relative error.
    """
    x = ad.Tensor(np.asarray(x_data, dtype=np.float64), requires_grad=True)
    loss = f(x)
    loss.backward()
    analytic = x.grad.copy()

    size = x.size
    if n_coords is None or n_coords >= size:
        idx = np.arange(size)
    else:
        assert rng is not None
        idx = rng.choice(size, size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        fd = ad.finite_diff_coord(lambda t: f(t), ad.Tensor(x.data), int(i), step)
        a = analytic.reshape(-1)[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        worst = max(worst, err)
    assert worst <= tol, f"gradient mismatch: worst rel err {worst:.3e} > {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
