"""Central finite-difference gradient checks."""

import numpy as np

from seal import nn


def numeric_grad(f, arrays, k, h=1e-6):
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*arrays)
        x[i] = old - h
        down = f(*arrays)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(a, b) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def check(build, arrays, h=1e-6):
    """``build(*tensors)`` returns a scalar Tensor.  Returns the worst
    relative error over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [nn.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()

    def value(*xs):
        return float(build(*(nn.Tensor(x) for x in xs)).data)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, relative_error(analytic, numeric_grad(value, arrays, k, h)))
    return worst
