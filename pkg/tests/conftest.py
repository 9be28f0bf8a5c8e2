import numpy as np
import pytest

from agnostic_net.data import DatasetSpec, generate
from agnostic_net.tensor import Tensor, finite_diff_grad, relative_error

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def max_grad_error(fn, arrays):
    """Largest relative error between backward() and central differences over all inputs.

    ``fn`` maps a list of Tensors to a scalar Tensor.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(leaves).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def partial(t, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = t
            return fn(args)
        numeric = finite_diff_grad(partial, arrays[i], FD_STEP)
        worst = max(worst, relative_error(leaf.grad, numeric))
    return worst


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(DatasetSpec(n_target_per_class=12, n_context_per_class=12, n_test_per_class=6, seed=3))
