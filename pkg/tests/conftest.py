import numpy as np
import pytest

from mfformer.gradcheck import gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leaf(rng, *shape):
    from mfformer.tensor import Tensor

    return Tensor(rng.normal(size=shape), requires_grad=True)


def check_grad(fn, tensors, tol=1e-6, **kw):
    err = gradcheck(fn, tensors, **kw)
    assert err < tol, f"max relative gradient error {err:.3e} >= {tol}"
    return err
