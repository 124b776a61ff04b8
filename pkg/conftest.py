"""
Shared pytest fixtures: seeded generators, a finite-difference gradient checker
and small rendered datasets.
"""

import numpy as np
import pytest

from shapegen import build_split, split_classes, write_dataset
from tensor import Tensor, mul, numerical_gradient, relative_error, sum_


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def gradcheck():
    """Compare backward() with central differences of Σ w·build(inputs) for random w."""

    def check(build, inputs, rng, tolerance=1e-4):
        sample = build(*inputs)
        weights = Tensor(rng.normal(size=sample.shape).astype(sample.dtype))

        def loss():
            return sum_(mul(build(*inputs), weights))

        for tensor in inputs:
            tensor.grad = None
        loss().backward()
        for tensor in inputs:
            numeric = numerical_gradient(loss, tensor)
            error = relative_error(tensor.grad, numeric)
            assert error < tolerance, f"relative gradient error {error:.2e}"

    return check


@pytest.fixture(scope='session')
def class_partition():
    return split_classes(15, 10, seed=0)


@pytest.fixture(scope='session')
def tiny_train_split(class_partition):
    train_classes, _ = class_partition
    return build_split('train', train_classes[:6], per_class=8, seed=0)


@pytest.fixture(scope='session')
def tiny_test_split(class_partition):
    _, test_classes = class_partition
    return build_split('test', test_classes[:5], per_class=6, seed=0)


@pytest.fixture(scope='session')
def dataset_root(tmp_path_factory, class_partition):
    root = tmp_path_factory.mktemp('shapes')
    train_classes, test_classes = class_partition
    write_dataset(str(root), train_classes[:5], test_classes[:5], per_class=4, seed=1)
    return str(root)
