import numpy as np
import pytest

from csrms.data_io import FeatureSet


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def make_featureset(features, labels, c=None) -> FeatureSet:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if c is None else c
    return FeatureSet(
        n=len(labels), d=features.shape[1], c=c, features=features, labels=labels
    )


def random_featureset(rng, n=None, d=None, c=None) -> FeatureSet:
    n = n if n is not None else int(rng.integers(4, 40))
    d = d if d is not None else int(rng.integers(1, 8))
    c = c if c is not None else int(rng.integers(1, min(n, 5) + 1))
    labels = np.concatenate([np.arange(c), rng.integers(0, c, size=n - c)])
    labels = labels[rng.permutation(n)]
    return make_featureset(rng.normal(size=(n, d)), labels, c)
