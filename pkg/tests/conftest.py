import pytest

from bitflip.data import write_synthetic_mnist


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Desk-scale digit corpus in IDX format, shared across the session."""
    d = tmp_path_factory.mktemp("digits")
    write_synthetic_mnist(d, n_train=8000, n_test=2000, seed=7, noise=0.45,
                          max_shift=3)
    return d


@pytest.fixture(scope="session")
def small_digits_dir(tmp_path_factory):
    """Tiny variant for fast smoke runs."""
    d = tmp_path_factory.mktemp("digits_small")
    write_synthetic_mnist(d, n_train=1000, n_test=300, seed=7, noise=0.45,
                          max_shift=3)
    return d
