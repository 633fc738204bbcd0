import pytest
import torch

from fedtsad.dataset import write_synthetic_dataset

# n=3, w=4, hidden=5, latent=2
TINY = dict(input_dims=3, window_len=4, hidden_size=5, latent_size=2, batch_size=8, dtype='float64')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: directional experiments taking minutes')


@pytest.fixture(scope='session')
def data_root(tmp_path_factory):
    """ Synthetic SMD, SMAP and PSM with the benchmark geometry and few rows per series.
    """
    root = tmp_path_factory.mktemp('data')
    write_synthetic_dataset('SMD', root, train_rows=40, test_rows=40, seed=1)
    write_synthetic_dataset('SMAP', root, train_rows=30, test_rows=30, seed=2)
    write_synthetic_dataset('PSM', root, train_rows=400, test_rows=300, seed=3)
    return root


@pytest.fixture
def tiny_windows():
    g = torch.Generator().manual_seed(0)
    return torch.rand(20, TINY['window_len'], TINY['input_dims'], generator=g, dtype=torch.float64)
