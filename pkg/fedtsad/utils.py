import hashlib
import logging
import threading
import time
from contextlib import contextmanager
from typing import Iterator, List, Union

import torch

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

_DTYPES = {'float32': torch.float32,
           'float64': torch.float64}

_GLOBAL_RNG_LOCK = threading.RLock()


def setup_logging(level: Union[int, str] = logging.INFO
                  ) -> None:
    """ Configure the root logger with one stream handler.
    """
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def derive_seed(seed: int,
                *tags: Union[str, int]
                ) -> int:
    """ Derive an independent sub-stream seed from a base seed and tags, e.g. ::

        >>> derive_seed(0, 'shuffle', 3, 'client', 7)

    The derivation is a SHA-256 hash, so it does not depend on the process, the
    thread or the order in which sub-streams are requested.

    Args:
        seed: base seed of the run
        tags: purpose tag, round, client id, ...

    Returns: non-negative 63-bit integer seed

    """
    key = '/'.join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') >> 1


def torch_dtype(name: str
                ) -> torch.dtype:
    if name not in _DTYPES:
        raise ValueError(f'dtype is expected to be one of {tuple(_DTYPES)}, but got {name=}.')
    return _DTYPES[name]


@contextmanager
def seeded(seed: int
           ) -> Iterator[None]:
    """ Run a block with the global torch RNG seeded, restoring the previous RNG state afterwards.

    The global generator is shared by all threads, so seeded blocks are serialized.
    """
    with _GLOBAL_RNG_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@contextmanager
def stopwatch(out: List[float]
              ) -> Iterator[None]:
    # appends the elapsed wall-clock seconds of the block to out
    start = time.perf_counter()
    try:
        yield
    finally:
        out.append(time.perf_counter() - start)
