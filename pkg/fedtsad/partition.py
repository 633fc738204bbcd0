"""
Split training rows across simulated clients: one client per series, contiguous Dirichlet-sized blocks,
or contiguous blocks of (almost) equal size. Test data is never partitioned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Union

import numpy as np
import pandas as pd
import torch

from .dataset import DatasetBundle, MultivariateSeries, WindowSet, make_windows

logger = logging.getLogger(__name__)

PARTITION_SCHEMES = ('per_series', 'dirichlet_contiguous', 'equal')


class InfeasiblePartitionError(ValueError):
    pass


@dataclass(frozen=True)
class RowSlice:
    entity_id: str
    row_start: int
    row_end: int

    def __len__(self) -> int:
        return self.row_end - self.row_start


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = 'per_series'
    beta: float = 0.5
    n_clients: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.scheme not in PARTITION_SCHEMES:
            raise ValueError(f'scheme is expected to be one of {PARTITION_SCHEMES}, but got {self.scheme=}.')
        if self.n_clients < 1:
            raise ValueError(f'n_clients must be positive, but got {self.n_clients=}.')
        if self.scheme == 'dirichlet_contiguous' and not self.beta > 0:
            raise ValueError(f'beta must be positive, but got {self.beta=}.')


@dataclass(frozen=True)
class ClientAssignment:
    n_clients: int
    assignment: List[List[RowSlice]]
    proportions: np.ndarray

    def client_rows(self, client_id: int) -> int:
        return sum(len(s) for s in self.assignment[client_id])

    def validate(self,
                 row_counts: Dict[str, int]
                 ) -> None:
        """ Check that the slices are non-empty, disjoint and cover every training row exactly once.
        """
        if len(self.assignment) != self.n_clients:
            raise InfeasiblePartitionError(f'{self.n_clients=} but {len(self.assignment)=}.')
        covered = {entity_id: np.zeros(rows, dtype=np.int64) for entity_id, rows in row_counts.items()}
        for client_id, slices in enumerate(self.assignment):
            if self.client_rows(client_id) < 1:
                raise InfeasiblePartitionError(f'client {client_id} owns no rows.')
            seen = set()
            for s in slices:
                if s.entity_id in seen:
                    raise InfeasiblePartitionError(f'client {client_id} owns two slices of {s.entity_id}.')
                seen.add(s.entity_id)
                covered[s.entity_id][s.row_start:s.row_end] += 1
        for entity_id, counts in covered.items():
            if not (counts == 1).all():
                raise InfeasiblePartitionError(f'rows of {entity_id} are not covered exactly once.')
        if abs(float(np.sum(self.proportions)) - 1.0) > 1e-9:
            raise InfeasiblePartitionError(f'proportions must sum to 1, but got {np.sum(self.proportions)=}.')

    def to_table(self) -> pd.DataFrame:
        rows = [(client_id, s.entity_id, s.row_start, s.row_end)
                for client_id, slices in enumerate(self.assignment) for s in slices]
        return pd.DataFrame(rows, columns=['client_id', 'entity_id', 'row_start', 'row_end'])

    def write_table(self,
                    path: Union[str, Path]
                    ) -> None:
        self.to_table().to_csv(path, index=False)


class ClientData(NamedTuple):
    windows: WindowSet
    n_rows: int


def _assignment_from_sizes(series: Sequence[MultivariateSeries],
                           sizes: np.ndarray
                           ) -> ClientAssignment:
    # lays consecutive blocks over the concatenated training timeline; a block crossing an
    # entity boundary becomes one contiguous slice per entity
    assignment: List[List[RowSlice]] = []
    entity_idx, offset = 0, 0
    for size in sizes.tolist():
        slices, remaining = [], size
        while remaining > 0:
            rows = series[entity_idx].train.shape[0]
            take = min(remaining, rows - offset)
            slices.append(RowSlice(series[entity_idx].entity_id, offset, offset + take))
            remaining -= take
            offset += take
            if offset == rows:
                entity_idx, offset = entity_idx + 1, 0
        assignment.append(slices)
    total = int(sizes.sum())
    return ClientAssignment(len(sizes), assignment, sizes / total)


def _check_feasible(n_rows: int,
                    n_clients: int
                    ) -> None:
    if n_clients < 1:
        raise InfeasiblePartitionError(f'n_clients must be positive, but got {n_clients=}.')
    if n_clients > n_rows:
        raise InfeasiblePartitionError(f'Cannot give each of {n_clients=} clients a row out of {n_rows=}.')


def partition_per_series(bundle: DatasetBundle
                         ) -> ClientAssignment:
    """ Client i owns all training rows of series i.
    """
    if not bundle.series:
        raise InfeasiblePartitionError(f'{bundle.name} has no series.')
    sizes = np.array([s.train.shape[0] for s in bundle.series], dtype=np.int64)
    assignment = [[RowSlice(s.entity_id, 0, s.train.shape[0])] for s in bundle.series]
    return ClientAssignment(len(bundle.series), assignment, sizes / sizes.sum())


def dirichlet_block_sizes(n_rows: int,
                          n_clients: int,
                          beta: float,
                          seed: int
                          ) -> np.ndarray:
    """ Block sizes round(p_i * n_rows) for p ~ Dirichlet(beta * 1), drawn as normalized Gamma variates.

    The last block absorbs the rounding residue; blocks below one row take single rows from the largest block.
    """
    _check_feasible(n_rows, n_clients)
    rng = np.random.default_rng(seed)
    draws = rng.gamma(beta, 1.0, size=n_clients)
    total = draws.sum()
    if not np.isfinite(total) or total <= 0:
        logger.warning(f'Degenerate Dirichlet draw for {beta=}, {seed=}; falling back to equal proportions')
        draws, total = np.ones(n_clients), float(n_clients)
    proportions = draws / total

    sizes = np.empty(n_clients, dtype=np.int64)
    sizes[:-1] = np.round(proportions[:-1] * n_rows).astype(np.int64)
    sizes[-1] = n_rows - sizes[:-1].sum()
    while (sizes < 1).any():
        smallest, largest = int(np.argmin(sizes)), int(np.argmax(sizes))
        sizes[largest] -= 1
        sizes[smallest] += 1
    return sizes


def equal_block_sizes(n_rows: int,
                      n_clients: int
                      ) -> np.ndarray:
    _check_feasible(n_rows, n_clients)
    sizes = np.full(n_clients, n_rows // n_clients, dtype=np.int64)
    sizes[:n_rows % n_clients] += 1
    return sizes


def partition_dirichlet_contiguous(series: Union[MultivariateSeries, Sequence[MultivariateSeries]],
                                   cfg: PartitionConfig
                                   ) -> ClientAssignment:
    """ Assign consecutive time points to clients with Dirichlet(beta) distributed block sizes.

    Args:
        series: one series, or several whose training splits are laid end to end
        cfg: scheme must be dirichlet_contiguous

    Returns: ClientAssignment with cfg.n_clients contiguous blocks

    """
    if cfg.scheme != 'dirichlet_contiguous':
        raise ValueError(f'Expected the dirichlet_contiguous scheme, but got {cfg.scheme=}.')
    series = [series] if isinstance(series, MultivariateSeries) else list(series)
    n_rows = sum(s.train.shape[0] for s in series)
    sizes = dirichlet_block_sizes(n_rows, cfg.n_clients, cfg.beta, cfg.seed)
    return _assignment_from_sizes(series, sizes)


def partition_equal(series: Union[MultivariateSeries, Sequence[MultivariateSeries]],
                    n_clients: int
                    ) -> ClientAssignment:
    """ Contiguous blocks whose sizes differ by at most one row.
    """
    series = [series] if isinstance(series, MultivariateSeries) else list(series)
    n_rows = sum(s.train.shape[0] for s in series)
    return _assignment_from_sizes(series, equal_block_sizes(n_rows, n_clients))


def partition(bundle: DatasetBundle,
              cfg: PartitionConfig
              ) -> ClientAssignment:
    cfg.validate()
    if cfg.scheme == 'per_series':
        assignment = partition_per_series(bundle)
    elif cfg.scheme == 'dirichlet_contiguous':
        assignment = partition_dirichlet_contiguous(bundle.series, cfg)
    else:
        assignment = partition_equal(bundle.series, cfg.n_clients)
    assignment.validate({s.entity_id: s.train.shape[0] for s in bundle.series})
    return assignment


def merge_client_data(data: Sequence[ClientData]
                      ) -> ClientData:
    """ Pool several clients' windows into one client; anchors continue on one timeline.
    """
    windows, anchors, offset = [], [], 0
    for d in data:
        windows.append(d.windows.windows)
        anchors.append(d.windows.anchor_timestamps + offset)
        offset = int(anchors[-1][-1]) + 1
    return ClientData(WindowSet(torch.cat(windows, dim=0), np.concatenate(anchors)),
                      sum(d.n_rows for d in data))


def build_client_data(bundle: DatasetBundle,
                      assignment: ClientAssignment,
                      window_len: int,
                      stride: int = 1
                      ) -> List[ClientData]:
    """ Training windows per client, built inside each owned slice so no window crosses a slice boundary.

    A slice shorter than window_len is padded at its front by repeating its first row.
    Anchors are row indices on the client's own timeline (its slices laid end to end).
    """
    data = []
    for client_id, slices in enumerate(assignment.assignment):
        parts, anchors, offset = [], [], 0
        for s in slices:
            matrix = bundle.get(s.entity_id).train[s.row_start:s.row_end]
            if len(s) < window_len:
                logger.warning(f'client {client_id}: slice of {len(s)} rows of {s.entity_id} '
                               f'padded to {window_len=}')
                matrix = np.concatenate([np.repeat(matrix[:1], window_len - len(s), axis=0), matrix])
            windows = make_windows(matrix, window_len, stride)
            parts.append(windows.windows)
            anchors.append(windows.anchor_timestamps + offset)
            offset += matrix.shape[0]
        windows = parts[0] if len(parts) == 1 else torch.cat(parts, dim=0)
        data.append(ClientData(WindowSet(windows, np.concatenate(anchors)), assignment.client_rows(client_id)))
    return data
