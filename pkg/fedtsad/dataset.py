"""
Loading, min-max normalization and sliding windows for the SMD, SMAP and PSM benchmarks.

On-disk layout ::

    <root>/<dataset>/meta.yaml                 entities: [...], dims: n
    <root>/<dataset>/<entity_id>_train.csv     [T_train, n], no header
    <root>/<dataset>/<entity_id>_test.csv      [T_test, n], no header
    <root>/<dataset>/<entity_id>_labels.csv    [T_test], one {0, 1} per row
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import yaml
from torch import Tensor

logger = logging.getLogger(__name__)

DATASET_NAMES = ('SMD', 'SMAP', 'PSM')
# (NS, ND, default NC)
DATASET_GEOMETRY: Dict[str, Tuple[int, int, int]] = {'SMD': (28, 38, 28),
                                                     'SMAP': (54, 25, 54),
                                                     'PSM': (1, 25, 24)}
MANIFEST_NAMES = ('meta.yaml', 'meta.json')
DEFAULT_WINDOW_LEN = 10


class DatasetLoadError(FileNotFoundError):
    pass


class DatasetFormatError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class MultivariateSeries:
    entity_id: str
    train: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self) -> None:
        if self.train.ndim != 2 or self.test.ndim != 2:
            raise DatasetFormatError(f'{self.entity_id}: train and test must be matrices, '
                                     f'but got {self.train.shape=}, {self.test.shape=}.')
        if self.train.shape[1] != self.test.shape[1] or self.train.shape[1] < 1:
            raise DatasetFormatError(f'{self.entity_id}: train and test column counts differ, '
                                     f'{self.train.shape[1]=}, {self.test.shape[1]=}.')
        if self.test_labels.shape != (self.test.shape[0],):
            raise DatasetFormatError(f'{self.entity_id}: expected one label per test row, '
                                     f'but got {self.test_labels.shape=} for {self.test.shape=}.')
        if not np.isin(self.test_labels, (0, 1)).all():
            raise DatasetFormatError(f'{self.entity_id}: labels must be binary.')

    @property
    def dims(self) -> int:
        return self.train.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    mins: np.ndarray
    maxs: np.ndarray
    pooled: bool
    constant_dims: Tuple[int, ...] = ()
    missing_filled: int = 0


@dataclass(frozen=True)
class DatasetBundle:
    name: str
    series: List[MultivariateSeries]
    dims: int
    normalization_stats: Optional[NormalizationStats] = None

    @property
    def n_train_rows(self) -> int:
        return sum(s.train.shape[0] for s in self.series)

    def get(self, entity_id: str) -> MultivariateSeries:
        for s in self.series:
            if s.entity_id == entity_id:
                return s
        raise KeyError(entity_id)


@dataclass(frozen=True)
class WindowSet:
    """ Windows of shape [N, w, n] and, for each window, the row index of its last timestamp.
    """
    windows: Tensor
    anchor_timestamps: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.windows.size(0)

    @property
    def window_len(self) -> int:
        return self.windows.size(1)

    def subset(self, index: Union[slice, np.ndarray]) -> WindowSet:
        if isinstance(index, np.ndarray):
            return WindowSet(self.windows[torch.as_tensor(index)], self.anchor_timestamps[index])
        return WindowSet(self.windows[index], self.anchor_timestamps[index])


def _canonical_name(name: str
                    ) -> str:
    upper = name.upper()
    if upper not in DATASET_NAMES:
        raise ValueError(f'dataset is expected to be one of {DATASET_NAMES}, but got {name=}.')
    return upper


def _read_matrix(path: Path
                 ) -> np.ndarray:
    if not path.is_file():
        raise DatasetLoadError(f'Missing dataset file: {path}')
    frame = pd.read_csv(path, header=None, dtype=np.float64)
    return frame.to_numpy()


def _read_manifest(directory: Path
                   ) -> dict:
    for name in MANIFEST_NAMES:
        path = directory / name
        if path.is_file():
            with open(path) as f:
                manifest = yaml.safe_load(f)
            if not isinstance(manifest, dict) or 'entities' not in manifest or 'dims' not in manifest:
                raise DatasetFormatError(f'{path} must define "entities" and "dims".')
            return manifest
    raise DatasetLoadError(f'Missing dataset manifest: {directory / MANIFEST_NAMES[0]}')


def load_dataset(name: str,
                 root: Union[str, Path],
                 strict: bool = True
                 ) -> DatasetBundle:
    """ Load a benchmark dataset without normalizing it.

    Args:
        name: SMD, SMAP or PSM (case-insensitive)
        root: directory holding one sub-directory per dataset
        strict: also require the series count and dimensionality of the published benchmark

    Returns: DatasetBundle with raw values

    """
    name = _canonical_name(name)
    directory = Path(root) / name
    if not directory.is_dir() and (Path(root) / name.lower()).is_dir():
        directory = Path(root) / name.lower()
    manifest = _read_manifest(directory)
    dims = int(manifest['dims'])

    series = []
    for entity_id in manifest['entities']:
        entity_id = str(entity_id)
        train = _read_matrix(directory / f'{entity_id}_train.csv')
        test = _read_matrix(directory / f'{entity_id}_test.csv')
        labels = _read_matrix(directory / f'{entity_id}_labels.csv')
        if labels.ndim != 2 or labels.shape[1] != 1:
            raise DatasetFormatError(f'{entity_id}: labels must have one column, but got {labels.shape=}.')
        if not np.isin(labels, (0, 1)).all():
            raise DatasetFormatError(f'{entity_id}: labels must be 0 or 1, but got {np.unique(labels).tolist()}.')
        if train.shape[1] != dims or test.shape[1] != dims:
            raise DatasetFormatError(f'{entity_id}: expected {dims} dims from the manifest, '
                                     f'but got {train.shape[1]=}, {test.shape[1]=}.')
        series.append(MultivariateSeries(entity_id, train, test, labels[:, 0].astype(np.int64)))

    if strict:
        n_series, n_dims, _ = DATASET_GEOMETRY[name]
        if len(series) != n_series or dims != n_dims:
            raise DatasetFormatError(f'{name} is expected to have {n_series} series of {n_dims} dims, '
                                     f'but got {len(series)=}, {dims=}.')
    logger.info(f'Loaded {name}: {len(series)} series, {dims} dims, '
                f'{sum(s.train.shape[0] for s in series)} training rows')
    return DatasetBundle(name, series, dims)


def normalize(bundle: DatasetBundle
              ) -> DatasetBundle:
    """ Min-max scale each dimension with statistics of the training split.

    The statistics are pooled over all series of the bundle, so SMD and SMAP are normalized uniformly.
    Constant dimensions map to 0 and missing values are filled with 0 after scaling.
    """
    if bundle.normalization_stats is not None:
        raise ValueError(f'{bundle.name} is already normalized.')

    pooled_train = np.concatenate([s.train for s in bundle.series], axis=0)
    all_missing = np.isnan(pooled_train).all(axis=0)
    safe = np.where(all_missing[None, :], 0.0, pooled_train)
    mins = np.nanmin(safe, axis=0)
    maxs = np.nanmax(safe, axis=0)
    span = maxs - mins
    constant = span == 0
    if constant.any():
        logger.warning(f'{bundle.name}: constant dimensions {np.flatnonzero(constant).tolist()} map to 0')
    span = np.where(constant, 1.0, span)

    def _scale(x: np.ndarray) -> Tuple[np.ndarray, int]:
        out = (x - mins) / span
        out[:, constant] = 0.0
        missing = np.isnan(out)
        out[missing] = 0.0
        return out, int(missing.sum())

    series, missing_filled = [], 0
    for s in bundle.series:
        train, m_train = _scale(s.train)
        test, m_test = _scale(s.test)
        missing_filled += m_train + m_test
        series.append(replace(s, train=train, test=test))
    if missing_filled:
        logger.warning(f'{bundle.name}: filled {missing_filled} missing values with 0')

    stats = NormalizationStats(mins, maxs,
                               pooled=len(bundle.series) > 1,
                               constant_dims=tuple(np.flatnonzero(constant).tolist()),
                               missing_filled=missing_filled)
    return replace(bundle, series=series, normalization_stats=stats)


def truncate(bundle: DatasetBundle,
             max_train_rows: int
             ) -> DatasetBundle:
    """ Keep at most the first max_train_rows training rows of every series.
    """
    series = [replace(s, train=s.train[:max_train_rows]) for s in bundle.series]
    return replace(bundle, series=series)


def make_windows(series_matrix: Union[np.ndarray, Tensor],
                 window_len: int,
                 stride: int = 1
                 ) -> WindowSet:
    """ Sliding windows; window k covers rows [k * stride, k * stride + window_len).

    Args:
        series_matrix: matrix of shape [T, n]
        window_len: w
        stride: step between consecutive windows

    Returns: WindowSet with windows [N, w, n] and anchors k * stride + w - 1

    """
    if window_len < 1 or stride < 1:
        raise ValueError(f'window_len and stride must be positive, but got {window_len=}, {stride=}.')
    matrix = torch.as_tensor(series_matrix)
    if matrix.dim() != 2:
        raise ValueError(f'series_matrix is expected to be 2D, but got {matrix.dim()=}.')
    rows = matrix.size(0)
    if window_len > rows:
        raise EmptyInputError(f'window_len is larger than the number of rows, {window_len=}, {rows=}.')
    # [N, n, w] -> [N, w, n]
    windows = matrix.unfold(0, window_len, stride).transpose(1, 2)
    anchors = np.arange(windows.size(0), dtype=np.int64) * stride + window_len - 1
    return WindowSet(windows, anchors)


def make_test_windows(series_matrix: Union[np.ndarray, Tensor],
                      window_len: int
                      ) -> WindowSet:
    # every timestamp from window_len - 1 onward is an anchor
    return make_windows(series_matrix, window_len, stride=1)


def expand_scores(window_scores: Union[np.ndarray, Tensor],
                  anchor_timestamps: np.ndarray,
                  n_timestamps: int
                  ) -> np.ndarray:
    """ Put window scores on their anchor timestamps; timestamps before the first anchor get the first score.
    """
    window_scores = np.asarray(torch.as_tensor(window_scores).detach().cpu().numpy(), dtype=np.float64)
    if window_scores.shape != anchor_timestamps.shape:
        raise ValueError(f'One score per window is expected, but got {window_scores.shape=}, '
                         f'{anchor_timestamps.shape=}.')
    if len(anchor_timestamps) == 0:
        raise EmptyInputError('No windows to expand.')
    if anchor_timestamps[-1] != n_timestamps - 1 or len(anchor_timestamps) != n_timestamps - anchor_timestamps[0]:
        raise ValueError(f'Anchors must cover every timestamp from the first anchor to {n_timestamps - 1}.')
    scores = np.empty(n_timestamps, dtype=np.float64)
    scores[anchor_timestamps] = window_scores
    scores[:anchor_timestamps[0]] = window_scores[0]
    return scores


def write_synthetic_dataset(name: str,
                            root: Union[str, Path],
                            train_rows: int = 200,
                            test_rows: int = 200,
                            seed: int = 0,
                            n_series: Optional[int] = None,
                            dims: Optional[int] = None,
                            n_anomalies: int = 3
                            ) -> Path:
    """ Write a dataset in the on-disk layout: noisy sinusoids per dimension, with anomalous segments
    (level shifts on a few dimensions) injected into the test split.

    Args:
        name: SMD, SMAP or PSM; series count and dims default to the benchmark's
        root: directory to create <root>/<name> in
        train_rows: rows of every training split
        test_rows: rows of every test split
        seed: generator seed
        n_series: override of the series count
        dims: override of the dimensionality
        n_anomalies: anomalous segments per test split

    Returns: the dataset directory

    """
    name = _canonical_name(name)
    default_series, default_dims, _ = DATASET_GEOMETRY[name]
    n_series, dims = n_series or default_series, dims or default_dims
    rng = np.random.default_rng(seed)
    directory = Path(root) / name
    directory.mkdir(parents=True, exist_ok=True)

    entities = [f'{name.lower()}-{i}' for i in range(n_series)]
    for entity_id in entities:
        period = rng.uniform(10, 40, size=dims)
        phase = rng.uniform(0, 2 * np.pi, size=dims)
        scale = rng.uniform(0.5, 5.0, size=dims)

        def _signal(start: int, rows: int) -> np.ndarray:
            t = np.arange(start, start + rows)[:, None]
            return scale * np.sin(2 * np.pi * t / period + phase) + rng.normal(0, 0.05, size=(rows, dims)) * scale

        train = _signal(0, train_rows)
        test = _signal(train_rows, test_rows)
        labels = np.zeros(test_rows, dtype=np.int64)
        for _ in range(n_anomalies):
            length = int(rng.integers(3, max(4, test_rows // 20)))
            start = int(rng.integers(0, max(1, test_rows - length)))
            affected = rng.choice(dims, size=max(1, dims // 4), replace=False)
            test[start:start + length, affected] += 3 * scale[affected]
            labels[start:start + length] = 1

        pd.DataFrame(train).to_csv(directory / f'{entity_id}_train.csv', header=False, index=False)
        pd.DataFrame(test).to_csv(directory / f'{entity_id}_test.csv', header=False, index=False)
        pd.DataFrame(labels).to_csv(directory / f'{entity_id}_labels.csv', header=False, index=False)

    with open(directory / MANIFEST_NAMES[0], 'w') as f:
        yaml.safe_dump({'entities': entities, 'dims': dims}, f)
    return directory
